//! Cross-entropy search over a positive scalar parameter.
//!
//! Candidates are drawn log-normally, `θ = exp(μ + σ z)`, so they stay
//! positive. Each generation keeps the best `elite_frac` of the pool formed
//! by the new candidates and the previous elites, refits `(μ, σ)` to the
//! elites' logarithms and stops once `σ < min_std`. The incumbent is the best
//! candidate over every evaluation, not the final sampling mean.

use rand_distr::StandardNormal;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DrocError, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossEntropyConfig {
    pub population: usize,
    pub elite_frac: f64,
    pub max_gens: usize,
    pub init_log_mean: f64,
    pub init_log_std: f64,
    pub min_std: f64,
    /// Weight of the elite spread in the smoothed std update
    /// `σ ← w σ_elite + (1 − w) σ`.
    pub std_smoothing: f64,
}

impl Default for CrossEntropyConfig {
    fn default() -> Self {
        CrossEntropyConfig {
            population: 32,
            elite_frac: 0.25,
            max_gens: 15,
            init_log_mean: 1e-2f64.ln(),
            init_log_std: 1.5,
            min_std: 0.05,
            std_smoothing: 0.5,
        }
    }
}

impl CrossEntropyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 8 {
            return Err(DrocError::InvalidConfig("CE population must be >= 8".into()));
        }
        if !(self.elite_frac > 0.0 && self.elite_frac <= 0.5) {
            return Err(DrocError::InvalidConfig("CE elite_frac must be in (0, 0.5]".into()));
        }
        if !(self.init_log_std > 0.0 && self.min_std > 0.0) {
            return Err(DrocError::InvalidConfig("CE spreads must be positive".into()));
        }
        if !(self.std_smoothing > 0.0 && self.std_smoothing <= 1.0) {
            return Err(DrocError::InvalidConfig("CE std_smoothing must be in (0, 1]".into()));
        }
        if self.max_gens == 0 {
            return Err(DrocError::InvalidConfig("CE max_gens must be >= 1".into()));
        }
        Ok(())
    }

    fn elite_count(&self) -> usize {
        ((self.elite_frac * self.population as f64).ceil() as usize).max(1)
    }
}

/// Sampling distribution and elite statistics after one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub log_mean: f64,
    pub log_std: f64,
    /// Mean objective over the elite set (`+∞` if nothing was feasible).
    pub elite_mean: f64,
    pub feasible: usize,
}

#[derive(Debug, Clone)]
pub struct CeOutcome<T> {
    /// Incumbent parameter, `None` if no candidate was ever finite.
    pub best: Option<(f64, f64, T)>,
    pub generations: Vec<Generation>,
    pub evaluations: usize,
    /// Three consecutive generations without a finite objective.
    pub all_infeasible: bool,
}

/// Number of consecutive all-infeasible generations that aborts the search.
const INFEASIBLE_PATIENCE: usize = 3;

/// Minimizes `objective(θ)` over `θ > 0`. The objective returns the value
/// (`+∞` for infeasible) and a payload kept for the incumbent.
///
/// Candidate `s` of generation `g` uses the stream `(seed, path…, g, s)`.
pub fn cross_entropy_min<T, F>(
    objective: F,
    cfg: &CrossEntropyConfig,
    seed: u64,
    path: &[u64],
) -> Result<CeOutcome<T>>
where
    T: Send,
    F: Fn(f64) -> Result<(f64, T)> + Sync,
{
    cfg.validate()?;
    let mut mean = cfg.init_log_mean;
    let mut std = cfg.init_log_std;
    let n_elite = cfg.elite_count();
    let mut best: Option<(f64, f64, T)> = None;
    let mut elites: Vec<(f64, f64)> = Vec::new();
    let mut generations = Vec::new();
    let mut evaluations = 0;
    let mut infeasible_streak = 0;
    let mut all_infeasible = false;

    for g in 0..cfg.max_gens {
        let thetas: Vec<f64> = (0..cfg.population)
            .map(|s| {
                let mut p = path.to_vec();
                p.extend([g as u64, s as u64]);
                let z: f64 = rng::stream(seed, &p).sample(StandardNormal);
                (mean + std * z).exp()
            })
            .collect();
        let results = thetas
            .par_iter()
            .map(|&t| objective(t))
            .collect::<Result<Vec<_>>>()?;
        evaluations += results.len();

        let mut pool = elites.clone();
        for (&theta, (value, payload)) in thetas.iter().zip(results) {
            if !value.is_finite() {
                continue;
            }
            pool.push((theta, value));
            if best.as_ref().is_none_or(|b| value < b.1) {
                best = Some((theta, value, payload));
            }
        }
        let feasible = pool.len() - elites.len();
        if pool.is_empty() {
            infeasible_streak += 1;
            generations.push(Generation {
                log_mean: mean,
                log_std: std,
                elite_mean: f64::INFINITY,
                feasible: 0,
            });
            if infeasible_streak >= INFEASIBLE_PATIENCE {
                all_infeasible = true;
                break;
            }
            // infeasibility comes from too large a θ
            mean -= 2.0 * std;
            continue;
        }
        infeasible_streak = 0;

        pool.sort_by(|a, b| a.1.total_cmp(&b.1));
        pool.truncate(n_elite);
        let k = pool.len() as f64;
        let logs: Vec<f64> = pool.iter().map(|(t, _)| t.ln()).collect();
        mean = logs.iter().sum::<f64>() / k;
        let elite_std = (logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / k).sqrt();
        std = cfg.std_smoothing * elite_std + (1.0 - cfg.std_smoothing) * std;
        let elite_mean = pool.iter().map(|(_, v)| v).sum::<f64>() / k;
        elites = pool;
        generations.push(Generation {
            log_mean: mean,
            log_std: std,
            elite_mean,
            feasible,
        });
        if std < cfg.min_std {
            break;
        }
    }

    Ok(CeOutcome {
        best,
        generations,
        evaluations,
        all_infeasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_quadratic(theta: f64) -> Result<(f64, ())> {
        Ok(((theta.ln() - 2f64.ln()).powi(2), ()))
    }

    #[test]
    fn finds_known_minimizer() {
        let cfg = CrossEntropyConfig {
            max_gens: 20,
            ..Default::default()
        };
        let out = cross_entropy_min(log_quadratic, &cfg, 42, &[]).unwrap();
        let (theta, _, _) = out.best.unwrap();
        assert!((theta - 2.0).abs() <= 0.02, "{theta}");
        assert!(out.generations.len() <= 20);
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = CrossEntropyConfig::default();
        let a = cross_entropy_min(log_quadratic, &cfg, 7, &[1, 2]).unwrap();
        let b = cross_entropy_min(log_quadratic, &cfg, 7, &[1, 2]).unwrap();
        assert_eq!(a.best.unwrap().0.to_bits(), b.best.unwrap().0.to_bits());
        assert_eq!(a.generations, b.generations);
    }

    #[test]
    fn elite_mean_never_increases() {
        let cfg = CrossEntropyConfig::default();
        for seed in 0..10 {
            let out = cross_entropy_min(log_quadratic, &cfg, seed, &[]).unwrap();
            for w in out.generations.windows(2) {
                assert!(w[1].elite_mean <= w[0].elite_mean);
            }
        }
    }

    #[test]
    fn incumbent_is_best_over_all_evaluations() {
        use std::sync::Mutex;
        let seen = Mutex::new(Vec::new());
        let cfg = CrossEntropyConfig::default();
        let out = cross_entropy_min(
            |t| {
                let v = (t.ln() - 0.3).powi(2) + 0.1 * (5.0 * t.ln()).sin();
                seen.lock().unwrap().push(v);
                Ok((v, t))
            },
            &cfg,
            3,
            &[],
        )
        .unwrap();
        let min = seen.into_inner().unwrap().into_iter().fold(f64::INFINITY, f64::min);
        let (theta, value, payload) = out.best.unwrap();
        assert_eq!(value, min);
        assert_eq!(theta, payload);
    }

    #[test]
    fn larger_penalty_selects_larger_theta() {
        // inner risk grows linearly and blows up past θ = 50
        let solve = |d: f64| {
            let f = move |t: f64| {
                let v = if t < 50.0 { 1.0 + t + d / t } else { f64::INFINITY };
                Ok((v, ()))
            };
            let cfg = CrossEntropyConfig {
                max_gens: 25,
                ..Default::default()
            };
            cross_entropy_min(f, &cfg, 11, &[]).unwrap().best.unwrap().0
        };
        let thetas: Vec<f64> = [0.25, 1.0, 4.0, 16.0].iter().map(|&d| solve(d)).collect();
        for w in thetas.windows(2) {
            assert!(w[1] >= w[0], "{thetas:?}");
        }
        assert!((thetas[1] - 1.0).abs() < 0.05);
    }

    #[test]
    fn reports_persistent_infeasibility() {
        let out = cross_entropy_min(|_| Ok((f64::INFINITY, ())), &CrossEntropyConfig::default(), 1, &[]).unwrap();
        assert!(out.all_infeasible);
        assert!(out.best.is_none());
        assert_eq!(out.generations.len(), 3);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = CrossEntropyConfig {
            population: 4,
            ..Default::default()
        };
        assert!(cross_entropy_min(log_quadratic, &cfg, 1, &[]).is_err());
        let cfg = CrossEntropyConfig {
            elite_frac: 0.7,
            ..Default::default()
        };
        assert!(cross_entropy_min(log_quadratic, &cfg, 1, &[]).is_err());
    }
}
