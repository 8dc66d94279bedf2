//! Scalar-input Gaussian-process regression of noise variances.
//!
//! One zero-mean GP with a squared-exponential kernel
//! `k(a, a') = σ² exp(−(a − a')² / 2l²)` plus an observation-noise term is
//! trained per state dimension on `(x̄_j^(i), v_j^(i))` pairs, where `v` is the
//! per-state MLE variance of the noise in that dimension.
//!
//! Grid-collected data repeats each input value many times. Replicates are
//! collapsed exactly: a group of `c` targets at the same input contributes
//! its mean with noise `σ_n²/c` to the GP, plus a within-group term that only
//! depends on `σ_n²`. Both the marginal likelihood and the posterior are
//! identical to the uncollapsed model.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{DrocError, Result};
use crate::noise::{GaussianRef, TrainingSet};
use crate::rng::{self, tag};

/// Hyperparameter search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpFitConfig {
    pub restarts: usize,
    /// Nelder–Mead evaluation budget per restart.
    pub max_evals: usize,
    /// Lower clamp on predicted variances.
    pub var_floor: f64,
    /// Initial diagonal jitter, relative to the mean squared target.
    pub jitter: f64,
}

impl Default for GpFitConfig {
    fn default() -> Self {
        GpFitConfig {
            restarts: 8,
            max_evals: 400,
            var_floor: 1e-8,
            jitter: 1e-10,
        }
    }
}

/// Serializable GP: training data and hyperparameters in target units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpParams {
    /// State dimension this GP reads its input from.
    pub dim: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub signal_variance: f64,
    pub length_scale: f64,
    pub noise_variance: f64,
    pub jitter: f64,
    pub log_marginal_likelihood: f64,
}

#[derive(Debug, Clone)]
struct Grouped {
    inputs: Vec<f64>,
    counts: Vec<f64>,
    means: Vec<f64>,
    within_ss: Vec<f64>,
}

fn group(inputs: &[f64], targets: &[f64]) -> Grouped {
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.sort_by(|&a, &b| inputs[a].total_cmp(&inputs[b]).then(a.cmp(&b)));
    let mut g = Grouped {
        inputs: Vec::new(),
        counts: Vec::new(),
        means: Vec::new(),
        within_ss: Vec::new(),
    };
    let mut start = 0;
    while start < order.len() {
        let key = inputs[order[start]];
        let mut end = start;
        while end < order.len() && inputs[order[end]].to_bits() == key.to_bits() {
            end += 1;
        }
        let ys: Vec<f64> = order[start..end].iter().map(|&i| targets[i]).collect();
        let c = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / c;
        let ss = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>();
        g.inputs.push(key);
        g.counts.push(c);
        g.means.push(mean);
        g.within_ss.push(ss);
        start = end;
    }
    g
}

fn se_kernel(a: f64, b: f64, signal_variance: f64, length_scale: f64) -> f64 {
    let d = a - b;
    signal_variance * (-d * d / (2.0 * length_scale * length_scale)).exp()
}

struct Factor {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    noise_eff: f64,
}

fn factor(g: &Grouped, sv: f64, ls: f64, noise: f64, jitter: f64) -> Option<Factor> {
    let n = g.inputs.len();
    let noise_eff = noise + jitter;
    let mut k = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            k[(a, b)] = se_kernel(g.inputs[a], g.inputs[b], sv, ls);
        }
        k[(a, a)] += noise_eff / g.counts[a];
    }
    let chol = k.cholesky()?;
    let alpha = chol.solve(&DVector::from_column_slice(&g.means));
    Some(Factor {
        chol,
        alpha,
        noise_eff,
    })
}

fn log_likelihood(g: &Grouped, f: &Factor) -> f64 {
    let ybar = DVector::from_column_slice(&g.means);
    let n = g.inputs.len() as f64;
    let log_det: f64 = f.chol.l_dirty().diagonal().iter().map(|d: &f64| d.ln()).sum();
    let mut lml = -0.5 * ybar.dot(&f.alpha) - log_det - 0.5 * n * (2.0 * PI).ln();
    for ((c, ss), _) in g.counts.iter().zip(&g.within_ss).zip(&g.inputs) {
        if *c > 1.0 {
            lml += -0.5 * (c - 1.0) * (2.0 * PI * f.noise_eff).ln() - 0.5 * c.ln()
                - ss / (2.0 * f.noise_eff);
        }
    }
    lml
}

/// Factorizes with escalating jitter; returns the jitter that worked.
fn factor_with_jitter(
    g: &Grouped,
    sv: f64,
    ls: f64,
    noise: f64,
    jitter0: f64,
    jitter_max: f64,
) -> Result<(Factor, f64)> {
    let mut jitter = jitter0;
    loop {
        if let Some(f) = factor(g, sv, ls, noise, jitter) {
            return Ok((f, jitter));
        }
        jitter *= 10.0;
        if jitter > jitter_max {
            return Err(DrocError::IllConditionedKernel { jitter: jitter / 10.0 });
        }
    }
}

/// A trained scalar-input GP ready for prediction.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub params: GpParams,
    grouped: Grouped,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Log marginal likelihoods at the optimizer's starting points and at the
/// returned hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub start_log_likelihoods: Vec<f64>,
    pub best_log_likelihood: f64,
}

struct Bounds {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Bounds {
    fn clamp(&self, p: &mut [f64; 3]) {
        for ((v, lo), hi) in p.iter_mut().zip(self.lo).zip(self.hi) {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Bounded Nelder–Mead minimization; returns the best point and value seen.
fn nelder_mead<F: FnMut(&[f64; 3]) -> f64>(
    f: &mut F,
    start: [f64; 3],
    step: [f64; 3],
    bounds: &Bounds,
    max_evals: usize,
) -> ([f64; 3], f64) {
    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    let mut evals = 0;
    let mut eval = |p: [f64; 3], evals: &mut usize| {
        *evals += 1;
        let v = f(&p);
        (p, if v.is_nan() { f64::INFINITY } else { v })
    };
    simplex.push(eval(start, &mut evals));
    for i in 0..3 {
        let mut p = start;
        p[i] += step[i];
        if p[i] > bounds.hi[i] {
            p[i] = start[i] - step[i];
        }
        bounds.clamp(&mut p);
        simplex.push(eval(p, &mut evals));
    }
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[3].1);
        if (worst - best).abs() <= 1e-10 * (1.0 + best.abs()) && best.is_finite() {
            break;
        }
        let mut centroid = [0.0; 3];
        for (p, _) in &simplex[..3] {
            for i in 0..3 {
                centroid[i] += p[i] / 3.0;
            }
        }
        let along = |t: f64| {
            let mut p = [0.0; 3];
            for i in 0..3 {
                p[i] = centroid[i] + t * (simplex[3].0[i] - centroid[i]);
            }
            bounds.clamp(&mut p);
            p
        };
        let reflected = eval(along(-1.0), &mut evals);
        if reflected.1 < simplex[0].1 {
            let expanded = eval(along(-2.0), &mut evals);
            simplex[3] = if expanded.1 < reflected.1 { expanded } else { reflected };
        } else if reflected.1 < simplex[2].1 {
            simplex[3] = reflected;
        } else {
            let contracted = if reflected.1 < simplex[3].1 {
                eval(along(-0.5), &mut evals)
            } else {
                eval(along(0.5), &mut evals)
            };
            if contracted.1 < simplex[3].1.min(reflected.1) {
                simplex[3] = contracted;
            } else {
                let best_p = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    let mut p = [0.0; 3];
                    for i in 0..3 {
                        p[i] = best_p[i] + 0.5 * (v.0[i] - best_p[i]);
                    }
                    *v = eval(p, &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

impl GpModel {
    /// Builds the posterior for fixed hyperparameters (e.g. loaded from JSON).
    pub fn from_params(mut params: GpParams) -> Result<Self> {
        if params.inputs.len() != params.targets.len() || params.inputs.is_empty() {
            return Err(DrocError::Format(
                "GP inputs and targets must be non-empty and equally long".into(),
            ));
        }
        let positive = [params.signal_variance, params.length_scale];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || !(params.noise_variance >= 0.0 && params.jitter >= 0.0)
        {
            return Err(DrocError::Format("GP hyperparameters out of range".into()));
        }
        let grouped = group(&params.inputs, &params.targets);
        let scale2 = mean_square(&params.targets);
        let (f, jitter) = factor_with_jitter(
            &grouped,
            params.signal_variance,
            params.length_scale,
            params.noise_variance,
            params.jitter.max(f64::MIN_POSITIVE),
            1e-2 * scale2,
        )?;
        params.jitter = jitter;
        params.log_marginal_likelihood = log_likelihood(&grouped, &f);
        Ok(GpModel {
            params,
            grouped,
            chol: f.chol,
            alpha: f.alpha,
        })
    }

    /// Maximizes the log marginal likelihood over `(σ², l, σ_n²)` in log space
    /// with bounded multi-start Nelder–Mead.
    pub fn fit<R: Rng + ?Sized>(
        dim: usize,
        inputs: &[f64],
        targets: &[f64],
        cfg: &GpFitConfig,
        rng: &mut R,
    ) -> Result<(Self, FitReport)> {
        if inputs.len() != targets.len() || inputs.len() < 2 {
            return Err(DrocError::TooFewSamples {
                needed: 2,
                got: inputs.len().min(targets.len()),
            });
        }
        let grouped = group(inputs, targets);
        let scale2 = mean_square(targets);
        let lo_in = inputs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi_in = inputs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi_in > lo_in { hi_in - lo_in } else { 1.0 };
        let jitter0 = cfg.jitter * scale2;
        let jitter_max = 1e-2 * scale2;

        let bounds = Bounds {
            lo: [(1e-4 * scale2).ln(), (1e-3 * span).ln(), (1e-10 * scale2).ln()],
            hi: [(1e4 * scale2).ln(), (1e3 * span).ln(), (1e1 * scale2).ln()],
        };
        let mut objective = |p: &[f64; 3]| -> f64 {
            let (sv, ls, nv) = (p[0].exp(), p[1].exp(), p[2].exp());
            match factor_with_jitter(&grouped, sv, ls, nv, jitter0, jitter_max) {
                Ok((f, _)) => -log_likelihood(&grouped, &f),
                Err(_) => f64::INFINITY,
            }
        };

        let mut starts = vec![[scale2.ln(), (0.25 * span).ln(), (0.1 * scale2).ln()]];
        for _ in 1..cfg.restarts.max(1) {
            let mut p = [0.0; 3];
            for ((v, lo), hi) in p.iter_mut().zip(bounds.lo).zip(bounds.hi) {
                let u: f64 = rng.random();
                let mid = 0.5 * (lo + hi);
                *v = mid + (u - 0.5) * 0.5 * (hi - lo);
            }
            starts.push(p);
        }

        let mut start_lml = Vec::with_capacity(starts.len());
        let mut best: Option<([f64; 3], f64)> = None;
        for s in &starts {
            start_lml.push(-objective(s));
            let found = nelder_mead(&mut objective, *s, [1.0, 0.7, 1.5], &bounds, cfg.max_evals);
            if best.is_none_or(|b| found.1 < b.1) {
                best = Some(found);
            }
        }
        let (p, value) = best.expect("at least one start");
        if !value.is_finite() {
            return Err(DrocError::IllConditionedKernel { jitter: jitter_max });
        }
        let model = GpModel::from_params(GpParams {
            dim,
            inputs: inputs.to_vec(),
            targets: targets.to_vec(),
            signal_variance: p[0].exp(),
            length_scale: p[1].exp(),
            noise_variance: p[2].exp(),
            jitter: jitter0,
            log_marginal_likelihood: -value,
        })?;
        let report = FitReport {
            start_log_likelihoods: start_lml,
            best_log_likelihood: model.params.log_marginal_likelihood,
        };
        Ok((model, report))
    }

    fn cross_cov(&self, a: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.grouped.inputs.len(),
            self.grouped
                .inputs
                .iter()
                .map(|&b| se_kernel(a, b, self.params.signal_variance, self.params.length_scale)),
        )
    }

    /// Posterior mean of the latent function.
    pub fn predict_mean(&self, a: f64) -> f64 {
        self.cross_cov(a).dot(&self.alpha)
    }

    /// Posterior mean and latent variance (clamped at zero).
    pub fn predict(&self, a: f64) -> (f64, f64) {
        let ks = self.cross_cov(a);
        let mean = ks.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("cholesky factor is invertible");
        let var = (self.params.signal_variance - v.norm_squared()).max(0.0);
        (mean, var)
    }

    /// Variance of a new noisy observation at `a`.
    pub fn predict_observation_var(&self, a: f64) -> f64 {
        self.predict(a).1 + self.params.noise_variance + self.params.jitter
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.params.log_marginal_likelihood
    }
}

/// Full (uncollapsed) log marginal likelihood; reference for tests.
pub fn dense_log_likelihood(
    inputs: &[f64],
    targets: &[f64],
    signal_variance: f64,
    length_scale: f64,
    noise_variance: f64,
) -> Option<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            k[(a, b)] = se_kernel(inputs[a], inputs[b], signal_variance, length_scale);
        }
        k[(a, a)] += noise_variance;
    }
    let chol = k.cholesky()?;
    let y = DVector::from_column_slice(targets);
    let alpha = chol.solve(&y);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d: &f64| d.ln()).sum();
    Some(-0.5 * y.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * PI).ln())
}

fn mean_square(v: &[f64]) -> f64 {
    let ms = v.iter().map(|y| y * y).sum::<f64>() / v.len().max(1) as f64;
    if ms > 0.0 {
        ms
    } else {
        1.0
    }
}

/// One GP per state dimension; predicts a state-dependent diagonal reference.
#[derive(Debug, Clone)]
pub struct GpSet {
    pub models: Vec<GpModel>,
    pub var_floor: f64,
}

/// Serialized form of a [`GpSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpSetFile {
    pub schema_version: u32,
    pub var_floor: f64,
    pub models: Vec<GpParams>,
}

impl GpSet {
    pub fn to_file(&self) -> GpSetFile {
        GpSetFile {
            schema_version: 1,
            var_floor: self.var_floor,
            models: self.models.iter().map(|m| m.params.clone()).collect(),
        }
    }

    pub fn from_file(file: GpSetFile) -> Result<Self> {
        let models = file
            .models
            .into_iter()
            .map(GpModel::from_params)
            .collect::<Result<Vec<_>>>()?;
        Ok(GpSet {
            models,
            var_floor: file.var_floor,
        })
    }

    /// `W(x) = diag(max(v̂_i(x^(i)), ε))`.
    pub fn predict_ref(&self, state: &[f64]) -> GaussianRef {
        let var = self
            .models
            .iter()
            .map(|m| m.predict_mean(state[m.params.dim]).max(self.var_floor))
            .collect();
        GaussianRef {
            mean: vec![0.0; self.models.len()],
            var,
        }
    }
}

/// Trains one GP per state dimension on the per-state MLE variances.
/// Dimension `i` uses an independent stream derived from `seed`.
pub fn fit_state_dependent(
    ts: &TrainingSet,
    cfg: &GpFitConfig,
    seed: u64,
) -> Result<(GpSet, Vec<FitReport>)> {
    if ts.num_states() < 2 {
        return Err(DrocError::TooFewSamples {
            needed: 2,
            got: ts.num_states(),
        });
    }
    let variances = ts.mle_variances()?;
    let dims = ts.noise_dim.min(ts.state_dim());
    let fitted = (0..dims)
        .into_par_iter()
        .map(|i| {
            let inputs: Vec<f64> = ts.states.iter().map(|x| x[i]).collect();
            let targets: Vec<f64> = variances.iter().map(|v| v[i]).collect();
            let mut r = rng::stream(seed, &[tag::FIT, i as u64]);
            GpModel::fit(i, &inputs, &targets, cfg, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    let (models, reports) = fitted.into_iter().unzip();
    Ok((
        GpSet {
            models,
            var_floor: cfg.var_floor,
        },
        reports,
    ))
}
