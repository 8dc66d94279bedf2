//! k-nearest-neighbour KL divergence estimation and ambiguity-set radii.
//!
//! For `N` samples from `p` and `M` from `q` in `r` dimensions,
//!
//! ```text
//! D̂(p‖q) = (r/N) Σ_i ln(ν_i / ρ_i) + ln(M / (N − 1))
//! ```
//!
//! where `ρ_i` is the distance from `p_i` to its k-th nearest neighbour among
//! the other `p` samples and `ν_i` the distance to its k-th nearest neighbour
//! among the `q` samples. Search is exact brute force.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DrocError, Result};
use crate::noise::{mle_gaussian, GaussianRef, TrainingSet};
use crate::rng::{self, tag};

/// Distances below this are treated as coincident points.
pub const DISTANCE_FLOOR: f64 = 1e-12;

/// Above this dimension squared distances are formed through a Gram product.
const GRAM_MIN_DIM: usize = 5;
const BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnConfig {
    /// Neighbour order.
    pub k: usize,
    /// Number of samples drawn from the reference distribution.
    pub reference_samples: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k: 10,
            reference_samples: 100,
        }
    }
}

/// A set of points stored as the columns of a `dim × len` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: DMatrix<f64>,
}

impl PointSet {
    pub fn from_columns(points: DMatrix<f64>) -> Self {
        PointSet { points }
    }

    pub fn from_rows<'a, I: IntoIterator<Item = &'a [f64]>>(dim: usize, rows: I) -> Result<Self> {
        let mut data = Vec::new();
        for row in rows {
            check_dim("point dimension", dim, row.len())?;
            data.extend_from_slice(row);
        }
        let n = data.len() / dim.max(1);
        Ok(PointSet {
            points: DMatrix::from_vec(dim, n, data),
        })
    }

    /// Draws `count` points from a diagonal Gaussian.
    pub fn sample_gaussian<R: Rng + ?Sized>(q: &GaussianRef, count: usize, rng: &mut R) -> Self {
        let mut points = DMatrix::zeros(q.dim(), count);
        for j in 0..count {
            points.set_column(j, &q.sample(rng));
        }
        PointSet { points }
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.points.as_slice()[i * d..(i + 1) * d]
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.points
    }
}

/// Estimated divergence plus the number of coincident-point distances that
/// had to be floored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnEstimate {
    pub value: f64,
    pub degenerate: usize,
}

/// k-th nearest-neighbour distance from every query point into `reference`.
/// With `exclude_self`, query and reference are the same set and each point
/// skips itself.
fn kth_distances(query: &PointSet, reference: &PointSet, k: usize, exclude_self: bool) -> Vec<f64> {
    let dim = query.dim();
    let nq = query.len();
    let nr = reference.len();
    let ref_norms: Vec<f64> = (0..nr)
        .map(|j| reference.point(j).iter().map(|v| v * v).sum())
        .collect();

    let blocks: Vec<usize> = (0..nq).step_by(BLOCK).collect();
    blocks
        .into_par_iter()
        .flat_map_iter(|start| {
            let end = (start + BLOCK).min(nq);
            let gram = (dim >= GRAM_MIN_DIM).then(|| {
                query
                    .points
                    .columns(start, end - start)
                    .tr_mul(&reference.points)
            });
            let mut buf = Vec::with_capacity(nr);
            let mut out = Vec::with_capacity(end - start);
            for i in start..end {
                buf.clear();
                let qi = query.point(i);
                match &gram {
                    Some(g) => {
                        let qn: f64 = qi.iter().map(|v| v * v).sum();
                        for j in 0..nr {
                            buf.push((qn + ref_norms[j] - 2.0 * g[(i - start, j)]).max(0.0));
                        }
                    }
                    None => {
                        for j in 0..nr {
                            let rj = reference.point(j);
                            buf.push(qi.iter().zip(rj).map(|(a, b)| (a - b) * (a - b)).sum());
                        }
                    }
                }
                if exclude_self {
                    buf[i] = f64::INFINITY;
                }
                let (_, kth, _) = buf.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
                out.push(kth.sqrt());
            }
            out
        })
        .collect()
}

/// The kNN divergence estimate `D̂(p‖q)`. May be negative.
pub fn knn_kl(p: &PointSet, q: &PointSet, k: usize) -> Result<KnnEstimate> {
    check_dim("kNN sample dimension", p.dim(), q.dim())?;
    if k == 0 {
        return Err(DrocError::InvalidConfig("kNN order k must be >= 1".into()));
    }
    if p.len() <= k {
        return Err(DrocError::TooFewSamples {
            needed: k + 1,
            got: p.len(),
        });
    }
    if q.len() < k {
        return Err(DrocError::TooFewSamples {
            needed: k,
            got: q.len(),
        });
    }
    let n = p.len() as f64;
    let m = q.len() as f64;
    let r = p.dim() as f64;
    let rho = kth_distances(p, p, k, true);
    let nu = kth_distances(p, q, k, false);
    let mut degenerate = 0;
    let mut floor = |d: f64| {
        if d <= DISTANCE_FLOOR {
            degenerate += 1;
            DISTANCE_FLOOR
        } else {
            d
        }
    };
    let mut log_ratio = 0.0;
    for (nu_i, rho_i) in nu.into_iter().zip(rho) {
        let (nu_i, rho_i) = (floor(nu_i), floor(rho_i));
        log_ratio += (nu_i / rho_i).ln();
    }
    let value = r / n * log_ratio + (m / (n - 1.0)).ln();
    if !value.is_finite() {
        return Err(DrocError::NumericalFault("kNN divergence"));
    }
    Ok(KnnEstimate { value, degenerate })
}

/// A radius for a stationary reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryBound {
    /// Radius, floored at zero.
    pub d: f64,
    pub raw: KnnEstimate,
}

/// Draws `M` samples from `q` and estimates `D̂(p‖q)` against the observed
/// noise; negative estimates are reported as zero.
pub fn stationary_bound<R: Rng + ?Sized>(
    true_samples: &PointSet,
    q: &GaussianRef,
    cfg: &KnnConfig,
    rng: &mut R,
) -> Result<StationaryBound> {
    check_dim("reference dimension", true_samples.dim(), q.dim())?;
    let drawn = PointSet::sample_gaussian(q, cfg.reference_samples, rng);
    let raw = knn_kl(true_samples, &drawn, cfg.k)?;
    Ok(StationaryBound {
        d: raw.value.max(0.0),
        raw,
    })
}

/// Global maximum radius over receding-horizon windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonBound {
    pub d_max: f64,
    /// Floored per-window radii `d_j`.
    pub per_window: Vec<f64>,
    pub degenerate: usize,
}

/// Joint noise vectors `[w_j, …, w_{j+n}]` for every realization index.
pub fn joint_window(ts: &TrainingSet, start: usize, n: usize) -> PointSet {
    let c = ts.noise_dim;
    let dim = c * (n + 1);
    let count = ts.samples_per_state;
    let mut points = DMatrix::zeros(dim, count);
    for r in 0..count {
        let mut col = points.column_mut(r);
        for s in 0..=n {
            let w = ts.sample(start + s, r);
            for (i, v) in w.iter().enumerate() {
                col[s * c + i] = *v;
            }
        }
    }
    PointSet { points }
}

/// For each window `j = 0..m−n`, fits a zero-mean diagonal Gaussian to the
/// joint vectors over states `j..=j+n`, draws `M` joint samples from it and
/// estimates the window's divergence; returns the maximum.
///
/// Window `j` draws from its own stream derived from `(seed, j)`.
pub fn horizon_bound(ts: &TrainingSet, n: usize, cfg: &KnnConfig, seed: u64) -> Result<HorizonBound> {
    let m = ts.num_states();
    if n >= m {
        return Err(DrocError::WindowTooLarge { n, m });
    }
    let windows = m - n;
    let results = (0..windows)
        .into_par_iter()
        .map(|j| {
            let truth = joint_window(ts, j, n);
            let q = mle_gaussian((0..truth.len()).map(|r| truth.point(r)))?;
            let mut r = rng::stream(seed, &[tag::WINDOW, j as u64]);
            let drawn = PointSet::sample_gaussian(&q, cfg.reference_samples, &mut r);
            knn_kl(&truth, &drawn, cfg.k)
        })
        .collect::<Result<Vec<_>>>()?;
    let per_window: Vec<f64> = results.iter().map(|e| e.value.max(0.0)).collect();
    let d_max = per_window.iter().copied().fold(0.0, f64::max);
    Ok(HorizonBound {
        d_max,
        per_window,
        degenerate: results.iter().map(|e| e.degenerate).sum(),
    })
}
