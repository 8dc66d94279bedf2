//! Noise models: the Gaussian reference, true Gaussian-mixture noise and the
//! collection of training data on a state grid.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::Plant;
use crate::error::{check_dim, DrocError, Result};
use crate::rng::StreamHash;

/// Zero-mean Gaussian with diagonal covariance `diag(var)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianRef {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianRef {
    pub fn zero_mean(var: Vec<f64>) -> Result<Self> {
        if var.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(DrocError::InvalidConfig(
                "reference variances must be finite and >= 0".into(),
            ));
        }
        Ok(GaussianRef {
            mean: vec![0.0; var.len()],
            var,
        })
    }

    pub fn dim(&self) -> usize {
        self.var.len()
    }

    pub fn var_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.var)
    }

    pub fn cov(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.var_vector())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.var.iter().zip(&self.mean).map(|(v, m)| {
                let z: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * z
            }),
        )
    }
}

/// Maximum-likelihood zero-mean Gaussian: per-dimension second moments
/// about zero with `1/N` normalization.
pub fn mle_gaussian<'a, I>(samples: I) -> Result<GaussianRef>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut sums: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for s in samples {
        if count == 0 {
            sums = vec![0.0; s.len()];
        } else {
            check_dim("noise sample", sums.len(), s.len())?;
        }
        for (acc, w) in sums.iter_mut().zip(s) {
            *acc += w * w;
        }
        count += 1;
    }
    if count < 2 {
        return Err(DrocError::TooFewSamples {
            needed: 2,
            got: count,
        });
    }
    GaussianRef::zero_mean(sums.into_iter().map(|s| s / count as f64).collect())
}

/// Variance `base + amp · exp(−|p − center|² / width)` over the `(x, y)`
/// position of the state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpVariance {
    pub base: f64,
    pub amp: f64,
}

/// One zero-mean mixture component with state-dependent diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub x: BumpVariance,
    pub y: BumpVariance,
    pub theta_var: f64,
    pub v_var: f64,
}

/// Gaussian mixture `Σ π_i N(0, W_i(x))` over the 4-dimensional car state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureNoise {
    pub weights: Vec<f64>,
    pub components: Vec<MixtureComponent>,
    #[serde(default = "default_bump_center")]
    pub bump_center: [f64; 2],
    #[serde(default = "default_bump_width")]
    pub bump_width: f64,
}

fn default_bump_center() -> [f64; 2] {
    [2.5, 2.5]
}

fn default_bump_width() -> f64 {
    0.5
}

impl MixtureNoise {
    pub fn new(weights: Vec<f64>, components: Vec<MixtureComponent>) -> Result<Self> {
        let mix = MixtureNoise {
            weights,
            components,
            bump_center: default_bump_center(),
            bump_width: default_bump_width(),
        };
        mix.validate()?;
        Ok(mix)
    }

    /// A mixture that never perturbs the state.
    pub fn noiseless() -> Self {
        let zero = BumpVariance {
            base: 0.0,
            amp: 0.0,
        };
        MixtureNoise {
            weights: vec![1.0],
            components: vec![MixtureComponent {
                x: zero,
                y: zero,
                theta_var: 0.0,
                v_var: 0.0,
            }],
            bump_center: default_bump_center(),
            bump_width: default_bump_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.components.len() {
            return Err(DrocError::InvalidConfig(
                "mixture needs one weight per component".into(),
            ));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(DrocError::InvalidConfig("mixture weights must be >= 0".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DrocError::InvalidConfig(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        if !(self.bump_width > 0.0) {
            return Err(DrocError::InvalidConfig("bump width must be > 0".into()));
        }
        for c in &self.components {
            let vals = [c.x.base, c.x.amp, c.y.base, c.y.amp, c.theta_var, c.v_var];
            if vals.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(DrocError::InvalidConfig(
                    "component variances must be finite and >= 0".into(),
                ));
            }
        }
        Ok(())
    }

    fn bump(&self, state: &[f64]) -> f64 {
        let dx = state[0] - self.bump_center[0];
        let dy = state[1] - self.bump_center[1];
        (-(dx * dx + dy * dy) / self.bump_width).exp()
    }

    /// Diagonal of `W_i(x)` for component `i`.
    pub fn component_var(&self, i: usize, state: &[f64]) -> [f64; 4] {
        let c = &self.components[i];
        let b = self.bump(state);
        [
            c.x.base + c.x.amp * b,
            c.y.base + c.y.amp * b,
            c.theta_var,
            c.v_var,
        ]
    }

    /// Diagonal of the mixture covariance `Σ π_i W_i(x)`.
    pub fn mixture_var(&self, state: &[f64]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (i, w) in self.weights.iter().enumerate() {
            for (o, c) in out.iter_mut().zip(self.component_var(i, state)) {
                *o += w * c;
            }
        }
        out
    }
}

/// Draws one noise vector at `state`.
///
/// Always consumes one uniform and four standard normals, independent of the
/// state, so two controllers fed the same stream see common random numbers.
pub fn sample_true_noise<R: Rng + ?Sized>(
    mix: &MixtureNoise,
    state: &[f64],
    rng: &mut R,
    hash: Option<&mut StreamHash>,
) -> DVector<f64> {
    let pick: f64 = rng.random();
    let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    if let Some(h) = hash {
        h.absorb(pick);
        z.iter().for_each(|&v| h.absorb(v));
    }
    let mut acc = 0.0;
    let mut idx = mix.weights.len() - 1;
    for (i, w) in mix.weights.iter().enumerate() {
        acc += w;
        if pick < acc {
            idx = i;
            break;
        }
    }
    let var = mix.component_var(idx, state);
    DVector::from_iterator(4, var.iter().zip(z).map(|(v, z)| v.sqrt() * z))
}

/// One axis of a uniform state grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn points(&self) -> Vec<f64> {
        match self.count {
            0 => Vec::new(),
            1 => vec![0.5 * (self.min + self.max)],
            c => (0..c)
                .map(|i| self.min + (self.max - self.min) * i as f64 / (c - 1) as f64)
                .collect(),
        }
    }
}

/// Uniform grid over the state space, enumerated with the last axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            axes: vec![
                GridAxis {
                    min: 0.0,
                    max: 5.0,
                    count: 10,
                },
                GridAxis {
                    min: 0.0,
                    max: 5.0,
                    count: 10,
                },
                GridAxis {
                    min: -std::f64::consts::PI,
                    max: 0.0,
                    count: 5,
                },
                GridAxis {
                    min: 0.0,
                    max: 2.0,
                    count: 2,
                },
            ],
        }
    }
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn states(&self) -> Vec<DVector<f64>> {
        let pts: Vec<Vec<f64>> = self.axes.iter().map(GridAxis::points).collect();
        let total = self.len();
        let mut out = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut s = vec![0.0; pts.len()];
            for (d, p) in pts.iter().enumerate().rev() {
                s[d] = p[rem % p.len()];
                rem /= p.len();
            }
            out.push(DVector::from_vec(s));
        }
        out
    }
}

/// Training states with `N` noise realizations per state, stored flat as
/// `noise[(j * N + r) * dim + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub states: Vec<DVector<f64>>,
    pub samples_per_state: usize,
    pub noise_dim: usize,
    pub noise: Vec<f64>,
    pub grid: Option<GridSpec>,
    pub seed: Option<u64>,
}

impl TrainingSet {
    pub fn new(
        states: Vec<DVector<f64>>,
        samples_per_state: usize,
        noise_dim: usize,
        noise: Vec<f64>,
    ) -> Result<Self> {
        check_dim(
            "training noise buffer",
            states.len() * samples_per_state * noise_dim,
            noise.len(),
        )?;
        if states.is_empty() {
            return Err(DrocError::TooFewSamples { needed: 1, got: 0 });
        }
        if samples_per_state < 2 {
            return Err(DrocError::TooFewSamples {
                needed: 2,
                got: samples_per_state,
            });
        }
        Ok(TrainingSet {
            states,
            samples_per_state,
            noise_dim,
            noise,
            grid: None,
            seed: None,
        })
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    /// Noise realization `r` observed at state `j`.
    pub fn sample(&self, j: usize, r: usize) -> &[f64] {
        let start = (j * self.samples_per_state + r) * self.noise_dim;
        &self.noise[start..start + self.noise_dim]
    }

    pub fn samples_at(&self, j: usize) -> impl Iterator<Item = &[f64]> {
        (0..self.samples_per_state).map(move |r| self.sample(j, r))
    }

    /// Per-state MLE variances `v_j^(i)`, one row per state.
    pub fn mle_variances(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.num_states())
            .map(|j| mle_gaussian(self.samples_at(j)).map(|g| g.var))
            .collect()
    }
}

/// Observes the true noise at every grid state by applying `control` and
/// subtracting the deterministic part of the step, `N` times per state.
pub fn collect_training_data<P: Plant + ?Sized, R: Rng + ?Sized>(
    model: &P,
    mix: &MixtureNoise,
    grid: &GridSpec,
    samples_per_state: usize,
    control: &DVector<f64>,
    rng: &mut R,
) -> Result<TrainingSet> {
    mix.validate()?;
    check_dim("grid dimension", model.state_dim(), grid.axes.len())?;
    check_dim("collection control", model.control_dim(), control.len())?;
    let states = grid.states();
    let nx = model.state_dim();
    let zero = DVector::zeros(nx);
    let mut noise = Vec::with_capacity(states.len() * samples_per_state * nx);
    for x in &states {
        let clean = model.step(x, control, &zero)?;
        for _ in 0..samples_per_state {
            let w = sample_true_noise(mix, x.as_slice(), rng, None);
            let observed = model.step(x, control, &w)?;
            noise.extend((observed - &clean).iter());
        }
    }
    let mut ts = TrainingSet::new(states, samples_per_state, nx, noise)?;
    ts.grid = Some(grid.clone());
    Ok(ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Bicycle;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_component() -> MixtureNoise {
        MixtureNoise::new(
            vec![0.5, 0.5],
            vec![
                MixtureComponent {
                    x: BumpVariance { base: 0.01, amp: 0.02 },
                    y: BumpVariance { base: 0.02, amp: 0.0 },
                    theta_var: 1e-3,
                    v_var: 2e-3,
                },
                MixtureComponent {
                    x: BumpVariance { base: 0.05, amp: 0.01 },
                    y: BumpVariance { base: 0.04, amp: 0.0 },
                    theta_var: 3e-3,
                    v_var: 2e-3,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn mle_examples() {
        let zeros = [[0.0; 2]; 4];
        let g = mle_gaussian(zeros.iter().map(|s| &s[..])).unwrap();
        assert_eq!(g.var, vec![0.0, 0.0]);
        assert_eq!(g.mean, vec![0.0, 0.0]);

        let pm = [[1.0], [-1.0]];
        let g = mle_gaussian(pm.iter().map(|s| &s[..])).unwrap();
        assert_eq!(g.var, vec![1.0]);

        let one = [[1.0]];
        assert!(matches!(
            mle_gaussian(one.iter().map(|s| &s[..])),
            Err(DrocError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn mle_concentrates() {
        let mut rng = stream(11, &[]);
        let q = GaussianRef::zero_mean(vec![0.04]).unwrap();
        let draws: Vec<DVector<f64>> = (0..100_000).map(|_| q.sample(&mut rng)).collect();
        let g = mle_gaussian(draws.iter().map(|d| d.as_slice())).unwrap();
        assert!((g.var[0] - 0.04).abs() <= 0.03 * 0.04);
    }

    #[test]
    fn noiseless_mixture_draws_zero() {
        let mut rng = stream(1, &[]);
        let w = sample_true_noise(&MixtureNoise::noiseless(), &[1.0, 2.0, 0.0, 0.0], &mut rng, None);
        assert_eq!(w, DVector::zeros(4));
    }

    #[test]
    fn mixture_moments() {
        let mix = two_component();
        let state = [2.2, 2.9, 0.0, 1.0];
        let want = mix.mixture_var(&state);
        let mut rng = stream(5, &[]);
        let mut acc = [0.0; 4];
        let n = 100_000;
        for _ in 0..n {
            let w = sample_true_noise(&mix, &state, &mut rng, None);
            for i in 0..4 {
                acc[i] += w[i] * w[i];
            }
        }
        for i in 0..4 {
            let got = acc[i] / n as f64;
            assert!((got - want[i]).abs() <= 0.03 * want[i], "dim {i}: {got} vs {}", want[i]);
        }
    }

    #[test]
    fn seeded_draws_repeat() {
        let mix = two_component();
        let draw = |seed| {
            let mut rng = stream(seed, &[]);
            let mut h = StreamHash::default();
            let w: Vec<_> = (0..10)
                .map(|_| sample_true_noise(&mix, &[0.0; 4], &mut rng, Some(&mut h)))
                .collect();
            (w, h)
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3).1, draw(4).1);
    }

    #[test]
    fn mixture_validation() {
        let mut mix = two_component();
        mix.weights = vec![0.5, 0.6];
        assert!(mix.validate().is_err());
        mix.weights = vec![1.0];
        assert!(mix.validate().is_err());
    }

    #[test]
    fn grid_enumeration() {
        let grid = GridSpec::default();
        assert_eq!(grid.len(), 1000);
        let states = grid.states();
        assert_eq!(states.len(), 1000);
        assert_eq!(states[0].as_slice(), &[0.0, 0.0, -std::f64::consts::PI, 0.0]);
        assert_eq!(states[1][3], 2.0);
        assert_eq!(states[999].as_slice(), &[5.0, 5.0, 0.0, 2.0]);
    }

    #[test]
    fn collection_shapes_and_determinism() {
        let car = Bicycle::default();
        let grid = GridSpec {
            axes: vec![
                GridAxis { min: 1.0, max: 1.0, count: 1 },
                GridAxis { min: 2.0, max: 2.0, count: 1 },
                GridAxis { min: 0.0, max: 0.0, count: 1 },
                GridAxis { min: 0.5, max: 0.5, count: 1 },
            ],
        };
        let control = DVector::zeros(2);
        let ts = collect_training_data(&car, &two_component(), &grid, 3, &control, &mut stream(9, &[])).unwrap();
        assert_eq!(ts.num_states(), 1);
        assert_eq!(ts.samples_per_state, 3);
        assert_eq!(ts.noise.len(), 12);
        let again = collect_training_data(&car, &two_component(), &grid, 3, &control, &mut stream(9, &[])).unwrap();
        assert_eq!(ts, again);
    }

    #[test]
    fn collection_recovers_injected_noise() {
        let car = Bicycle::default();
        let mix = two_component();
        let grid = GridSpec {
            axes: vec![
                GridAxis { min: 0.0, max: 5.0, count: 3 },
                GridAxis { min: 0.0, max: 5.0, count: 3 },
                GridAxis { min: -1.0, max: 1.0, count: 2 },
                GridAxis { min: 0.0, max: 1.0, count: 2 },
            ],
        };
        let ts = collect_training_data(&car, &mix, &grid, 4, &DVector::zeros(2), &mut stream(2, &[])).unwrap();
        let mut rng = stream(2, &[]);
        for j in 0..ts.num_states() {
            for r in 0..4 {
                let w = sample_true_noise(&mix, ts.states[j].as_slice(), &mut rng, None);
                for i in 0..4 {
                    assert_abs_diff_eq!(ts.sample(j, r)[i], w[i], epsilon = 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn mle_is_permutation_invariant(
            data in proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, 3), 2..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = data.clone();
            shuffled.shuffle(&mut stream(seed, &[]));
            let a = mle_gaussian(data.iter().map(|s| &s[..])).unwrap();
            let b = mle_gaussian(shuffled.iter().map(|s| &s[..])).unwrap();
            for (x, y) in a.var.iter().zip(&b.var) {
                prop_assert!((x - y).abs() <= 1e-15 * (1.0 + x.abs()));
            }
        }
    }
}
