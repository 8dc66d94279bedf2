//! JSON run configuration. Every field has a default, so `{}` is a valid
//! file and partial files override only what they name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cem::CrossEntropyConfig;
use crate::cost::CostConfig;
use crate::dynamics::PlantConfig;
use crate::error::{DrocError, Result};
use crate::gp::GpFitConfig;
use crate::kl_bound::KnnConfig;
use crate::mpc::MpcConfig;
use crate::noise::{BumpVariance, GridSpec, MixtureComponent, MixtureNoise};
use crate::risk_ddp::SolverConfig;

/// Variance of the heading noise in every mixture component [rad²].
pub const THETA_VAR: f64 = 1.3e-4;
/// Variance of the speed noise in every mixture component [(m/s)²].
pub const V_VAR: f64 = 2.2e-3;

/// Training-data collection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectionConfig {
    pub grid: GridSpec,
    /// Noise realizations per grid state (`N`).
    pub samples_per_state: usize,
    /// Control applied at every grid state while collecting.
    pub control: Vec<f64>,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        CollectionConfig {
            grid: GridSpec::default(),
            samples_per_state: 1000,
            control: vec![0.0, 0.0],
        }
    }
}

/// How the reference distribution and radius are built for the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Per-dimension GPs over the state with the horizon-window bound.
    StateDependent,
    /// One MLE Gaussian over all training noise with the stationary bound.
    Stationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub runs_per_case: usize,
    pub root_seed: u64,
    /// Names of the mixtures to run, in table order.
    pub mixtures: Vec<String>,
    pub reference: ReferenceKind,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            runs_per_case: 15,
            root_seed: 2024,
            mixtures: vec!["a".into(), "b".into(), "c".into()],
            reference: ReferenceKind::StateDependent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub plant: PlantConfig,
    pub cost: CostConfig,
    pub solver: SolverConfig,
    pub gp: GpFitConfig,
    pub knn: KnnConfig,
    pub cross_entropy: CrossEntropyConfig,
    pub mpc: MpcConfig,
    pub collection: CollectionConfig,
    pub benchmark: BenchmarkConfig,
    pub mixtures: BTreeMap<String, MixtureNoise>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            plant: PlantConfig::default(),
            cost: CostConfig::default(),
            solver: SolverConfig::default(),
            gp: GpFitConfig::default(),
            knn: KnnConfig::default(),
            cross_entropy: CrossEntropyConfig::default(),
            mpc: MpcConfig::default(),
            collection: CollectionConfig::default(),
            benchmark: BenchmarkConfig::default(),
            mixtures: default_mixtures(),
        }
    }
}

fn component(x: (f64, f64), y: (f64, f64)) -> MixtureComponent {
    MixtureComponent {
        x: BumpVariance { base: x.0, amp: x.1 },
        y: BumpVariance { base: y.0, amp: y.1 },
        theta_var: THETA_VAR,
        v_var: V_VAR,
    }
}

fn mixture(weights: &[f64], xy: &[(f64, f64)]) -> MixtureNoise {
    let comps = xy.iter().map(|&p| component(p, p)).collect();
    MixtureNoise::new(weights.to_vec(), comps).expect("default mixture is valid")
}

/// The three experiment mixtures. Position variances are
/// `base + amp · exp(−((x−2.5)² + (y−2.5)²)/0.5)` per component.
pub fn default_mixtures() -> BTreeMap<String, MixtureNoise> {
    let mut m = BTreeMap::new();
    m.insert(
        "a".into(),
        mixture(&[0.5, 0.5], &[(1e-3, 4e-3), (4e-3, 1.6e-2)]),
    );
    m.insert(
        "b".into(),
        mixture(&[0.6, 0.3, 0.1], &[(5e-4, 2e-3), (2e-3, 8e-3), (1e-2, 4e-2)]),
    );
    m.insert(
        "c".into(),
        mixture(
            &[0.3, 0.3, 0.2, 0.2],
            &[(5e-4, 2e-3), (1.5e-3, 6e-3), (3e-3, 1.2e-2), (6e-3, 2.4e-2)],
        ),
    );
    m
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn mixture(&self, name: &str) -> Result<&MixtureNoise> {
        self.mixtures
            .get(name)
            .ok_or_else(|| DrocError::InvalidConfig(format!("unknown mixture {name:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(DrocError::InvalidConfig(msg.into()));
        if !(self.plant.wheelbase > 0.0 && self.plant.dt > 0.0) {
            return bad("plant wheelbase and dt must be > 0");
        }
        if self.cost.q_diag.len() != 4 || self.cost.qf_diag.len() != 4 || self.cost.r_diag.len() != 2 {
            return bad("cost diagonals must have lengths 4 (q, qf) and 2 (r)");
        }
        if self.mpc.x0.len() != 4 {
            return bad("mpc.x0 must have 4 entries");
        }
        if self.mpc.iterations == 0 || self.mpc.horizon == 0 {
            return bad("mpc.iterations and mpc.horizon must be >= 1");
        }
        if self.collection.control.len() != 2 {
            return bad("collection.control must have 2 entries");
        }
        if self.collection.grid.axes.len() != 4 || self.collection.grid.axes.iter().any(|a| a.count == 0) {
            return bad("collection.grid needs 4 axes with count >= 1");
        }
        if self.collection.samples_per_state < 2 {
            return bad("collection.samples_per_state must be >= 2");
        }
        if self.knn.k == 0 || self.knn.reference_samples < self.knn.k {
            return bad("knn needs 1 <= k <= reference_samples");
        }
        if self.benchmark.runs_per_case == 0 {
            return bad("benchmark.runs_per_case must be >= 1");
        }
        if !(self.solver.tol > 0.0 && self.solver.max_iters > 0) {
            return bad("solver tol and max_iters must be positive");
        }
        if !(0.0 < self.solver.reg_min && self.solver.reg_min <= self.solver.reg_max) {
            return bad("solver needs 0 < reg_min <= reg_max");
        }
        self.cross_entropy.validate()?;
        for name in &self.benchmark.mixtures {
            self.mixture(name)?;
        }
        for mix in self.mixtures.values() {
            mix.validate()?;
        }
        crate::cost::QuadCost::from_config(&self.cost)?;
        Ok(())
    }
}
