//! End-to-end benchmark: per mixture, collect training data, fit the
//! reference, estimate the radius, then run paired robust and risk-neutral
//! closed loops from the same start under common random numbers.

use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ReferenceKind, RunConfig};
use crate::cost::QuadCost;
use crate::dynamics::Bicycle;
use crate::error::{DrocError, Result};
use crate::gp::{fit_state_dependent, GpSet};
use crate::io::{self, BoundFile, Csv};
use crate::kl_bound::{horizon_bound, stationary_bound, PointSet};
use crate::mpc::{run_mpc, Mode, MpcRecord, MpcSetup, RefModel};
use crate::noise::{collect_training_data, mle_gaussian, MixtureNoise, TrainingSet};
use crate::rng::{self, tag};

/// Upper limit on observed noise vectors used by the stationary bound.
const STATIONARY_SAMPLE_CAP: usize = 5000;

/// Collects the training set for mixture number `case` of a benchmark.
pub fn collect_case(cfg: &RunConfig, mix: &MixtureNoise, seed: u64, case: u64) -> Result<TrainingSet> {
    let plant = Bicycle::from_config(&cfg.plant)?;
    let control = DVector::from_column_slice(&cfg.collection.control);
    let mut r = rng::stream(seed, &[tag::COLLECT, case]);
    let mut ts = collect_training_data(
        &plant,
        mix,
        &cfg.collection.grid,
        cfg.collection.samples_per_state,
        &control,
        &mut r,
    )?;
    ts.seed = Some(rng::derive_seed(seed, &[tag::COLLECT, case]));
    Ok(ts)
}

/// Reference model and ambiguity radius learned from one training set.
#[derive(Debug, Clone)]
pub struct LearnedReference {
    pub reference: RefModel,
    pub radius: f64,
    pub bound: BoundFile,
    pub gps: Option<GpSet>,
}

/// Fits the reference distribution and estimates the radius `d`.
pub fn learn_reference(cfg: &RunConfig, ts: &TrainingSet, seed: u64, case: u64) -> Result<LearnedReference> {
    let bound_seed = rng::derive_seed(seed, &[tag::BOUND, case]);
    match cfg.benchmark.reference {
        ReferenceKind::StateDependent => {
            let (gps, _) = fit_state_dependent(ts, &cfg.gp, rng::derive_seed(seed, &[tag::FIT, case]))?;
            let hb = horizon_bound(ts, cfg.mpc.horizon, &cfg.knn, bound_seed)?;
            let bound = BoundFile::new(&hb, cfg.knn.k, cfg.knn.reference_samples, cfg.mpc.horizon, bound_seed);
            Ok(LearnedReference {
                reference: RefModel::StateDependent(gps.clone()),
                radius: hb.d_max,
                bound,
                gps: Some(gps),
            })
        }
        ReferenceKind::Stationary => {
            let total = ts.num_states() * ts.samples_per_state;
            let q = mle_gaussian((0..total).map(|k| ts.sample(k / ts.samples_per_state, k % ts.samples_per_state)))?;
            let stride = total.div_ceil(STATIONARY_SAMPLE_CAP).max(1);
            let observed = PointSet::from_rows(
                ts.noise_dim,
                (0..total)
                    .step_by(stride)
                    .map(|k| ts.sample(k / ts.samples_per_state, k % ts.samples_per_state)),
            )?;
            let mut r = rng::stream(bound_seed, &[]);
            let sb = stationary_bound(&observed, &q, &cfg.knn, &mut r)?;
            let bound = BoundFile {
                schema_version: 1,
                d_max: sb.d,
                per_window: vec![sb.d],
                k: cfg.knn.k,
                reference_samples: cfg.knn.reference_samples,
                n: 0,
                seed: bound_seed,
                degenerate: sb.raw.degenerate,
            };
            Ok(LearnedReference {
                reference: RefModel::Stationary(q),
                radius: sb.d,
                bound,
                gps: None,
            })
        }
    }
}

/// Runs one closed loop. Run `run` of case `case` draws its true noise from
/// a stream that depends only on `(seed, case, run)`, so both modes see the
/// same noise.
pub fn run_case(
    cfg: &RunConfig,
    mix: &MixtureNoise,
    learned: &LearnedReference,
    seed: u64,
    case: u64,
    run: u64,
    mode: Mode,
) -> Result<MpcRecord> {
    let plant = Bicycle::from_config(&cfg.plant)?;
    let cost = QuadCost::from_config(&cfg.cost)?;
    let path = [case, run];
    let setup = MpcSetup {
        true_noise: mix,
        reference: &learned.reference,
        radius: learned.radius,
        mpc: &cfg.mpc,
        cross_entropy: &cfg.cross_entropy,
        solver: &cfg.solver,
        seed,
        path: &path,
    };
    run_mpc(&plant, &cost, &setup, mode)
}

/// Final-distance statistics for one (mixture, mode) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    /// Mean over completed runs [m].
    pub mean: f64,
    /// Sample standard deviation (n − 1 normalization) over completed runs [m].
    pub std: f64,
    /// Final distance of every run, including faulted ones.
    pub distances: Vec<f64>,
    /// Indices of runs that aborted on a fault.
    pub incomplete_runs: Vec<usize>,
    /// Total iterations where no feasible `θ` was found.
    pub fallbacks: usize,
}

impl CellStats {
    pub fn from_records(records: &[MpcRecord]) -> Self {
        let distances: Vec<f64> = records.iter().map(|r| r.final_distance).collect();
        let incomplete_runs: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.complete)
            .map(|(i, _)| i)
            .collect();
        let done: Vec<f64> = records
            .iter()
            .filter(|r| r.complete)
            .map(|r| r.final_distance)
            .collect();
        let (mean, std) = mean_std(&done);
        CellStats {
            mean,
            std,
            distances,
            incomplete_runs,
            fallbacks: records.iter().map(|r| r.fallbacks).sum(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.incomplete_runs.is_empty()
    }
}

/// Mean and `n − 1` standard deviation; NaN mean for no data, zero spread
/// for a single value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub mixture: String,
    /// Ambiguity radius used by the robust controller.
    pub radius: f64,
    pub droc: CellStats,
    pub ilqg: CellStats,
    /// `droc.mean / ilqg.mean`.
    pub ratio: f64,
    /// Per-run noise stream hashes; equal across modes by construction.
    pub noise_hashes: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub schema_version: u32,
    pub runs_per_case: usize,
    pub root_seed: u64,
    pub cases: Vec<CaseResult>,
}

impl ResultTable {
    pub fn case(&self, mixture: &str) -> Option<&CaseResult> {
        self.cases.iter().find(|c| c.mixture == mixture)
    }

    pub fn is_complete(&self) -> bool {
        self.cases
            .iter()
            .all(|c| c.droc.is_complete() && c.ilqg.is_complete())
    }
}

/// Machine-readable run summary written next to the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config: RunConfig,
    pub cases: Vec<CaseSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub mixture: String,
    pub training_seed: Option<u64>,
    pub bound: BoundFile,
    pub droc_mean: f64,
    pub ilqg_mean: f64,
    pub droc_std: f64,
    pub ilqg_std: f64,
    pub ratio: f64,
    pub mean_theta_star: f64,
    pub complete: bool,
}

pub fn trajectory_file_name(mode: Mode, run: usize) -> String {
    format!("{}_run{:02}.csv", mode.as_str(), run)
}

/// Runs the full benchmark under `cfg`. With `out_dir`, writes per mixture
/// `gp.json` (state-dependent reference), `bound.json` and one trajectory CSV
/// per run, plus `table.json` and `summary.json` at the top level.
pub fn run_benchmark(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<ResultTable> {
    cfg.validate()?;
    let seed = cfg.benchmark.root_seed;
    let runs = cfg.benchmark.runs_per_case;
    let mut cases = Vec::new();
    let mut summaries = Vec::new();

    for (ci, name) in cfg.benchmark.mixtures.iter().enumerate() {
        let case = ci as u64;
        let mix = cfg.mixture(name)?;
        log::info!("mixture {name}: collecting training data");
        let ts = collect_case(cfg, mix, seed, case)?;
        log::info!("mixture {name}: fitting reference and radius");
        let learned = learn_reference(cfg, &ts, seed, case)?;
        drop(ts);
        log::info!("mixture {name}: d = {:.4}", learned.radius);

        let jobs: Vec<(Mode, usize)> = [Mode::Droc, Mode::Ilqg]
            .into_iter()
            .flat_map(|m| (0..runs).map(move |r| (m, r)))
            .collect();
        let records = jobs
            .par_iter()
            .map(|&(mode, r)| run_case(cfg, mix, &learned, seed, case, r as u64, mode))
            .collect::<Result<Vec<_>>>()?;
        let (droc, ilqg) = records.split_at(runs);
        let noise_hashes: Vec<u64> = droc.iter().map(|r| r.noise_stream_hash).collect();
        if ilqg.iter().map(|r| r.noise_stream_hash).ne(noise_hashes.iter().copied()) {
            return Err(DrocError::NumericalFault("paired runs consumed different noise"));
        }

        let droc_stats = CellStats::from_records(droc);
        let ilqg_stats = CellStats::from_records(ilqg);
        let ratio = droc_stats.mean / ilqg_stats.mean;
        let thetas: Vec<f64> = droc.iter().flat_map(|r| r.theta_star.iter().copied()).collect();

        if let Some(dir) = out_dir {
            let case_dir = dir.join(name);
            if let Some(gps) = &learned.gps {
                io::save_gp_set(&case_dir.join("gp.json"), gps)?;
            }
            io::save_json(&case_dir.join("bound.json"), &learned.bound)?;
            for rec in &records {
                let idx = if rec.mode == Mode::Droc { 0 } else { runs };
                let run = records[idx..idx + runs]
                    .iter()
                    .position(|r| std::ptr::eq(r, rec))
                    .expect("record belongs to its mode");
                io::trajectory_csv(rec).save(&case_dir.join(trajectory_file_name(rec.mode, run)))?;
            }
        }

        summaries.push(CaseSummary {
            mixture: name.clone(),
            training_seed: Some(rng::derive_seed(seed, &[tag::COLLECT, case])),
            bound: learned.bound.clone(),
            droc_mean: droc_stats.mean,
            ilqg_mean: ilqg_stats.mean,
            droc_std: droc_stats.std,
            ilqg_std: ilqg_stats.std,
            ratio,
            mean_theta_star: thetas.iter().sum::<f64>() / thetas.len().max(1) as f64,
            complete: droc_stats.is_complete() && ilqg_stats.is_complete(),
        });
        cases.push(CaseResult {
            mixture: name.clone(),
            radius: learned.radius,
            droc: droc_stats,
            ilqg: ilqg_stats,
            ratio,
            noise_hashes,
        });
    }

    let table = ResultTable {
        schema_version: 1,
        runs_per_case: runs,
        root_seed: seed,
        cases,
    };
    if let Some(dir) = out_dir {
        io::save_json(&dir.join("table.json"), &table)?;
        io::save_json(
            &dir.join("summary.json"),
            &Summary {
                schema_version: 1,
                config: cfg.clone(),
                cases: summaries,
            },
        )?;
    }
    Ok(table)
}

/// Side length of the variance heatmap grid over `[0, 5]²` (0.1 m spacing).
pub const HEATMAP_SIDE: usize = 51;
/// Points per GP band curve.
pub const BAND_POINTS: usize = 101;

/// Writes plot-ready data: one `path_<label>.csv` per record, and when given
/// a mixture and GPs, `heatmap.csv` and `gp_band_<dim>.csv` files.
pub fn emit_plot_data(
    records: &[(String, MpcRecord)],
    mixture: Option<&MixtureNoise>,
    gps: Option<&GpSet>,
    out_dir: &Path,
) -> Result<()> {
    if records.is_empty() {
        return Err(DrocError::InvalidConfig("no records to emit".into()));
    }
    for (label, rec) in records {
        let mut csv = Csv::new(&["t", "x", "y"]);
        for (t, s) in rec.states.iter().enumerate() {
            csv.row([Some(t as f64), Some(s[0]), Some(s[1])]);
        }
        csv.save(&out_dir.join(format!("path_{label}.csv")))?;
    }
    if let Some(mix) = mixture {
        heatmap_csv(mix).save(&out_dir.join("heatmap.csv"))?;
    }
    if let Some(gps) = gps {
        for (i, model) in gps.models.iter().enumerate() {
            gp_band_csv(model).save(&out_dir.join(format!("gp_band_{i}.csv")))?;
        }
    }
    Ok(())
}

/// Per-component and mixture position variances on a 51×51 grid over `[0, 5]²`.
pub fn heatmap_csv(mix: &MixtureNoise) -> Csv {
    let h = mix.components.len();
    let mut header = vec!["x".to_string(), "y".to_string()];
    for c in 1..=h {
        header.push(format!("var_x_{c}"));
        header.push(format!("var_y_{c}"));
    }
    header.push("var_x_mix".into());
    header.push("var_y_mix".into());
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&refs);
    for i in 0..HEATMAP_SIDE {
        for j in 0..HEATMAP_SIDE {
            let (x, y) = (i as f64 * 0.1, j as f64 * 0.1);
            let state = [x, y, 0.0, 0.0];
            let mut row = vec![Some(x), Some(y)];
            for c in 0..h {
                let v = mix.component_var(c, &state);
                row.push(Some(v[0]));
                row.push(Some(v[1]));
            }
            let m = mix.mixture_var(&state);
            row.push(Some(m[0]));
            row.push(Some(m[1]));
            csv.row(row);
        }
    }
    csv
}

/// GP posterior mean with a 95% band `mean ± 1.96·std` over the range of the
/// training inputs, followed by the training targets (band columns empty).
pub fn gp_band_csv(model: &crate::gp::GpModel) -> Csv {
    let p = &model.params;
    let lo = p.inputs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = p.inputs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut csv = Csv::new(&["input", "mean", "std", "lower", "upper", "target"]);
    for k in 0..BAND_POINTS {
        let a = if hi > lo {
            lo + (hi - lo) * k as f64 / (BAND_POINTS - 1) as f64
        } else {
            lo
        };
        let (mean, var) = model.predict(a);
        let sd = var.sqrt();
        csv.row([Some(a), Some(mean), Some(sd), Some(mean - 1.96 * sd), Some(mean + 1.96 * sd), None]);
    }
    for (&a, &t) in p.inputs.iter().zip(&p.targets) {
        csv.row([Some(a), None, None, None, None, Some(t)]);
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::parse_csv;
    use crate::noise::GridAxis;

    #[test]
    fn sample_statistics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn heatmap_has_one_row_per_grid_point() {
        let mix = crate::config::default_mixtures().remove("b").unwrap();
        let (header, rows) = parse_csv(heatmap_csv(&mix).as_str()).unwrap();
        assert_eq!(rows.len(), 51 * 51);
        assert_eq!(header.len(), 2 + 2 * 3 + 2);
        let peak = rows
            .iter()
            .max_by(|a, b| a[8].unwrap().total_cmp(&b[8].unwrap()))
            .unwrap();
        assert!((peak[0].unwrap() - 2.5).abs() < 1e-9 && (peak[1].unwrap() - 2.5).abs() < 1e-9);
    }

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.collection.grid.axes = vec![
            GridAxis { min: 0.0, max: 5.0, count: 4 },
            GridAxis { min: 0.0, max: 5.0, count: 4 },
            GridAxis { min: -3.0, max: 0.0, count: 2 },
            GridAxis { min: 0.0, max: 2.0, count: 2 },
        ];
        cfg.collection.samples_per_state = 60;
        cfg.knn.reference_samples = 40;
        cfg.benchmark.runs_per_case = 2;
        cfg.benchmark.mixtures = vec!["a".into()];
        cfg.mpc.iterations = 4;
        cfg.cross_entropy.population = 8;
        cfg.cross_entropy.max_gens = 2;
        cfg.gp.restarts = 2;
        cfg
    }

    #[test]
    fn tiny_benchmark_is_paired_and_consistent() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let table = run_benchmark(&cfg, Some(dir.path())).unwrap();
        assert_eq!(table.cases.len(), 1);
        let case = &table.cases[0];
        assert_eq!(case.droc.distances.len(), 2);
        assert!((case.ratio - case.droc.mean / case.ilqg.mean).abs() < 1e-15);
        for mode in [Mode::Droc, Mode::Ilqg] {
            let cell = if mode == Mode::Droc { &case.droc } else { &case.ilqg };
            let mut finals = Vec::new();
            for run in 0..2 {
                let text = std::fs::read_to_string(dir.path().join("a").join(trajectory_file_name(mode, run))).unwrap();
                let (_, rows) = parse_csv(&text).unwrap();
                assert_eq!(rows.len(), cfg.mpc.iterations + 1);
                let last = rows.last().unwrap();
                finals.push(last[1].unwrap().hypot(last[2].unwrap()));
            }
            let (m, s) = mean_std(&finals);
            assert!((m - cell.mean).abs() <= 1e-12);
            assert!((s - cell.std).abs() <= 1e-12);
        }
        let stored: ResultTable = io::load_json(&dir.path().join("table.json")).unwrap();
        assert_eq!(stored, table);
        assert!(dir.path().join("a/gp.json").exists());
        assert!(dir.path().join("summary.json").exists());
    }

    #[test]
    fn stationary_reference_path_runs() {
        let mut cfg = tiny_config();
        cfg.benchmark.reference = ReferenceKind::Stationary;
        cfg.benchmark.runs_per_case = 1;
        let table = run_benchmark(&cfg, None).unwrap();
        assert!(table.cases[0].radius >= 0.0);
        assert!(table.is_complete());
    }
}
