use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use droc_core::config::{ReferenceKind, RunConfig};
use droc_core::harness::{self, LearnedReference};
use droc_core::io::{self, BoundFile};
use droc_core::kl_bound::horizon_bound;
use droc_core::mpc::{Mode, RefModel};
use droc_core::rng::{self, tag};

/// Data-driven distributionally robust control of a car-like robot.
#[derive(Parser, Debug)]
#[command(name = "droc", version)]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding `benchmark.root_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect a training set under one true-noise mixture.
    Collect {
        #[arg(long, default_value = "b")]
        mixture: String,
    },
    /// Fit per-dimension GPs to a training set.
    Fit {
        #[arg(long)]
        training: PathBuf,
    },
    /// Estimate the KL radius from a training set.
    EstimateBound {
        #[arg(long)]
        training: PathBuf,
        /// Use the stationary estimator instead of the horizon-window maximum.
        #[arg(long)]
        stationary: bool,
    },
    /// Run one closed loop.
    Run {
        #[arg(long, default_value = "b")]
        mixture: String,
        #[arg(long, default_value = "droc")]
        mode: String,
        /// Fitted GPs; learned from fresh data when omitted.
        #[arg(long, requires = "bound")]
        gp: Option<PathBuf>,
        /// Radius file written by `estimate-bound`.
        #[arg(long, requires = "gp")]
        bound: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        run_index: u64,
    },
    /// Run the full paired benchmark and write the result table.
    Benchmark,
    /// Print the effective configuration as JSON.
    Config,
    /// Write plot-ready CSVs from a benchmark output directory.
    EmitPlots {
        /// Directory written by `benchmark`.
        #[arg(long)]
        from: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.benchmark.root_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Case index used for seeding; matches the benchmark's table order.
fn mixture_index(cfg: &RunConfig, name: &str) -> Result<u64> {
    cfg.mixture(name)?;
    let pos = cfg
        .benchmark
        .mixtures
        .iter()
        .position(|k| k == name)
        .unwrap_or_else(|| cfg.mixtures.keys().position(|k| k == name).expect("mixture exists"));
    Ok(pos as u64)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    if let Command::Config = cli.command {
        println!("{}", cfg.to_json_pretty());
        return Ok(());
    }
    let seed = cfg.benchmark.root_seed;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    match &cli.command {
        Command::Collect { mixture } => {
            let case = mixture_index(&cfg, mixture)?;
            let ts = harness::collect_case(&cfg, cfg.mixture(mixture)?, seed, case)?;
            let path = out.join("training.bin");
            io::save_training_set(&path, &ts)?;
            println!(
                "wrote {} ({} states x {} realizations)",
                path.display(),
                ts.num_states(),
                ts.samples_per_state
            );
        }
        Command::Fit { training } => {
            let ts = io::load_training_set(training)?;
            let fit_seed = rng::derive_seed(seed, &[tag::FIT]);
            let (gps, reports) = droc_core::gp::fit_state_dependent(&ts, &cfg.gp, fit_seed)?;
            let path = out.join("gp.json");
            io::save_gp_set(&path, &gps)?;
            for (i, (m, r)) in gps.models.iter().zip(&reports).enumerate() {
                println!(
                    "dim {i}: signal {:.4e} length {:.4} noise {:.4e} log-lik {:.3}",
                    m.params.signal_variance, m.params.length_scale, m.params.noise_variance, r.best_log_likelihood
                );
            }
            println!("wrote {}", path.display());
        }
        Command::EstimateBound { training, stationary } => {
            let ts = io::load_training_set(training)?;
            let bound_seed = rng::derive_seed(seed, &[tag::BOUND]);
            let file = if *stationary {
                let mut c = cfg.clone();
                c.benchmark.reference = ReferenceKind::Stationary;
                harness::learn_reference(&c, &ts, seed, 0)?.bound
            } else {
                let hb = horizon_bound(&ts, cfg.mpc.horizon, &cfg.knn, bound_seed)?;
                BoundFile::new(&hb, cfg.knn.k, cfg.knn.reference_samples, cfg.mpc.horizon, bound_seed)
            };
            let path = out.join("bound.json");
            io::save_json(&path, &file)?;
            println!("d_max = {:.6}; wrote {}", file.d_max, path.display());
        }
        Command::Run {
            mixture,
            mode,
            gp,
            bound,
            run_index,
        } => {
            let mode: Mode = mode.parse()?;
            let case = mixture_index(&cfg, mixture)?;
            let mix = cfg.mixture(mixture)?;
            let learned = match (gp, bound) {
                (Some(gp), Some(bound)) => {
                    let gps = io::load_gp_set(gp)?;
                    let bound: BoundFile = io::load_json(bound)?;
                    LearnedReference {
                        reference: RefModel::StateDependent(gps.clone()),
                        radius: bound.d_max,
                        bound,
                        gps: Some(gps),
                    }
                }
                _ => {
                    let ts = harness::collect_case(&cfg, mix, seed, case)?;
                    harness::learn_reference(&cfg, &ts, seed, case)?
                }
            };
            let start = Instant::now();
            let rec = harness::run_case(&cfg, mix, &learned, seed, case, *run_index, mode)?;
            let elapsed = start.elapsed();
            let path = out.join(harness::trajectory_file_name(mode, *run_index as usize));
            io::trajectory_csv(&rec).save(&path)?;
            io::save_json(&out.join(format!("{}_run{:02}.json", mode.as_str(), run_index)), &rec)?;
            println!(
                "{} d={:.4} final distance {:.4} m, complete {}, {:.1} s; wrote {}",
                mode.as_str(),
                learned.radius,
                rec.final_distance,
                rec.complete,
                elapsed.as_secs_f64(),
                path.display()
            );
        }
        Command::Benchmark => {
            let table = harness::run_benchmark(&cfg, Some(out))?;
            println!("{:<8} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8}", "mixture", "droc mean", "droc std", "ilqg mean", "ilqg std", "ratio", "d");
            for c in &table.cases {
                println!(
                    "{:<8} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>8.3} {:>8.3}{}",
                    c.mixture,
                    c.droc.mean,
                    c.droc.std,
                    c.ilqg.mean,
                    c.ilqg.std,
                    c.ratio,
                    c.radius,
                    if c.droc.is_complete() && c.ilqg.is_complete() { "" } else { "  INCOMPLETE" }
                );
            }
            println!("wrote {}", out.join("table.json").display());
        }
        Command::EmitPlots { from } => emit_plots(&cfg, from, out)?,
        Command::Config => unreachable!("handled above"),
    }
    Ok(())
}

fn emit_plots(cfg: &RunConfig, from: &Path, out: &Path) -> Result<()> {
    let table: harness::ResultTable = io::load_json(&from.join("table.json"))
        .with_context(|| format!("reading {}", from.join("table.json").display()))?;
    if table.cases.is_empty() {
        bail!("benchmark table has no cases");
    }
    for case in &table.cases {
        let case_dir = from.join(&case.mixture);
        let mut records = Vec::new();
        for mode in [Mode::Droc, Mode::Ilqg] {
            for run in 0..table.runs_per_case {
                let name = harness::trajectory_file_name(mode, run);
                let text = std::fs::read_to_string(case_dir.join(&name))
                    .with_context(|| format!("reading {}", case_dir.join(&name).display()))?;
                let rec = io::read_trajectory_csv(&text, mode)?;
                records.push((format!("{}_run{:02}", mode.as_str(), run), rec));
            }
        }
        let gp_path = case_dir.join("gp.json");
        let gps = if gp_path.exists() { Some(io::load_gp_set(&gp_path)?) } else { None };
        let dest = out.join(&case.mixture);
        std::fs::create_dir_all(&dest)?;
        harness::emit_plot_data(&records, cfg.mixtures.get(&case.mixture), gps.as_ref(), &dest)?;
        println!("wrote plot data for mixture {} to {}", case.mixture, dest.display());
    }
    Ok(())
}
