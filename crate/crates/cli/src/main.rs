//! `boltznce` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use boltznce::diffnet::Checkpoint;
use boltznce::ebm::{train_ebm, EnergyModel, ENERGY_CHECKPOINT_KIND};
use boltznce::emulator::{
    exact_log_likelihood, sample, sample_with_likelihood, train_flow, Dataset, FlowModel,
    FLOW_CHECKPOINT_KIND,
};
use boltznce::io::{read_points_csv, sidecar_path, write_points_with};
use boltznce::metrics::{angle_w2, energy_w2_batched, grid_density_l2, AngleW2Config, MetricReport};
use boltznce::ode::DivergenceMode;
use boltznce::pipeline::{
    free_energy_from_weights, log_weights, run_ablation, run_full_pipeline, save_weights, AblationVariant,
    ExperimentConfig, ReweightSection, WeightsFile,
};
use boltznce::reweight::{weighted_ensemble, Provenance};
use boltznce::Error;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use ndarray::{Array1, Array2};

#[derive(Parser, Debug)]
#[command(name = "boltznce", version, about = "Flow emulators reweighted to Boltzmann targets with energy-based likelihoods")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override `ode.atol`.
    #[arg(long, global = true)]
    atol: Option<f64>,
    /// Override `ode.rtol`.
    #[arg(long, global = true)]
    rtol: Option<f64>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set ebm.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an emulator on samples of the configured target.
    TrainEmulator,
    /// Draw emulator samples.
    Sample {
        /// Emulator checkpoint [default: <out>/emulator.ckpt].
        #[arg(long)]
        model: Option<PathBuf>,
        /// Number of samples [default: samples.n].
        #[arg(long)]
        n: Option<usize>,
        /// Also integrate the log-density along each trajectory.
        #[arg(long)]
        with_likelihood: bool,
    },
    /// Exact emulator log-likelihood of points via the divergence integral.
    Likelihood {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        samples: PathBuf,
    },
    /// Train an EBM on emulator samples (or on target samples if none given).
    TrainEbm {
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Compare EBM loss variants by grid density error.
    Ablation {
        /// Comma-separated subset of nce_only, sm_only, both [default: ablation.variants].
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Importance weights to the target from exact or EBM likelihoods.
    Reweight {
        #[arg(long)]
        samples: PathBuf,
        /// Use this EBM checkpoint's log-density as the likelihood.
        #[arg(long, conflicts_with = "emulator")]
        ebm: Option<PathBuf>,
        /// Compute exact likelihoods with this emulator checkpoint
        /// (otherwise the samples file's `loglik` column is used).
        #[arg(long)]
        emulator: Option<PathBuf>,
    },
    /// Free-energy difference of a coordinate region from a weights file.
    FreeEnergy {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, num_args = 2, value_names = ["LEFT", "RIGHT"], allow_negative_numbers = true)]
        region: Option<Vec<f64>>,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        coordinate: Option<usize>,
        /// Report path [default: <out>/free_energy_<weights stem>.json].
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sample-quality metrics against reference samples.
    Metrics {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Treat coordinates as torsion angles and add the angle W2.
        #[arg(long)]
        angles: bool,
        /// Add the grid density error of this EBM checkpoint.
        #[arg(long)]
        ebm: Option<PathBuf>,
    },
    /// Full run: emulator, samples, EBM, both reweightings, reports.
    Pipeline,
    /// Log-density of a checkpoint (or the target) on a grid, as CSV.
    DensityGrid {
        /// EBM or emulator checkpoint; the target itself when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        points: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else if e.is_io() {
        3
    } else {
        1
    }
}

fn config_help() -> String {
    let mut s = String::from("Config keys (use with --set KEY=VALUE; defaults shown):\n");
    for (k, v) in ExperimentConfig::documented_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}

fn effective_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let base = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&c.set)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(a) = c.atol {
        cfg.ode.atol = a;
    }
    if let Some(r) = c.rtol {
        cfg.ode.rtol = r;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<(), Error> {
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

fn load_samples(path: &Path) -> Result<(Array2<f64>, Option<Array1<f64>>), Error> {
    read_points_csv(path, Some("loglik"))
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = effective_config(&cli.common)?;
    prepare_out(&cfg)?;
    let out = cfg.out.clone();
    let target = cfg.target()?;
    match cli.command {
        Command::TrainEmulator => {
            let mut src = target.clone();
            let t = train_flow(&mut src, cfg.emulator.objective, cfg.emulator.schedule, &cfg.emulator.train, cfg.seed)?;
            let p = out.join("emulator.ckpt");
            t.checkpoint.save(&p)?;
            println!(
                "trained {} epochs ({} iterations), best validation {:.6}; wrote {}",
                t.summary.epochs_run,
                t.summary.iterations,
                t.summary.best_validation,
                p.display()
            );
        }
        Command::Sample { model, n, with_likelihood } => {
            let model = FlowModel::load(&model.unwrap_or_else(|| out.join("emulator.ckpt")))?;
            let n = n.unwrap_or(cfg.samples.n);
            let set = if with_likelihood {
                sample_with_likelihood(&model, n, cfg.seed, cfg.samples.divergence, &cfg.ode)?
            } else {
                sample(&model, n, cfg.seed, &cfg.ode)?
            };
            let p = out.join("samples.csv");
            set.save(&p)?;
            println!("wrote {} samples to {}", set.len(), p.display());
        }
        Command::Likelihood { model, samples } => {
            let model = FlowModel::load(&model.unwrap_or_else(|| out.join("emulator.ckpt")))?;
            let (x, _) = load_samples(&samples)?;
            let r = exact_log_likelihood(&model, x.view(), cfg.samples.divergence, &cfg.ode)?;
            let p = out.join("likelihood.csv");
            write_points_with(&p, x.view(), &[("loglik", r.loglik.view())])?;
            std::fs::write(sidecar_path(&p), serde_json::to_string_pretty(&r.kind)?)?;
            println!("mean log-likelihood {:.6} over {} points; wrote {}", r.loglik.mean().unwrap_or(f64::NAN), x.nrows(), p.display());
        }
        Command::TrainEbm { samples } => {
            let t = match samples {
                Some(p) => train_ebm(&mut Dataset::new(load_samples(&p)?.0)?, &cfg.ebm, cfg.seed)?,
                None => train_ebm(&mut target.clone(), &cfg.ebm, cfg.seed)?,
            };
            let p = out.join("ebm.ckpt");
            t.checkpoint.save(&p)?;
            println!(
                "trained {} epochs ({} iterations), best validation {:.6}; wrote {}",
                t.summary.epochs_run,
                t.summary.iterations,
                t.summary.best_validation,
                p.display()
            );
        }
        Command::Ablation { variants } => {
            let variants = if variants.is_empty() {
                cfg.ablation.variants.clone()
            } else {
                variants.iter().map(|v| AblationVariant::parse(v.trim())).collect::<Result<_, _>>()?
            };
            let r = run_ablation(&cfg, &variants)?;
            println!("{:<10} {:>12}", "variant", "density L2");
            for e in &r.entries {
                let name = serde_json::to_value(e.variant)?;
                println!("{:<10} {:>12.6}", name.as_str().unwrap_or("?"), e.density_l2);
            }
            if let Some(b) = r.both_is_best {
                println!("both losses best: {b}");
            }
        }
        Command::Reweight { samples, ebm, emulator } => {
            let (x, ll) = load_samples(&samples)?;
            let (provenance, loglik) = match (ebm, emulator) {
                (Some(e), _) => (Provenance::EbmLikelihood, EnergyModel::load(&e)?.log_density(x.view())?),
                (None, Some(m)) => {
                    let model = FlowModel::load(&m)?;
                    (Provenance::ExactLikelihood, exact_log_likelihood(&model, x.view(), cfg.samples.divergence, &cfg.ode)?.loglik)
                }
                (None, None) => (
                    Provenance::ExactLikelihood,
                    ll.ok_or_else(|| Error::InvalidInput("samples carry no loglik column; pass --ebm or --emulator".into()))?,
                ),
            };
            let lw = log_weights(&target, x.view(), loglik.view());
            let ens = weighted_ensemble(x.view(), lw.view(), provenance)?;
            let name = match provenance {
                Provenance::ExactLikelihood => "weights_exact.csv",
                Provenance::EbmLikelihood => "weights_ebm.csv",
            };
            let p = out.join(name);
            save_weights(&p, x.view(), loglik.view(), lw.view(), &ens)?;
            for w in &ens.diagnostics.warnings {
                eprintln!("warning: {w}");
            }
            println!("ESS {:.1} of {} samples; wrote {}", ens.diagnostics.ess, ens.len(), p.display());
        }
        Command::FreeEnergy { weights, region, bins, coordinate, output } => {
            let w = WeightsFile::load(&weights)?;
            let section = ReweightSection {
                coordinate: coordinate.unwrap_or(cfg.reweight.coordinate),
                region: region.map_or(cfg.reweight.region, |r| [r[0], r[1]]),
                bins: bins.unwrap_or(cfg.reweight.bins),
            };
            let report = free_energy_from_weights(&w, &section, Some(cfg.seed))?;
            let stem = weights.file_stem().and_then(|s| s.to_str()).unwrap_or("weights").to_string();
            let p = output.unwrap_or_else(|| out.join(format!("free_energy_{stem}.json")));
            report.save_json(&p)?;
            report.save_histogram_csv(&p.with_extension("csv"))?;
            for d in &report.diagnostics {
                eprintln!("warning: {d}");
            }
            println!("Delta F / kT = {}; wrote {}", report.delta_f, p.display());
        }
        Command::Metrics { samples, reference, angles, ebm } => {
            let (a, _) = load_samples(&samples)?;
            let (b, _) = load_samples(&reference)?;
            let mut report = MetricReport {
                seeds: vec![cfg.seed],
                ..Default::default()
            };
            if a.ncols() == target.dim() && b.ncols() == target.dim() {
                let (w2, batch) = energy_w2_batched(target.energies(a.view()).view(), target.energies(b.view()).view(), cfg.metrics.w2_batch)?;
                report.e_w2 = Some(w2);
                report.e_w2_batch = Some(batch);
            }
            if angles {
                let ac = AngleW2Config::default();
                report.t_w2 = Some(angle_w2(a.view(), b.view(), &ac, cfg.seed)?);
                report.t_w2_batch = Some(ac.batch_size);
            }
            if let Some(e) = ebm {
                let model = EnergyModel::load(&e)?;
                let grid = target.covering_grid(cfg.metrics.grid_points);
                report.density_l2 = Some(grid_density_l2(|x| model.log_density(x), &target, &grid)?);
            }
            let p = out.join("metrics.json");
            report.save(&p)?;
            print!("{}", report.table());
        }
        Command::Pipeline => {
            let r = run_full_pipeline(&cfg)?;
            print!("{}", r.metrics.comparison_table());
            print!("{}", r.metrics.report.table());
            if let Some(s) = r.timings.likelihood_speedup {
                println!("likelihood speedup (divergence integral / EBM): {s:.1}x");
            }
            println!("run directory: {}", r.dir.display());
        }
        Command::DensityGrid { model, points, output } => {
            let grid = target.covering_grid(points);
            let nodes = grid.nodes();
            let (label, values) = match model {
                None => ("target", target.log_densities(nodes.view())),
                Some(p) => {
                    let ckpt = Checkpoint::load(&p)?;
                    match ckpt.kind.as_str() {
                        ENERGY_CHECKPOINT_KIND => ("ebm", EnergyModel::from_checkpoint(&ckpt)?.log_density(nodes.view())?),
                        FLOW_CHECKPOINT_KIND => {
                            let m = FlowModel::from_checkpoint(&ckpt)?;
                            ("emulator", exact_log_likelihood(&m, nodes.view(), DivergenceMode::ExactAutodiff, &cfg.ode)?.loglik)
                        }
                        other => return Err(Error::InvalidInput(format!("unknown checkpoint kind '{other}'"))),
                    }
                }
            };
            let p = output.unwrap_or_else(|| out.join(format!("density_grid_{label}.csv")));
            write_points_with(&p, nodes.view(), &[("log_density", values.view())])?;
            println!("wrote {} grid points to {}", nodes.nrows(), p.display());
        }
    }
    Ok(())
}

fn init_threads() {
    if let Some(n) = std::env::var("BOLTZNCE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_threads();
    let cmd = Cli::command().after_long_help(config_help());
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
