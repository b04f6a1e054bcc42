use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use memctl_core::config::Config;
use memctl_core::controller::{baseline_law, RandomSource};
use memctl_core::dynamics::{rollout, ControlLaw};
use memctl_core::experiment::{
    evaluate_baseline, evaluate_controller, failure_mode_flag, markov_gap_scan, phase1_scan,
    rank_scan, sigma_scan, write_markov_gap_csv, write_rank_csv, write_result, write_sigma_csv,
    BASELINE_ARCHITECTURE, COLLAPSE_THRESHOLD,
};
use memctl_core::incrt::simulate_operator;
use memctl_core::shield::{shield_activation_fraction, ShieldedLaw};
use memctl_core::stats::{compare_result_files, Alternative, Grouping, Metric};

#[derive(Parser)]
#[command(
    name = "memctl",
    version,
    about = "Two-link arm meta-control simulation and analysis"
)]
struct Cli {
    /// TOML configuration file; missing sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "results")]
    out_dir: PathBuf,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Controller {
    /// Fixed-gain computed torque.
    Baseline,
    /// Uniformly random gains inside the box, unshielded.
    Random,
    /// Uniformly random gains passed through the Lyapunov shield.
    ShieldedRandom,
}

impl Controller {
    fn name(self) -> &'static str {
        match self {
            Controller::Baseline => BASELINE_ARCHITECTURE,
            Controller::Random => "random",
            Controller::ShieldedRandom => "shielded_random",
        }
    }

    fn build(self, cfg: &Config, seed: u64) -> Box<dyn ControlLaw + Send> {
        let rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Controller::Baseline => Box::new(baseline_law(cfg.law)),
            Controller::Random => Box::new(memctl_core::controller::ComputedTorqueLaw::new(
                RandomSource::new(cfg.shield.bounds, rng),
                cfg.law,
            )),
            Controller::ShieldedRandom => Box::new(ShieldedLaw::new(
                RandomSource::new(cfg.shield.bounds, rng),
                cfg.law,
                cfg.shield.bounds,
                cfg.shield.alpha,
            )),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    DeltaPercent,
    RmseMean,
    BaselineRmse,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupingArg {
    Architecture,
    ArchitectureTau,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlternativeArg {
    Less,
    Greater,
    TwoSided,
}

#[derive(Subcommand)]
enum Command {
    /// Run one rollout and export its trajectory as CSV.
    Simulate {
        #[arg(long, value_enum, default_value = "baseline")]
        controller: Controller,
        #[arg(long)]
        tau_z: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        payload: f64,
    },
    /// Payload sweep over the configured horizons and seeds; one JSON file per run.
    Evaluate {
        #[arg(long, value_enum, default_value = "baseline")]
        controller: Controller,
        #[arg(long, value_delimiter = ',')]
        tau_z: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Closed-form against Monte-Carlo conditional memory variance.
    SigmaScan {
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
        tau_z: Vec<f64>,
        #[arg(long)]
        n_traj: Option<usize>,
    },
    /// Effective rank of the simulated history-gradient operator.
    RankScan {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        tau_z: Vec<f64>,
        /// Also write each operator as a CSV matrix.
        #[arg(long)]
        export_operators: bool,
    },
    /// Rank tracking to a head count per horizon; one JSON record per line.
    Phase1 {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        tau_z: Vec<f64>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        gamma_add: Option<f64>,
        #[arg(long)]
        gamma_prune: Option<f64>,
        /// Include the per-iteration log.
        #[arg(long)]
        verbose: bool,
    },
    /// Excess cost of memoryless versus windowed policies.
    MarkovGap {
        #[arg(long, value_delimiter = ',', default_value = "0.5,1")]
        tau_z: Vec<f64>,
    },
    /// Statistical comparison of result files.
    Compare {
        /// Glob pattern for result JSON files.
        #[arg(long)]
        inputs: String,
        #[arg(long, value_enum, default_value = "delta-percent")]
        metric: MetricArg,
        #[arg(long, value_enum, default_value = "architecture-tau")]
        grouping: GroupingArg,
        #[arg(long, value_enum, default_value = "less")]
        alternative: AlternativeArg,
    },
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()?;
    }
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = &cli.out_dir;
    let stdout = io::stdout();
    let mut stdout = stdout.lock();

    match cli.command {
        Command::Simulate {
            controller,
            tau_z,
            payload,
        } => {
            let fric = cfg.friction.with_tau_z(tau_z.unwrap_or(cfg.friction.tau_z));
            let plant = cfg.plant.with_payload(payload);
            plant.validate()?;
            let mut law = controller.build(&cfg, cfg.seed);
            let traj = rollout(
                law.as_mut(),
                &cfg.sweep.reference,
                &plant,
                &fric,
                cfg.seed,
                &cfg.sweep.rollout,
            )?;
            let name = format!(
                "trajectory__{}__tz{:?}s__p{:?}__seed{}.csv",
                controller.name(),
                fric.tau_z,
                payload,
                cfg.seed
            );
            traj.write_csv(create(out, &name)?)?;
            let summary = serde_json::json!({
                "controller": controller.name(),
                "tau_z": fric.tau_z,
                "payload": payload,
                "seed": cfg.seed,
                "rmse": traj.rmse(),
                "diverged": traj.diverged,
                "shield_activation": shield_activation_fraction(&traj),
                "csv": out.join(&name),
            });
            writeln!(stdout, "{summary}")?;
        }
        Command::Evaluate {
            controller,
            tau_z,
            seeds,
            rollouts,
        } => {
            if let Some(t) = tau_z {
                cfg.sweep.tau_z = t;
            }
            if let Some(s) = seeds {
                cfg.sweep.seeds = s;
            }
            if let Some(r) = rollouts {
                cfg.sweep.rollouts_per_payload = r;
            }
            for &tau in &cfg.sweep.tau_z {
                for &seed in &cfg.sweep.seeds {
                    let result = match controller {
                        Controller::Baseline => evaluate_baseline(
                            tau,
                            seed,
                            &cfg.sweep,
                            &cfg.plant,
                            &cfg.friction,
                            cfg.law,
                        )?,
                        c => {
                            let make = || c.build(&cfg, seed);
                            evaluate_controller(
                                make,
                                c.name(),
                                0,
                                tau,
                                seed,
                                &cfg.sweep,
                                &cfg.plant,
                                &cfg.friction,
                                cfg.law,
                                None,
                            )?
                        }
                    };
                    let path = write_result(out, &result)?;
                    let mode = failure_mode_flag(&result, COLLAPSE_THRESHOLD);
                    writeln!(
                        stdout,
                        "{}: rmse {:.5} baseline {:.5} delta {:+.2}% {}",
                        path.display(),
                        result.rmse_mean(),
                        result.baseline_rmse,
                        result.delta_percent,
                        serde_json::to_string(&mode)?
                    )?;
                }
            }
        }
        Command::SigmaScan { tau_z, n_traj } => {
            if let Some(n) = n_traj {
                cfg.sigma.n_traj = n;
            }
            let rows = sigma_scan(&tau_z, &cfg.plant, &cfg.friction, &cfg.sigma, cfg.seed)?;
            write_sigma_csv(&rows, create(out, "sigma_scan.csv")?)?;
            write_sigma_csv(&rows, &mut stdout)?;
        }
        Command::RankScan {
            tau_z,
            export_operators,
        } => {
            let rows = rank_scan(
                &tau_z,
                &cfg.plant,
                &cfg.friction,
                &cfg.phase1,
                &cfg.phase1_protocol,
                cfg.seed,
            )?;
            write_rank_csv(&rows, create(out, "rank_scan.csv")?)?;
            write_rank_csv(&rows, &mut stdout)?;
            if export_operators {
                for &tau in &tau_z {
                    let op = simulate_operator(
                        tau,
                        &cfg.plant,
                        &cfg.friction,
                        &cfg.phase1,
                        &cfg.phase1_protocol,
                        cfg.seed,
                    )?;
                    op.write_csv(create(out, &format!("operator__tz{tau:?}s.csv"))?)?;
                }
            }
        }
        Command::Phase1 {
            tau_z,
            window,
            samples,
            gamma_add,
            gamma_prune,
            verbose,
        } => {
            let p = &mut cfg.phase1;
            p.window = window.unwrap_or(p.window);
            p.n_samples = samples.unwrap_or(p.n_samples);
            p.gamma_add = gamma_add.unwrap_or(p.gamma_add);
            p.gamma_prune = gamma_prune.unwrap_or(p.gamma_prune);
            p.validate()?;
            let records = phase1_scan(
                &tau_z,
                &cfg.plant,
                &cfg.friction,
                &cfg.phase1,
                &cfg.phase1_protocol,
                cfg.seed,
                verbose,
            )?;
            let mut file = create(out, "phase1.jsonl")?;
            for r in &records {
                let line = serde_json::to_string(r)?;
                writeln!(file, "{line}")?;
                writeln!(stdout, "{line}")?;
            }
        }
        Command::MarkovGap { tau_z } => {
            let rows =
                markov_gap_scan(&tau_z, &cfg.plant, &cfg.friction, &cfg.markov_gap, cfg.seed)?;
            write_markov_gap_csv(&rows, create(out, "markov_gap.csv")?)?;
            write_markov_gap_csv(&rows, &mut stdout)?;
        }
        Command::Compare {
            inputs,
            metric,
            grouping,
            alternative,
        } => {
            let mut paths: Vec<PathBuf> =
                glob::glob(&inputs)?.collect::<std::result::Result<_, _>>()?;
            paths.sort();
            if paths.is_empty() {
                bail!("no files match {inputs}");
            }
            let metric = match metric {
                MetricArg::DeltaPercent => Metric::DeltaPercent,
                MetricArg::RmseMean => Metric::RmseMean,
                MetricArg::BaselineRmse => Metric::BaselineRmse,
            };
            let grouping = match grouping {
                GroupingArg::Architecture => Grouping::Architecture,
                GroupingArg::ArchitectureTau => Grouping::ArchitectureTau,
            };
            let alt = match alternative {
                AlternativeArg::Less => Alternative::Less,
                AlternativeArg::Greater => Alternative::Greater,
                AlternativeArg::TwoSided => Alternative::TwoSided,
            };
            let table = compare_result_files(&paths, grouping, metric, alt)?;
            let md = table.to_markdown();
            create(out, "compare.md")?.write_all(md.as_bytes())?;
            table.write_csv(create(out, "compare.csv")?)?;
            write!(stdout, "{md}")?;
        }
    }
    Ok(())
}
