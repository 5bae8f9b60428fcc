use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};
use mimetic::autodiff::Fault;
use mimetic::experiment::{self, ExperimentConfig, SummaryRow};
use mimetic::gradcheck::{self, GradcheckOptions};
use mimetic::Error;

#[derive(Parser)]
#[command(name = "mimetic", version, about = "Mean-shift MLP initialization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable op and both model families.
    Gradcheck {
        /// Comma-separated case names (default: all).
        #[arg(long, value_delimiter = ',')]
        ops: Vec<String>,
        #[arg(long, default_value_t = gradcheck::DEFAULT_POINTS)]
        points: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train one model per seed for each init mode.
    Train {
        #[command(flatten)]
        common: Common,
        /// Init mode: none | constant:B | rowvec:S | anticorr (repeatable).
        #[arg(long = "init")]
        init: Vec<String>,
        /// Epochs per run.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Sweep the constant W1 mean b, with the scalar-bias and linear-bias baselines.
    SweepBias {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        b_grid: Option<Vec<f64>>,
        /// Epochs per run.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Independent full runs for every epoch budget, init mode and seed.
    EpochCurve {
        #[command(flatten)]
        common: Common,
        /// Epoch budgets.
        #[arg(long, value_delimiter = ',')]
        epochs: Option<Vec<usize>>,
        #[arg(long = "init")]
        init: Vec<String>,
    },
    /// Train a population on seeds 0..K (resumable).
    Farm {
        #[command(flatten)]
        common: Common,
        /// Population size.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Population statistics over a farm's snapshots.
    Analyze {
        /// Snapshot directory.
        dir: PathBuf,
        /// MLP block index (default: every block).
        #[arg(long)]
        layer: Option<usize>,
        /// Output directory (default: the snapshot directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment recipe (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds: `0,1,2` or `0..5`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    parallel: Option<usize>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Error> {
    let bad = || Error::Usage(format!("bad seed list '{s}' (expected 0,1,2 or 0..5)"));
    let num = |x: &str| x.trim().parse::<u64>().map_err(|_| bad());
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        return if a < b { Ok((a..b).collect()) } else { Err(bad()) };
    }
    s.split(',').map(num).collect()
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_seeds(s)?;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(p) = self.parallel {
            cfg.parallel = p;
        }
        Ok(cfg)
    }
}

fn print_summary(header: &str, rows: &[SummaryRow]) {
    println!("{header:<28} {:>8} {:>8} {:>4}", "mean", "std", "n");
    for r in rows {
        println!("{:<28} {:>8.4} {:>8.4} {:>4}", r.key.join(" "), r.mean, r.std, r.n);
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Gradcheck { ops, points, inject_fault } => {
            let fault = match inject_fault.as_deref() {
                None => None,
                Some("gelu-derivative") => Some(Fault::GeluDerivative),
                Some(other) => bail!(Error::Usage(format!("unknown fault '{other}'"))),
            };
            let known = gradcheck::case_names();
            if let Some(bad) = ops.iter().find(|o| !known.contains(&o.as_str())) {
                bail!(Error::Usage(format!("unknown op '{bad}'; known: {}", known.join(", "))));
            }
            let results = gradcheck::run_suite(&GradcheckOptions { ops, points, seed: 0, fault })?;
            let mut ok = true;
            for r in &results {
                ok &= r.passed();
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<18} {:>10.3e}  tol {:.0e}  {verdict}", r.name, r.worst_rel_err, r.tolerance);
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Train { common, init, epochs } => {
            let mut cfg = common.config()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let modes = if init.is_empty() { cfg.modes.clone() } else { init };
            let report = experiment::cmd_train(&cfg, &modes, common.force)?;
            print_summary("mode", &report.summary);
            Ok(ExitCode::SUCCESS)
        }
        Command::SweepBias { common, b_grid, epochs } => {
            let mut cfg = common.config()?;
            if let Some(g) = b_grid {
                cfg.b_grid = g;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let report = experiment::cmd_sweep_bias(&cfg, common.force)?;
            print_summary("arm b", &report.summary);
            Ok(ExitCode::SUCCESS)
        }
        Command::EpochCurve { common, epochs, init } => {
            let mut cfg = common.config()?;
            if let Some(g) = epochs {
                cfg.epochs_grid = g;
            }
            if !init.is_empty() {
                cfg.modes = init;
            }
            let report = experiment::cmd_epoch_curve(&cfg, common.force)?;
            print_summary("epochs mode", &report.summary);
            Ok(ExitCode::SUCCESS)
        }
        Command::Farm { common, k, epochs } => {
            let mut cfg = common.config()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let k = k.unwrap_or(cfg.farm_size);
            let report = experiment::cmd_farm(&cfg, k)?;
            println!(
                "trained {}, already present {}, failed {} -> {}",
                report.trained.len(),
                report.resumed.len(),
                report.failed.len(),
                cfg.out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze { dir, layer, out } => {
            let out = out.unwrap_or_else(|| dir.clone());
            for s in experiment::cmd_analyze(&dir, layer, &out)? {
                let st = &s.stripe_scores;
                println!(
                    "layer {}: K={} skipped={} failed={} | W1 rows {:.3} cols {:.3} | W2 rows {:.3} cols {:.3} | rho {:.4}",
                    s.layer, s.k, s.skipped, s.failed, st.w1.rows, st.w1.columns, st.w2.rows, st.w2.columns, s.rho
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(
                e.downcast_ref::<Error>(),
                Some(Error::Config(_) | Error::Usage(_) | Error::Toml(_) | Error::OutputExists(_))
            );
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
