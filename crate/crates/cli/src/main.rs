use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fixastep::check;
use fixastep::harness::{aggregate, run_experiment, write_results, ExperimentConfig, Mode};
use fixastep::losses::MethodId;

const DEFAULTS: &str = "\
Defaults (override in a TOML/JSON config; `fixastep defaults` prints one):
  dataset          gaussian blobs, dim 16, means on axes at radius 2.8,
                   6 known + 4 OOD classes,
                   50 labeled / 400 unlabeled / 50 val / 200 test per class
  slots            4 unlabeled class slots, zeta in {0,25,50,75,100}
  seeds            0..5, results reported as mean with min/max
  model            MLP, one hidden layer of 64, weight decay 5e-4
  optimizer        Adam (0.9, 0.999, 1e-8), lr 3e-3, constant schedule
  iterations       2000, batch 64 labeled + 64 unlabeled, eval every 100
  lambda ramp-up   linear over the first 40% of iterations
  fix-a-step       alpha 0.5, tau 0.5, gate drops conflicting gradients
  lambda_max       pi 10, pseudo 1, mean-teacher 50, vat 0.3, fixmatch 1
  pseudo-label     threshold 0.95
  vat              xi 1e-6, eps 6
  fixmatch         threshold 0.95, temperature 1.0
  mean-teacher     EMA decay 0.999, MSE consistency (defaults of the
                   original Mean Teacher method)";

#[derive(Parser)]
#[command(name = "fixastep", version, about = "Fix-A-Step semi-supervised experiments", after_help = DEFAULTS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the grid described by a config file and flags.
    Run(GridArgs),
    /// Accuracy vs. mismatch: labeled-only, off-the-shelf, Fix-A-Step and
    /// the oracle filter over every zeta.
    Sweep(GridArgs),
    /// Ablation rows (off-the-shelf, gate only, aug only, both) plus
    /// labeled-only, at zeta = 100 unless overridden.
    Ablate(GridArgs),
    /// Run the gradient and invariant property suite.
    Check {
        /// Shorter runs and fewer seeds.
        #[arg(long)]
        quick: bool,
    },
    /// Print the default configuration as TOML.
    Defaults,
}

#[derive(Args, Clone)]
struct GridArgs {
    /// TOML or JSON experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for results.csv and summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated mismatch percentages.
    #[arg(long = "zeta-list", value_delimiter = ',')]
    zeta_list: Option<Vec<u32>>,
    /// Comma-separated modes: labeled-only, off-the-shelf, fixastep,
    /// aug-only, gate-only, oracle-filter.
    #[arg(long, value_delimiter = ',')]
    mode: Option<Vec<String>>,
    /// Comma-separated base methods: pi, pseudo, mean-teacher, vat, fixmatch.
    #[arg(long, value_delimiter = ',')]
    method: Option<Vec<String>>,
    /// Training iterations per run.
    #[arg(long = "max-iters")]
    max_iters: Option<u64>,
    /// Worker threads (0 = all cores, 1 = sequential).
    #[arg(long)]
    jobs: Option<usize>,
}

fn build_config(args: &GridArgs, preset: &[Mode], preset_zetas: Option<&[u32]>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let mut c = ExperimentConfig::default();
            if !preset.is_empty() {
                c.modes = preset.to_vec();
            }
            if let Some(z) = preset_zetas {
                c.zetas = z.to_vec();
            }
            c
        }
    };
    if let Some(s) = &args.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(z) = &args.zeta_list {
        cfg.zetas = z.clone();
    }
    if let Some(m) = &args.mode {
        cfg.modes = m.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    }
    if let Some(m) = &args.method {
        cfg.methods = m.iter().map(|s| s.parse::<MethodId>()).collect::<Result<_, _>>()?;
    }
    if let Some(i) = args.max_iters {
        cfg.train.iterations = i;
    }
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_grid(cfg: ExperimentConfig) -> anyhow::Result<()> {
    let results = run_experiment(&cfg)?;
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    let files = write_results(&results, &cfg.digest(), &dir)?;
    let mut out = std::io::stdout().lock();
    // Output errors (a closed pipe) are ignored; the result files are written.
    let _ = writeln!(out, "{:<14} {:<14} {:>5} {:>5} {:>8} {:>8} {:>8}", "method", "mode", "zeta", "runs", "mean", "min", "max");
    for a in aggregate(&results) {
        let _ = writeln!(
            out,
            "{:<14} {:<14} {:>5} {:>5} {:>8.4} {:>8.4} {:>8.4}{}",
            a.method,
            a.mode.name(),
            a.zeta,
            a.runs,
            a.mean,
            a.min,
            a.max,
            if a.failed > 0 { format!("  ({} failed)", a.failed) } else { String::new() }
        );
    }
    let _ = writeln!(out, "wrote {} and {}", files.csv.display(), files.json.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(a) => run_grid(build_config(&a, &[], None)?)?,
        Command::Sweep(a) => run_grid(build_config(
            &a,
            &[Mode::LabeledOnly, Mode::OffTheShelf, Mode::Fixastep, Mode::OracleFilter],
            None,
        )?)?,
        Command::Ablate(a) => {
            let mut modes = vec![Mode::LabeledOnly];
            modes.extend(Mode::ABLATION);
            run_grid(build_config(&a, &modes, Some(&[100]))?)?
        }
        Command::Check { quick } => {
            let outcomes = check::run_all(quick)?;
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            let mut out = std::io::stdout().lock();
            for o in &outcomes {
                let _ = writeln!(out, "[{}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            if failed > 0 {
                let _ = writeln!(out, "{failed} of {} checks failed", outcomes.len());
                return Ok(ExitCode::FAILURE);
            }
            let _ = writeln!(out, "all {} checks passed", outcomes.len());
        }
        Command::Defaults => {
            let text = toml::to_string(&ExperimentConfig::default())?;
            if text.is_empty() {
                bail!("empty default config");
            }
            let _ = std::io::stdout().write_all(text.as_bytes());
        }
    }
    Ok(ExitCode::SUCCESS)
}
