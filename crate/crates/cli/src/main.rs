use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vri_core::bilevel::RunMetrics;
use vri_core::data::write_csv;
use vri_core::harness::{
    collapse_report, convergence_fit, evaluate_checkpoint, final_half_windows, prepare_data, run_experiment,
    windowed_non_increasing, ExperimentConfig, Mode, METRICS_FILE, NOISE_MANIFEST_FILE, SPLITS_FILE,
};
use vri_core::Error;

#[derive(Parser)]
#[command(name = "vri", version, about = "Variational rectification training for noisy labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.alpha=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        ExperimentConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Bi-level training with the clean meta split.
    Train(ConfigArgs),
    /// Warm-up then small-loss pseudo-meta training (needs `[nometa]`).
    TrainNometa(ConfigArgs),
    /// Write the split and corrupted dataset without training.
    Corrupt {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; defaults to `experiment.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collapse and convergence diagnostics from a run's metrics.csv.
    Diag {
        /// Run directory or metrics.csv path.
        run: PathBuf,
    },
    /// Test accuracy of a checkpoint on the configured test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn train(args: &ConfigArgs, mode: Mode) -> Result<(), Error> {
    let cfg = args.load()?;
    let summary = run_experiment(&cfg, mode)?;
    print!("{}", summary.report());
    Ok(())
}

fn corrupt(args: &ConfigArgs, out: Option<PathBuf>) -> Result<(), Error> {
    let cfg = args.load()?;
    let dir = out.unwrap_or_else(|| cfg.experiment.output_dir.clone());
    std::fs::create_dir_all(&dir)?;
    let prepared = prepare_data(&cfg, Mode::Meta)?;
    write_csv(&dir.join("data.csv"), &prepared.dataset)?;
    prepared.dataset.write_split_manifest(&dir.join(SPLITS_FILE))?;
    if let Some(m) = &prepared.manifest {
        m.write(&dir.join(NOISE_MANIFEST_FILE))?;
        println!("realized_corruption = {:.4}", m.realized_corruption);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn diag(run: PathBuf) -> Result<(), Error> {
    let path = if run.is_dir() { run.join(METRICS_FILE) } else { run };
    let metrics = RunMetrics::read_csv(&path)?;
    println!("iterations = {}", metrics.len());
    if let Some(acc) = metrics.final_test_accuracy() {
        println!("final_test_acc = {acc:.4}");
    }
    match collapse_report(&metrics.sigma_norms()) {
        Ok(c) => println!(
            "sigma_norm initial = {:.4} min = {:.4} final = {:.4} slope = {:.3e} collapsed = {}",
            c.initial, c.min, c.final_value, c.slope, c.collapsed
        ),
        Err(_) => println!("sigma_norm: no entries"),
    }
    let grads = metrics.meta_grad_sq();
    match convergence_fit(&grads) {
        Ok(f) => {
            println!("meta_grad_fit c = {:.4e} residual = {:.4}", f.c, f.residual);
            let windows: Vec<String> = final_half_windows(&grads).iter().map(|w| format!("{w:.3e}")).collect();
            println!(
                "final_half_windows = [{}] non_increasing = {}",
                windows.join(", "),
                windowed_non_increasing(&grads)
            );
        }
        Err(e) => println!("meta_grad_fit: {e}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(a) => train(&a, Mode::Meta),
        Command::TrainNometa(a) => train(&a, Mode::NoMeta),
        Command::Corrupt { cfg, out } => corrupt(&cfg, out),
        Command::Diag { run } => diag(run),
        Command::Eval { cfg, checkpoint } => {
            let acc = evaluate_checkpoint(&cfg.load()?, &checkpoint)?;
            println!("test_acc = {acc:.4}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // clap's own usage errors exit with 2, which is reserved for numerical
    // failures here.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
