use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mvcnet_cli::commands::{cmd_eval, cmd_gen, cmd_grad_check, cmd_train, cmd_verify, RunConfig};
use mvcnet_cli::{exit_code_for, EXIT_OK, EXIT_PROPERTY, EXIT_VALIDATION};
use mvcnet_core::presets::{preset, PRESET_NAMES};
use mvcnet_core::verify::ManifoldChoice;

/// Manifold-valued convolution networks: dataset generation, training,
/// evaluation, and executable verification of the layer properties.
#[derive(Parser)]
#[command(name = "mvcnet", version, about)]
struct Cli {
    /// Force a single worker thread (bit-exact scheduling).
    #[arg(long, global = true)]
    single_thread: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (mvt-v1 container).
    Gen(GenArgs),
    /// Train a network with k-fold cross-validation.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the geometry/layer property suites.
    Verify(VerifyArgs),
    /// Run the gradient checks only.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Preset name (see --list).
    #[arg(long)]
    preset: Option<String>,
    /// Dataset spec JSON file (alternative to --preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path for the dataset file.
    #[arg(long, required_unless_present = "list")]
    out: Option<PathBuf>,
    /// List available presets and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON (fields may be overridden by the flags below).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file (mvt-v1).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Preset supplying the architecture and training defaults.
    #[arg(long)]
    preset: Option<String>,
    /// Network spec JSON file (alternative to --preset).
    #[arg(long)]
    net_spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Output directory for checkpoint/metrics/manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ManifoldArg {
    Both,
    Spd,
    Sphere,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "both")]
    manifold: ManifoldArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Base trial count per property (0 = vacuous pass with a warning).
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Deliberately skew an isometry to prove the checks have power
    /// (the run must then fail).
    #[arg(long)]
    inject_fault: bool,
    /// Skip the gradient checks.
    #[arg(long)]
    skip_grad_checks: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random parameter coordinates per layer configuration.
    #[arg(long, default_value_t = 50)]
    coords: usize,
}

fn init_threads(single_thread: bool) {
    let mut threads = if single_thread { Some(1) } else { None };
    if threads.is_none() {
        if let Ok(v) = std::env::var("MVCNET_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    threads = Some(n);
                }
            }
        }
    }
    if let Some(n) = threads {
        // ignore "already built" errors from repeated initialization
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.single_thread);
    let code = match cli.command {
        Command::Gen(args) => run_gen(args),
        Command::Train(args) => run_train(args, cli.single_thread),
        Command::Eval(args) => run_eval(args),
        Command::Verify(args) => run_verify(args),
        Command::GradCheck(args) => run_grad_check(args),
    };
    ExitCode::from(code as u8)
}

fn run_gen(args: GenArgs) -> i32 {
    if args.list {
        for name in PRESET_NAMES {
            println!("{name}");
        }
        return EXIT_OK;
    }
    let out = args.out.expect("clap enforces --out unless --list");
    match cmd_gen(
        args.preset.as_deref(),
        args.config.as_deref(),
        args.seed,
        &out,
    ) {
        Ok(g) => {
            println!(
                "wrote {} samples to {} (sha256 {})",
                g.samples,
                g.path.display(),
                g.checksum
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("gen failed: {e}");
            exit_code_for(&e)
        }
    }
}

fn run_train(args: TrainArgs, single_thread: bool) -> i32 {
    let cfg = match build_run_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("train configuration invalid: {e}");
            return exit_code_for(&e);
        }
    };
    match cmd_train(&cfg, single_thread) {
        Ok(out) => {
            let r = &out.report;
            for f in &r.fold_summaries {
                println!(
                    "fold {} test loss {:.6} {} {:.4}",
                    f.fold, f.test_loss, r.metric_name, f.test_metric
                );
            }
            println!(
                "{}: mean {:.4} +/- {:.4} over {} folds ({} params, {:.1}s)",
                r.metric_name,
                r.mean_test_metric,
                r.std_test_metric,
                r.fold_summaries.len().max(1),
                r.network.param_count(),
                r.wall_clock_secs
            );
            println!("checkpoint: {}", out.checkpoint_path.display());
            println!("metrics: {}", out.metrics_path.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("train failed: {e}");
            exit_code_for(&e)
        }
    }
}

fn build_run_config(args: TrainArgs) -> mvcnet_core::Result<RunConfig> {
    use mvcnet_core::Error;
    let mut cfg: RunConfig = if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("run config parse failed: {e}")))?
    } else {
        // defaults come from the preset when one is named
        let preset_defaults = match &args.preset {
            Some(name) => Some(preset(name)?),
            None => None,
        };
        let t = preset_defaults.as_ref().map(|p| p.train.clone());
        RunConfig {
            dataset: args.data.clone().unwrap_or_default(),
            preset: args.preset.clone(),
            network_spec: args.net_spec.clone(),
            epochs: t.as_ref().map_or(30, |t| t.epochs),
            lr: t.as_ref().map_or(0.005, |t| t.lr),
            batch_size: t.as_ref().map_or(10, |t| t.batch_size),
            folds: t.as_ref().map_or(10, |t| t.folds),
            seed: t.as_ref().map_or(0, |t| t.seed),
            out: args.out.clone().unwrap_or_else(|| PathBuf::from("run-out")),
        }
    };
    if let Some(d) = args.data {
        cfg.dataset = d;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(f) = args.folds {
        cfg.folds = f;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(o) = args.out {
        cfg.out = o;
    }
    Ok(cfg)
}

fn run_eval(args: EvalArgs) -> i32 {
    match cmd_eval(&args.checkpoint, &args.data) {
        Ok(out) => {
            println!(
                "loss {:.6} {} {:.4} ({} samples, {:.6}s/sample)",
                out.loss, out.metric_name, out.metric, out.samples, out.per_sample_secs
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("eval failed: {e}");
            exit_code_for(&e)
        }
    }
}

fn run_verify(args: VerifyArgs) -> i32 {
    if args.trials == 0 {
        eprintln!("warning: --trials 0 makes every property vacuous");
    }
    let manifold = match args.manifold {
        ManifoldArg::Both => ManifoldChoice::Both,
        ManifoldArg::Spd => ManifoldChoice::Spd,
        ManifoldArg::Sphere => ManifoldChoice::Sphere,
    };
    match cmd_verify(
        manifold,
        args.seed,
        args.trials,
        args.inject_fault,
        !args.skip_grad_checks,
    ) {
        Ok(results) => {
            let mut all_pass = true;
            for r in &results {
                println!("{}", r.line());
                all_pass &= r.passed;
            }
            if all_pass {
                println!(
                    "all {} properties passed (seed {})",
                    results.len(),
                    args.seed
                );
                EXIT_OK
            } else {
                eprintln!("property failure (seed {})", args.seed);
                EXIT_PROPERTY
            }
        }
        Err(e) => {
            eprintln!("verify aborted: {e}");
            exit_code_for(&e)
        }
    }
}

fn run_grad_check(args: GradCheckArgs) -> i32 {
    if args.coords == 0 {
        eprintln!("--coords must be >= 1");
        return EXIT_VALIDATION;
    }
    match cmd_grad_check(args.seed, args.coords) {
        Ok(results) => {
            let mut all_pass = true;
            for r in &results {
                println!("{}", r.line());
                all_pass &= r.passed;
            }
            if all_pass {
                EXIT_OK
            } else {
                EXIT_PROPERTY
            }
        }
        Err(e) => {
            eprintln!("grad-check aborted: {e}");
            exit_code_for(&e)
        }
    }
}
