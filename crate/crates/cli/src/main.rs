use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use segadapt::checkpoint::Checkpoint;
use segadapt::config::{AblateMode, ExperimentConfig};
use segadapt::data::Dataset;
use segadapt::eval::evaluate;
use segadapt::sweep;
use segadapt::trainer::{fit, load_inference, load_teacher_inference, FitOptions, Trainer, CHECKPOINT_FILE};
use segadapt::verify::{run_suite, Fault, SuiteOptions};
use segadapt::{Error, BUILD_VERSION};

/// Domain-adaptive segmentation with pixel- and patch-wise contrast.
#[derive(Parser, Debug)]
#[command(name = "segadapt", version = BUILD_VERSION)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// TOML config file with dotted `section.field` keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.lr=5e-4`. Repeatable;
    /// applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the paired source/target benchmark.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Allow writing into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        iterations: Option<u64>,
        /// Disable pixel-wise contrast.
        #[arg(long)]
        no_pixel: bool,
        /// Disable patch-wise contrast.
        #[arg(long)]
        no_patch: bool,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::TargetVal)]
        split: Split,
        /// Which weights of the checkpoint to evaluate.
        #[arg(long, value_enum, default_value_t = Weights::Student)]
        weights: Weights,
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the ablation sweep.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Refuse to start if the estimated time exceeds this many minutes.
        #[arg(long)]
        budget_minutes: Option<f64>,
    },
    /// Run the loss-oracle, gradient and correspondence checks.
    Gradcheck {
        /// Tolerance for both the oracle (absolute) and gradient (relative) checks.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Dataset directory (default: paths.data_dir).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory (default: paths.run_dir).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Allow reusing a non-empty run directory.
    #[arg(long)]
    force: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    TargetVal,
    TargetTrain,
    Source,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Weights {
    Student,
    /// The EMA teacher.
    Teacher,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    Contrast,
    CropSize,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum FaultArg {
    PatchGradientSign,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Validation(anyhow::Error),
    Verification(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Validation(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Validation(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { cfg, out, seed, force } => gen_data(&cfg, &out, seed, force),
        Command::Train { cfg, run, iterations, no_pixel, no_patch, resume } => {
            train(&cfg, &run, iterations, no_pixel, no_patch, resume)
        }
        Command::Eval { checkpoint, data, split, weights, json } => {
            eval(&checkpoint, &data, split, weights, json.as_deref())
        }
        Command::Ablate { cfg, run, iterations, seeds, mode, budget_minutes } => {
            ablate(&cfg, &run, iterations, seeds, mode, budget_minutes)
        }
        Command::Gradcheck { tol, seed, inject_fault } => gradcheck(tol, seed, inject_fault),
    }
}

fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    Ok(ExperimentConfig::resolve(args.config.as_deref(), &args.set)?)
}

fn ensure_empty_dir(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.next().is_some();
        if non_empty && !force {
            return Err(Failure::Validation(anyhow::anyhow!(
                "{} exists and is not empty; pass --force to reuse it",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

/// Echo the resolved config, build version and seed into `dir`.
fn write_run_info(dir: &Path, cfg: &ExperimentConfig, command: &str) -> Result<(), Failure> {
    fs::write(dir.join("config.toml"), cfg.to_toml()?).context("writing config.toml")?;
    let info = serde_json::json!({
        "command": command,
        "version": BUILD_VERSION,
        "seed": cfg.train.seed,
        "data_seed": cfg.data.seed,
        "args": std::env::args().collect::<Vec<_>>(),
    });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&info).context("encoding run.json")?)
        .context("writing run.json")?;
    Ok(())
}

fn gen_data(args: &ConfigArgs, out: &Path, seed: Option<u64>, force: bool) -> Result<(), Failure> {
    let mut cfg = resolve(args)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    ensure_empty_dir(out, force)?;
    log::info!(
        "generating {} source + {} target samples ({}x{}, {} classes) into {}",
        cfg.data.source_count,
        cfg.data.target_count,
        cfg.data.height,
        cfg.data.width,
        cfg.data.classes,
        out.display()
    );
    let ds = Dataset::generate(&cfg.data)?;
    ds.save(out)?;
    println!("wrote {}", out.join(segadapt::data::MANIFEST).display());
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    Ok(Dataset::load(path).map_err(|e| anyhow::anyhow!("loading dataset {}: {e}", path.display()))?)
}

fn apply_run_args(cfg: &mut ExperimentConfig, run: &RunArgs) {
    if let Some(d) = &run.data {
        cfg.paths.data_dir = d.clone();
    }
    if let Some(d) = &run.run_dir {
        cfg.paths.run_dir = d.clone();
    }
    if let Some(s) = run.seed {
        cfg.train.seed = s;
    }
}

fn train(
    args: &ConfigArgs,
    run: &RunArgs,
    iterations: Option<u64>,
    no_pixel: bool,
    no_patch: bool,
    resume: bool,
) -> Result<(), Failure> {
    let mut cfg = resolve(args)?;
    apply_run_args(&mut cfg, run);
    if let Some(n) = iterations {
        cfg.train.iterations = n;
    }
    cfg.train.enable_pixel &= !no_pixel;
    cfg.train.enable_patch &= !no_patch;
    cfg.validate()?;
    let data = load_data(&cfg.paths.data_dir)?;
    if data.config.classes != cfg.data.classes {
        log::warn!("dataset has {} classes; config says {}; using the dataset", data.config.classes, cfg.data.classes);
        cfg.data = data.config.clone();
    }
    let dir = cfg.paths.run_dir.clone();
    let mut trainer = if resume {
        let c = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
        Trainer::from_checkpoint(&c, cfg.train.clone(), cfg.contrast.clone())?
    } else {
        ensure_empty_dir(&dir, run.force)?;
        Trainer::new(cfg.train.clone(), cfg.contrast.clone(), &cfg.model, data.classes())?
    };
    write_run_info(&dir, &cfg, "train")?;
    log::info!(
        "training {} parameters for {} iterations (pixel={}, patch={}) in {}",
        trainer.bundle.params().iter().map(|p| p.len()).sum::<usize>(),
        cfg.train.iterations,
        cfg.train.enable_pixel,
        cfg.train.enable_patch,
        dir.display()
    );
    let opts = FitOptions {
        run_dir: dir.clone(),
        eval_every: cfg.eval.every,
        checkpoint_every: cfg.eval.checkpoint_every,
        config: serde_json::to_value(&cfg).context("encoding config")?,
    };
    let summary = fit(&mut trainer, &data, &opts)?;
    println!("{}", summary.report);
    println!("target val mIoU {:.2}", 100.0 * summary.report.miou);
    println!("checkpoint {}", summary.checkpoint.display());
    Ok(())
}

fn eval(checkpoint: &Path, data_dir: &Path, split: Split, weights: Weights, json: Option<&Path>) -> Result<(), Failure> {
    let c = Checkpoint::load(checkpoint)?;
    let net = match weights {
        Weights::Student => load_inference(&c)?,
        Weights::Teacher => load_teacher_inference(&c)?,
    };
    let data = load_data(data_dir)?;
    if data.classes() != net.classes {
        return Err(Failure::Validation(anyhow::anyhow!(
            "checkpoint has {} classes, dataset has {}",
            net.classes,
            data.classes()
        )));
    }
    let (images, labels, name) = match split {
        Split::TargetVal => {
            let r = data.target_val_range();
            (&data.target.images[r.clone()], &data.target.labels[r], "target-val")
        }
        Split::TargetTrain => {
            let r = data.target_train_range();
            (&data.target.images[r.clone()], &data.target.labels[r], "target-train")
        }
        Split::Source => (&data.source.images[..], &data.source.labels[..], "source"),
    };
    let report = evaluate(&net, images, labels)?.miou()?;
    let record = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "iteration": c.header.iteration,
        "split": name,
        "weights": format!("{weights:?}").to_lowercase(),
        "miou": report.miou,
        "per_class_iou": report.per_class,
        "pixel_accuracy": report.pixel_accuracy,
        "pixels": report.pixels,
    });
    let text = serde_json::to_string_pretty(&record).context("encoding report")?;
    if let Some(p) = json {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{report}");
    println!("{text}");
    Ok(())
}

fn ablate(
    args: &ConfigArgs,
    run: &RunArgs,
    iterations: Option<u64>,
    seeds: Option<usize>,
    mode: Option<ModeArg>,
    budget: Option<f64>,
) -> Result<(), Failure> {
    let mut cfg = resolve(args)?;
    apply_run_args(&mut cfg, run);
    if let Some(n) = iterations {
        cfg.train.iterations = n;
    }
    if let Some(s) = seeds {
        cfg.ablate.seeds = s;
    }
    if let Some(m) = mode {
        cfg.ablate.mode = match m {
            ModeArg::Contrast => AblateMode::Contrast,
            ModeArg::CropSize => AblateMode::CropSize,
        };
    }
    if let Some(b) = budget {
        cfg.ablate.time_budget_minutes = b;
    }
    cfg.validate()?;
    let data = load_data(&cfg.paths.data_dir)?;
    let dir = cfg.paths.run_dir.clone();
    let step = sweep::measure_step_seconds(&cfg, &data)?;
    let estimate = sweep::estimate_seconds(&cfg, step);
    let runs = sweep::variants(&cfg).len() * cfg.ablate.seeds;
    log::info!("{runs} runs x {} iterations at {step:.3} s/step: about {:.1} min", cfg.train.iterations, estimate / 60.0);
    if estimate > 60.0 * cfg.ablate.time_budget_minutes {
        return Err(Error::Budget(format!(
            "estimated {:.1} min for {runs} runs exceeds the {:.1} min budget (raise ablate.time_budget_minutes or --budget-minutes)",
            estimate / 60.0,
            cfg.ablate.time_budget_minutes
        ))
        .into());
    }
    ensure_empty_dir(&dir, run.force)?;
    write_run_info(&dir, &cfg, "ablate")?;
    let table = sweep::ablate(&cfg, &data, &dir, |r| {
        log::info!("{} seed {}: mIoU {:.2} ({:.0} s)", r.variant, r.seed, 100.0 * r.miou, r.seconds);
    })?;
    fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&table).context("encoding table")?)
        .context("writing ablation.json")?;
    fs::write(dir.join("ablation.md"), format!("{table}\n")).context("writing ablation.md")?;
    println!("{table}");
    Ok(())
}

fn gradcheck(tol: Option<f64>, seed: Option<u64>, fault: Option<FaultArg>) -> Result<(), Failure> {
    let mut opts = SuiteOptions::default();
    if let Some(t) = tol {
        if !(t > 0.0) {
            return Err(Failure::Validation(anyhow::anyhow!("--tol must be positive")));
        }
        opts.oracle_tol = t;
        opts.grad_tol = t;
    }
    if let Some(s) = seed {
        opts.seed = s;
    }
    opts.fault = fault.map(|f| match f {
        FaultArg::PatchGradientSign => Fault::PatchGradientSign,
    });
    let results = run_suite(&opts)?;
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::Verification(failed.join(", ")))
    }
}
