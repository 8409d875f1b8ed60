use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use spkadapt::harness::{
    self, adapt_checkpoint, bench, compare, evaluate_checkpoint, gradcheck_all, load_dataset, single_report,
    sweep_code_size, sweep_trend, train_grid, write_numbered, write_report, DataSource, ExperimentSpec, GradientBug,
    MetricsReport,
};
use spkadapt::model::Network;
use spkadapt::synthgen::{generate, GenConfig, Split};

/// Exit status for configuration and input problems.
const EXIT_VALIDATION: u8 = 1;
/// Exit status for failures while running.
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "spkadapt", version, about = "Speaker-adaptive network experiments on synthetic data")]
struct Cli {
    /// Worker threads for grid commands (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-speaker dataset.
    GenData {
        /// Generator config (JSON, every field required).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train multi-speaker models and save checkpoints.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Adapt a trained checkpoint to the unseen speakers.
    Adapt {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Per-speaker RMSE of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Scaling-code size sweep.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Every strategy, mode and seed on one dataset, with adaptation.
    Compare {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Finite-difference check of every strategy and mode.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one speaker gradient entry; the check must then fail.
        #[arg(long)]
        inject_bug: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward-pass timing per strategy.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 10_000)]
        frames: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment spec (JSON); omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for reports and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, replacing the spec's list.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
}

impl RunArgs {
    fn spec(&self) -> anyhow::Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => {
                let mut spec = input(ExperimentSpec::load(path))?;
                // Dataset paths are relative to the spec file.
                if let DataSource::Path(p) = &mut spec.data {
                    if p.is_relative() {
                        *p = path.parent().unwrap_or(Path::new("")).join(&*p);
                    }
                }
                spec
            }
            None => ExperimentSpec::default(),
        };
        if !self.seed.is_empty() {
            spec.seeds = self.seed.clone();
        }
        spec.validate()?;
        Ok(spec)
    }

    fn out(&self) -> anyhow::Result<&Path> {
        self.out.as_deref().context("--out is required for this command")
    }
}

fn emit(report: &MetricsReport, out: Option<&Path>) -> anyhow::Result<()> {
    print!("{}", report.to_table());
    if let Some(dir) = out {
        for path in write_report(dir, report)? {
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::GenData { config, out, seed } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg: GenConfig = serde_json::from_str(&text)
                .map_err(|e| spkadapt::Error::Parse { path: config.clone(), reason: e.to_string() })?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let data = generate(&cfg)?;
            let hash = data.save(&out)?;
            println!("sha256 {hash}");
            for ((id, split), n) in data.split_counts() {
                println!("{id} {} {n}", split.name());
            }
        }
        Command::Train { run } => {
            let spec = run.spec()?;
            let out = run.out()?;
            let dir = out.join("checkpoints");
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let (data, hash) = input(load_dataset(&spec.data))?;
            let report = train_grid(&spec, &data, &hash, Some(&dir))?;
            emit(&report, Some(out))?;
            return Ok(report.cells.iter().all(|c| c.is_ok()));
        }
        Command::Adapt { run, model } => {
            let spec = run.spec()?;
            let net = input(Network::load(&model))?;
            let seed = if run.seed.is_empty() { net.config().seed } else { spec.seeds[0] };
            let stem = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
            let (data, hash) = input(load_dataset(&spec.data))?;
            let dir = run.out.as_ref().map(|o| o.join("checkpoints"));
            if let Some(dir) = &dir {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let cell = adapt_checkpoint(&net, &stem, &data, &spec, seed, dir.as_deref())?;
            emit(&single_report("adapt", &data, &hash, &spec, vec![cell]), run.out.as_deref())?;
        }
        Command::Eval { run, model, split } => {
            let spec = run.spec()?;
            let net = input(Network::load(&model))?;
            let (data, _) = input(load_dataset(&spec.data))?;
            let eval = evaluate_checkpoint(&net, &data, split)?;
            for (id, rmse) in &eval.per_speaker {
                println!("{id}\t{rmse:.6}");
            }
            println!("mean\t{:.6}", eval.mean);
            if let Some(dir) = &run.out {
                let json = serde_json::to_string_pretty(&eval)?;
                for path in write_numbered(dir, &format!("eval-{}", split.name()), &[("json", json)])? {
                    eprintln!("wrote {}", path.display());
                }
            }
        }
        Command::Sweep { run } => {
            let spec = run.spec()?;
            let (data, hash) = input(load_dataset(&spec.data))?;
            let report = sweep_code_size(&spec, &data, &hash)?;
            emit(&report, run.out.as_deref())?;
            let (points, rho) = sweep_trend(&report);
            for (p, rmse) in points {
                println!("p={p}\tmedian valid rmse {rmse:.6}");
            }
            match rho {
                Some(r) => println!("spearman {r:.3}"),
                None => println!("spearman undefined"),
            }
            return Ok(report.cells.iter().all(|c| c.is_ok()));
        }
        Command::Compare { run } => {
            let spec = run.spec()?;
            let (data, hash) = input(load_dataset(&spec.data))?;
            let report = compare(&spec, &data, &hash)?;
            emit(&report, run.out.as_deref())?;
            return Ok(report.cells.iter().all(|c| c.is_ok()));
        }
        Command::Gradcheck { seed, inject_bug, out } => {
            let bug = if inject_bug { GradientBug::NegateSpeakerEntry } else { GradientBug::None };
            let entries = gradcheck_all(seed, bug)?;
            println!("{:<14} {:<10} {:>10} {:>10} {:>10}  result", "strategy", "mode", "shared", "adapters", "speaker");
            for e in &entries {
                let group = |g| e.report.group(g).map_or("-".to_string(), |g| format!("{:.2e}", g.max_rel_error));
                println!(
                    "{:<14} {:<10} {:>10} {:>10} {:>10}  {}",
                    e.strategy.to_string(),
                    e.mode.to_string(),
                    group(spkadapt::training::ParamGroup::Shared),
                    group(spkadapt::training::ParamGroup::Adapters),
                    group(spkadapt::training::ParamGroup::Speaker),
                    if e.passed { "ok" } else { "FAIL" }
                );
            }
            if let Some(dir) = out {
                let json = serde_json::to_string_pretty(&entries)?;
                for path in write_numbered(&dir, "gradcheck", &[("json", json)])? {
                    eprintln!("wrote {}", path.display());
                }
            }
            let failed = entries.iter().filter(|e| !e.passed).count();
            if failed > 0 {
                bail!(GradcheckFailed(failed));
            }
        }
        Command::Bench { run, frames } => {
            let spec = run.spec()?;
            let data = match &spec.data {
                DataSource::Generate(cfg) => cfg.clone(),
                DataSource::Path(_) => input(load_dataset(&spec.data))?.0.config,
            };
            let entries = bench(&spec, &data, frames)?;
            println!("{:<24} {:<10} {:>12}", "strategy", "mode", "us/frame");
            for e in &entries {
                println!("{:<24} {:<10} {:>12.3}", harness::strategy_label(&e.strategy), e.mode.to_string(), e.microseconds_per_frame);
            }
            if let Some(dir) = &run.out {
                let json = serde_json::to_string_pretty(&entries)?;
                write_numbered(dir, "bench", &[("json", json)])?;
            }
        }
    }
    Ok(true)
}

/// A config, checkpoint or dataset that could not be read.
#[derive(Debug)]
struct BadInput(spkadapt::Error);

impl std::fmt::Display for BadInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for BadInput {}

fn input<T>(r: spkadapt::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| BadInput(e).into())
}

#[derive(Debug)]
struct GradcheckFailed(usize);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient checks exceeded the tolerance", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<GradcheckFailed>().is_some() || err.downcast_ref::<BadInput>().is_some() {
        return EXIT_VALIDATION;
    }
    match err.chain().find_map(|e| e.downcast_ref::<spkadapt::Error>()) {
        Some(e) if e.is_validation() => EXIT_VALIDATION,
        Some(_) => EXIT_RUNTIME,
        // Anything else surfaced before a run started: missing flags,
        // unreadable config files, thread pool setup.
        None => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_VALIDATION) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some cells failed; see the report");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
