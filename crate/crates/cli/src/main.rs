use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cognisim::backends::{BackendDescriptor, BackendFactory};
use cognisim::experiment::{self, ExperimentConfig, ExperimentError, ReportFormat};
use cognisim::persona::Difficulty;
use cognisim::prompts::PromptSet;

#[derive(Parser)]
#[command(name = "cognisim", version, about = "Run, score and inspect simulated counseling sessions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of sessions and write transcripts, metrics and analyses.
    Run(RunArgs),
    /// Render CDER / IDSS / CTRS tables from a batch output directory.
    Report {
        dir: PathBuf,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
    /// Print a transcript with its events and check it for consistency.
    Replay { transcript: PathBuf },
    /// Check every persona file in a directory.
    Validate { personas: PathBuf },
    /// Score high/low labeled transcripts with the judge and compare groups.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the configured presets (repeatable).
    #[arg(long)]
    preset: Vec<Difficulty>,
    #[arg(long)]
    personas: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Render the opening prompts of every cell and call nothing.
    #[arg(long)]
    dry_run: bool,
    /// Write scripted personas, scripts and an experiment.toml into DIR, then exit.
    #[arg(long, value_name = "DIR")]
    seed_fixtures: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Directory with `high/` and `low/` subdirectories.
    input: PathBuf,
    /// Experiment config whose `judge` backend is used.
    #[arg(long, required_unless_present = "judge_script")]
    config: Option<PathBuf>,
    /// JSON array of scripted judge replies, instead of a config.
    #[arg(long, conflicts_with = "config")]
    judge_script: Option<PathBuf>,
}

enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e.exit_code() {
            2 => Failure::Config(e.into()),
            _ => Failure::Run(e.into()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Run(args) => run(args),
        Command::Report { dir, format } => {
            print!("{}", experiment::report(&dir, format)?);
            Ok(0)
        }
        Command::Replay { transcript } => {
            let (dump, consistent) = experiment::replay(&transcript)?;
            print!("{dump}");
            Ok(if consistent { 0 } else { 1 })
        }
        Command::Validate { personas } => {
            let report = experiment::validate_personas(&personas)?;
            print!("{}", report.render());
            Ok(if report.all_passed() { 0 } else { 1 })
        }
        Command::Calibrate(args) => calibrate(args),
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let path = args
        .config
        .as_deref()
        .ok_or_else(|| Failure::Config(anyhow::anyhow!("`run` needs --config (or --seed-fixtures DIR)")))?;
    let mut config = ExperimentConfig::load(path)?;
    let cwd = Path::new(".");
    if !args.preset.is_empty() {
        config.presets = args.preset.clone();
    }
    if let Some(p) = &args.personas {
        config.personas_dir = cwd.join(p);
    }
    if let Some(p) = &args.out {
        config.output_dir = cwd.join(p);
    }
    if let Some(n) = args.parallelism {
        config.parallelism = n;
    }
    Ok(config)
}

fn run(args: RunArgs) -> Result<u8, Failure> {
    if let Some(dir) = &args.seed_fixtures {
        cognisim::fixtures::seed_fixtures(dir)
            .map_err(|e| Failure::Run(anyhow::anyhow!("writing fixtures to {}: {e}", dir.display())))?;
        println!("wrote fixtures to {}; run with --config {}", dir.display(), dir.join("experiment.toml").display());
        return Ok(0);
    }
    let config = load_config(&args)?;
    if args.dry_run {
        let (items, failures) = experiment::dry_run(&config)?;
        let mut leaked = false;
        for item in &items {
            println!("=== {} / {} / {} ===", item.therapist, item.preset, item.persona);
            println!("--- therapist prompt ---\n{}", item.therapist_prompt);
            println!("--- client prompt ---\n{}", item.client_prompt);
            if !item.leaks.is_empty() {
                leaked = true;
                println!("!!! masked text in therapist prompt: {:?}", item.leaks);
            }
            println!();
        }
        for f in &failures {
            eprintln!("persona {} skipped: {}", f.file, f.error);
        }
        return Ok(if leaked || !failures.is_empty() { 1 } else { 0 });
    }
    let summary = experiment::run_batch(&config)?;
    for f in &summary.persona_failures {
        eprintln!("persona {} skipped: {}", f.file, f.error);
    }
    for a in &summary.aborted {
        eprintln!("aborted: {a}");
    }
    println!(
        "{} sessions, {} aborted, {} persona failures; outputs in {}",
        summary.sessions,
        summary.aborted.len(),
        summary.persona_failures.len(),
        config.output_dir.display()
    );
    Ok(summary.exit_code() as u8)
}

fn calibrate(args: CalibrateArgs) -> Result<u8, Failure> {
    let (judge, threshold, prompts) = match (&args.config, &args.judge_script) {
        (Some(path), _) => {
            let config = ExperimentConfig::load(path)?;
            let prompts = config.prompt_set()?;
            (config.judge.clone(), config.score_threshold, prompts)
        }
        (None, Some(script)) => {
            let mut d = BackendDescriptor::scripted(Vec::<String>::new());
            d.script_file = Some(script.clone());
            (d, cognisim::mediator::MediatorPolicy::DEFAULT_THRESHOLD, PromptSet::default())
        }
        (None, None) => unreachable!("clap requires one of --config / --judge-script"),
    };
    let report = experiment::calibrate(&args.input, &judge, threshold, &prompts, &BackendFactory::default())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Run(e.into()))?;
    println!("{json}");
    Ok(if report.pass { 0 } else { 1 })
}
