use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::Utc;
use clap::{Parser, Subcommand};

use econlab::runner::{
    analyze_transcripts, estimate, first_prompt, fixture_csv, run_experiment, write_run, Analysis, EstimateModel,
    EstimateSource, FixtureKind, RunError, RunOptions,
};
use econlab::storage::{load_config, AgentSpec, ExperimentConfig};

#[derive(Parser)]
#[command(name = "econlab", version, about = "Behavioral-economics experiments with scripted and LLM agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's output_dir, else runs/<experiment>-<seed>).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Validate the config and print the first prompt without running anything.
        #[arg(long)]
        dry_run: bool,
        /// Override the remote model's sampling temperature.
        #[arg(long)]
        temperature: Option<f64>,
        /// Override the number of replicates.
        #[arg(long)]
        replicates: Option<u32>,
        /// Sessions run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Fit a choice model to the reconstructed fixture ("table2") or a transcript file.
    Estimate {
        source: String,
        /// cr, cr_group, pos_recip or neg_recip
        model: EstimateModel,
        #[arg(long, default_value = "results")]
        out_dir: PathBuf,
    },
    /// Compute a metrics bundle from a transcript file.
    Analyze {
        transcripts: PathBuf,
        /// learning_metrics, image_metrics, swm, reciprocity_contrast, motivations or transfers
        analysis: Analysis,
        #[arg(long, default_value = "results")]
        out_dir: PathBuf,
    },
    /// Print a built-in fixture set as CSV.
    Fixtures {
        /// games, rates or reconstructed
        what: FixtureKind,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
            dry_run,
            temperature,
            replicates,
            parallel,
        } => cmd_run(&config, seed, out_dir, dry_run, temperature, replicates, parallel),
        Command::Estimate { source, model, out_dir } => cmd_estimate(&source, model, &out_dir),
        Command::Analyze {
            transcripts,
            analysis,
            out_dir,
        } => analyze_transcripts(&transcripts, analysis, &out_dir).map(|s| print!("{s}")),
        Command::Fixtures { what } => {
            print!("{}", fixture_csv(what));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn apply_overrides(
    config: &mut ExperimentConfig,
    seed: Option<u64>,
    temperature: Option<f64>,
    replicates: Option<u32>,
) -> Vec<String> {
    let mut applied = Vec::new();
    if let Some(s) = seed {
        config.seed = s;
        applied.push(format!("seed={s}"));
    }
    if let Some(r) = replicates {
        config.replicates = r;
        applied.push(format!("replicates={r}"));
    }
    if let Some(t) = temperature {
        match &mut config.agent {
            AgentSpec::Remote { model } => model.temperature = t,
            AgentSpec::Scripted { .. } => eprintln!("note: --temperature has no effect on scripted agents"),
        }
        applied.push(format!("temperature={t}"));
    }
    applied
}

fn cmd_run(
    path: &Path,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    dry_run: bool,
    temperature: Option<f64>,
    replicates: Option<u32>,
    parallel: usize,
) -> Result<(), RunError> {
    let started_at = Utc::now();
    let mut config = load_config(path).map_err(RunError::Config)?;
    let overrides = apply_overrides(&mut config, seed, temperature, replicates);
    config.validate().map_err(RunError::Config)?;

    if dry_run {
        let prompt = first_prompt(&config)?;
        println!("config ok: {} x{} (seed {})", config.experiment, config.replicates, config.seed);
        println!("--- system ---\n{}\n--- user ---\n{}", prompt.system_text, prompt.user_text);
        return Ok(());
    }

    let out_dir = out_dir
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", config.experiment, config.seed)));
    let progress = |done: usize, total: usize| {
        if done == total || done.is_multiple_of(10) {
            eprintln!("[{done}/{total}] sessions");
        }
    };
    let opts = RunOptions {
        parallel,
        progress: Some(&progress),
    };
    let mut output = run_experiment(&config, &opts)?;
    write_run(&mut output, &config, overrides, started_at, &out_dir)?;
    print!("{}", output.summary);
    Ok(())
}

fn cmd_estimate(source: &str, model: EstimateModel, out_dir: &Path) -> Result<(), RunError> {
    let (tables, summary) = estimate(&EstimateSource::parse(source), model, out_dir)?;
    for t in &tables {
        println!("{t}");
    }
    print!("{summary}");
    Ok(())
}
