use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semid_core::experiment::{
    check_complete, emit_report, read_json, run_resolution_harness, ExperimentConfig, Pipeline, ReportFormat, Stage,
};
use semid_core::metrics::EvalReport;
use semid_core::{Error, Result};

/// Semantic-ID generative recommendation experiments.
#[derive(Debug, Parser)]
#[command(name = "semid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Runs a single trial with this seed instead of the configured seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// json, csv or table.
    #[arg(long, global = true, default_value = "table")]
    format: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load interactions and build leave-one-out splits and training instances.
    Ingest,
    /// Render item descriptions and encode them (rendered modality sources).
    Render,
    /// Fit quantizers and assign Semantic IDs.
    Tokenize,
    /// Build the vocabulary and per-item token sequences.
    Fuse,
    /// Train the generator, after alignment pre-training when enabled.
    Train,
    /// Beam-search every test user and aggregate the metrics.
    Eval,
    /// Modality gap, anisotropy and 2D projection of the two modalities.
    Geometry,
    /// The full pipeline.
    Run,
    /// Repeat the experiment at several rendering resolutions.
    HarnessResolution {
        /// Comma-separated, e.g. `1024,256`.
        #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 256])]
        resolutions: Vec<usize>,
    },
    /// Print the report of a finished run.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.eval.seeds = vec![s];
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> Result<PathBuf> {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `output_dir`".into()))
}

fn print_report(out: &Path, format: ReportFormat) -> Result<()> {
    check_complete(out)?;
    let report: EvalReport = read_json(&out.join("report.json"))?;
    print!("{}", emit_report(&report, format)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let format: ReportFormat = cli.format.parse()?;
    if let Command::Report = cli.command {
        let cfg = match &cli.config {
            Some(_) => Some(load_config(cli)?),
            None => None,
        };
        return print_report(&out_dir(cli, cfg.as_ref())?, format);
    }
    let cfg = load_config(cli)?;
    let out = out_dir(cli, Some(&cfg))?;
    let stage = match &cli.command {
        Command::Ingest => Stage::Ingest,
        Command::Render => {
            if cfg.render_source().is_none() {
                return Err(Error::Config("no `render` modality source in the config".into()));
            }
            Stage::Embed
        }
        Command::Tokenize => Stage::Tokenize,
        Command::Fuse => Stage::Fuse,
        Command::Train => Stage::Train,
        Command::Eval | Command::Run => Stage::Eval,
        Command::Geometry => {
            let g = Pipeline::new(cfg, Some(out.clone()))?.geometry()?;
            println!(
                "pairs {}  modality_gap {:.6}  anisotropy {:.6} / {:.6}  ({})",
                g.pairs,
                g.modality_gap,
                g.anisotropy_a,
                g.anisotropy_b,
                out.join("geometry.json").display()
            );
            return Ok(());
        }
        Command::HarnessResolution { resolutions } => {
            let h = run_resolution_harness(&cfg, resolutions, &out)?;
            print!("{}", h.emit(format)?);
            return Ok(());
        }
        Command::Report => unreachable!("handled above"),
    };
    Pipeline::new(cfg, Some(out.clone()))?.run(stage)?;
    if stage == Stage::Eval {
        print_report(&out, format)?;
    } else {
        eprintln!("{} complete: {}", stage.name(), out.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
