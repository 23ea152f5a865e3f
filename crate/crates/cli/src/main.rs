mod demo;
mod render;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use coder_consensus::analysis::{analyze, AnalysisOptions, MissingPolicy, PairingUnit, DEFAULT_ALPHA};
use coder_consensus::backend::{BackendError, ChatBackend, HttpBackend, MockBackend, MockScript};
use coder_consensus::deliberation::DeliberationError;
use coder_consensus::experiment::{
    build_matrix, read_traces, run_experiment, Dataset, ExperimentConfig, RunError, RunOptions,
};
use coder_consensus::extraction::AliasTable;
use coder_consensus::prompting::templates;
use coder_consensus::{load_codebook, load_ground_truth, load_transcript, Codebook, Extractor};

use settings::{BackendChoice, CommonArgs, Settings};

/// Validation, data or analysis failure.
const EXIT_INVALID: u8 = 1;
/// The model endpoint could not be reached or did not answer.
const EXIT_TRANSPORT: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "coder-consensus", version, about = "Multi-agent LLM deductive coding with deliberation and arbitration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check codebook, transcript, ground truth, endpoint and model availability
    Validate(CommonArgs),
    /// Run the experiment matrix and write decisions, traces and manifest
    Run(CommonArgs),
    /// Compute agreement, consensus frequencies, contrasts and exports from a decision table
    Analyze {
        /// Decision table written by `run`
        table: PathBuf,
        /// Output directory (defaults to the table's directory)
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// count_as_disagree (default) or exclude
        #[arg(long)]
        missing_policy: Option<String>,
        /// Unit of the paired contrasts: segment (default) or config
        #[arg(long, default_value = "segment")]
        pairing_unit: String,
        /// FDR level for flagging contrasts
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Print one segment's deliberation from a trace file
    Trace {
        /// Trace file (traces/<config>.jsonl)
        trace_file: Option<PathBuf>,
        /// Segment id to print
        segment_id: Option<usize>,
        /// Print the four prompt templates and exit
        #[arg(long)]
        show_templates: bool,
    },
    /// Run a scripted offline scenario with malformed model replies
    MockDemo {
        /// Also write the run artifacts here
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// An error together with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = if is_transport(&error) { EXIT_TRANSPORT } else { EXIT_INVALID };
        Failure { code, error }
    }
}

fn is_transport(error: &anyhow::Error) -> bool {
    error.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<BackendError>(),
            Some(BackendError::Transport { .. } | BackendError::Timeout { .. })
        ) || matches!(
            cause.downcast_ref::<DeliberationError>(),
            Some(DeliberationError::Transport { .. })
        )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate(args) => cmd_validate(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Analyze {
            table,
            out_dir,
            missing_policy,
            pairing_unit,
            alpha,
        } => cmd_analyze(&table, out_dir, missing_policy, &pairing_unit, alpha),
        Command::Trace {
            trace_file,
            segment_id,
            show_templates,
        } => cmd_trace(trace_file, segment_id, show_templates),
        Command::MockDemo { out_dir } => cmd_mock_demo(out_dir),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn make_backend(settings: &Settings, codebook: &Codebook) -> Result<Box<dyn ChatBackend>> {
    Ok(match settings.backend {
        BackendChoice::Http => Box::new(HttpBackend::new(settings.http.clone())?),
        BackendChoice::Mock => {
            let script = match &settings.mock_script {
                Some(path) => MockScript::load(path)?,
                None => MockScript::synthetic(settings.seed.unwrap_or(0)),
            };
            Box::new(MockBackend::new(script, codebook.names().map(String::from).collect()))
        }
    })
}

fn aliases(settings: &Settings) -> Result<AliasTable> {
    Ok(match &settings.alias_file {
        Some(path) => AliasTable::load_overlay(path)?,
        None => AliasTable::builtin(),
    })
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| anyhow!("no {what} given; pass {flag} or set it in the config file"))
}

fn load_dataset(settings: &Settings) -> Result<Dataset> {
    let codebook = load_codebook(&settings.codebook)?;
    let segments = load_transcript(required(&settings.transcript, "transcript", "--transcript")?)?;
    let truth = load_ground_truth(
        required(&settings.ground_truth, "ground truth", "--ground-truth")?,
        &codebook,
        &segments,
    )?;
    Ok(Dataset::new(codebook, segments, truth)?)
}

fn matrix(settings: &Settings) -> Result<Vec<ExperimentConfig>> {
    Ok(build_matrix(&settings.models, &settings.temperatures, &settings.pairings)?)
}

struct Report {
    failures: usize,
}

impl Report {
    fn check<T>(&mut self, label: &str, hint: &str, result: Result<T>) -> Option<T> {
        match result {
            Ok(v) => {
                println!("[ok]   {label}");
                Some(v)
            }
            Err(e) => {
                self.failures += 1;
                println!("[FAIL] {label}: {e:#}");
                println!("       hint: {hint}");
                None
            }
        }
    }
}

fn cmd_validate(args: &CommonArgs) -> Result<u8, Failure> {
    let settings = Settings::resolve(args)?;
    let mut report = Report { failures: 0 };
    let codebook = report.check(
        &format!("codebook {}", settings.codebook.display()),
        "use \"builtin\" or a TOML file with [[category]] name/definition/examples entries",
        load_codebook(&settings.codebook).map_err(Into::into),
    );
    let segments = report.check(
        "transcript",
        "CSV with columns segment_id,transcript_id,speaker,text; segment ids count from 0 in file order",
        required(&settings.transcript, "transcript", "--transcript")
            .and_then(|p| Ok(load_transcript(p)?)),
    );
    if let (Some(cb), Some(segs)) = (&codebook, &segments) {
        report.check(
            "ground truth",
            "CSV with segment_id then one 0/1 column per codebook category, one row per segment",
            required(&settings.ground_truth, "ground truth", "--ground-truth")
                .and_then(|p| Ok(load_ground_truth(p, cb, segs)?))
                .map(|rows| rows.len()),
        );
    }
    report.check(
        "alias table",
        "TOML file with an [aliases] table mapping variant label -> category name",
        aliases(&settings),
    );
    report.check(
        "experiment matrix",
        "temperatures in [0, 1] without repeats; pairings like bold-empathetic without repeats",
        matrix(&settings).map(|m| m.len()),
    );
    if let Some(cb) = &codebook {
        let backend = report.check(
            &format!("backend {:?} at {}", settings.backend, settings.http.base_url),
            "base_url must be an http(s) URL such as http://localhost:11434",
            make_backend(&settings, cb),
        );
        if let Some(backend) = backend {
            for model in &settings.models {
                report.check(
                    &format!("model {model} served"),
                    "start the server (ollama serve), check --base-url, and pull the model",
                    backend.probe(model).map_err(Into::into),
                );
            }
        }
    }
    if report.failures == 0 {
        println!("all checks passed");
        Ok(0)
    } else {
        println!("{} check(s) failed", report.failures);
        Ok(EXIT_INVALID)
    }
}

fn cmd_run(args: &CommonArgs) -> Result<u8, Failure> {
    let settings = Settings::resolve(args)?;
    let dataset = load_dataset(&settings)?;
    let extractor = Extractor::new(&dataset.codebook, &aliases(&settings)?);
    let configs = matrix(&settings)?;
    let backend = make_backend(&settings, &dataset.codebook)?;
    for model in &settings.models {
        backend
            .probe(model)
            .with_context(|| format!("checking that {model} is served"))?;
    }
    let options = RunOptions {
        max_rounds: settings.max_rounds,
        history_window: settings.history_window,
        seed: settings.seed,
        workers: settings.workers,
        out_dir: Some(settings.out_dir.clone()),
        resume: settings.resume,
        config_limit: settings.max_configs,
    };
    info!(
        "{} configuration(s) x {} segment(s) -> {}",
        configs.len(),
        dataset.segments.len(),
        settings.out_dir.display()
    );
    let output = run_experiment(&configs, &dataset, backend.as_ref(), &extractor, &options)?;
    println!(
        "executed {} configuration(s), skipped {} already complete; {} decision rows in {}",
        output.executed.len(),
        output.skipped.len(),
        output.records.len(),
        settings.out_dir.join("decisions.csv").display()
    );
    if output.is_complete() {
        return Ok(0);
    }
    let pending = output.incomplete();
    println!(
        "run incomplete: {} configuration(s) not finished ({} failed segment(s)); rerun with --resume",
        pending.len(),
        output.failed_segments
    );
    Ok(EXIT_TRANSPORT)
}

fn cmd_analyze(
    table: &Path,
    out_dir: Option<PathBuf>,
    missing_policy: Option<String>,
    pairing_unit: &str,
    alpha: f64,
) -> Result<u8, Failure> {
    let policy: MissingPolicy = match missing_policy {
        Some(s) => s.parse().map_err(anyhow::Error::msg)?,
        None => MissingPolicy::default(),
    };
    let unit: PairingUnit = pairing_unit.parse().map_err(anyhow::Error::msg)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(anyhow!("alpha must lie strictly between 0 and 1").into());
    }
    let out_dir = out_dir.unwrap_or_else(|| table.parent().map(Path::to_path_buf).unwrap_or_default());
    let options = AnalysisOptions {
        policy,
        unit,
        alpha,
        ..AnalysisOptions::default()
    };
    let summary = analyze(table, &out_dir, &options)?;
    for f in &summary.files {
        println!("wrote {}", f.display());
    }
    println!(
        "{} decisions; {} contrasts ({} testable); significant after BH at {alpha}: {} consensus-better, {} single-better",
        summary.decisions, summary.contrasts, summary.tested, summary.mas_better, summary.single_better
    );
    Ok(0)
}

fn cmd_trace(trace_file: Option<PathBuf>, segment_id: Option<usize>, show_templates: bool) -> Result<u8, Failure> {
    if show_templates {
        for (name, text) in templates() {
            println!("===== {name} =====");
            println!("{text}");
        }
        return Ok(0);
    }
    let Some(path) = trace_file else {
        return Err(anyhow!("pass a trace file and segment id, or --show-templates").into());
    };
    let Some(segment) = segment_id else {
        return Err(anyhow!("pass the segment id to print").into());
    };
    let entries = read_traces(&path)?;
    let entry = entries
        .iter()
        .find(|e| e.segment_id() == segment)
        .ok_or_else(|| anyhow!("segment {segment} not found in {}", path.display()))?;
    print!("{}", render::render_entry(entry));
    Ok(0)
}

fn cmd_mock_demo(out_dir: Option<PathBuf>) -> Result<u8, Failure> {
    let options = RunOptions {
        workers: 1,
        out_dir: out_dir.clone(),
        ..RunOptions::default()
    };
    let output = demo::run_demo(&options).map_err(|e| match e {
        RunError::ResumeRefused(_) => anyhow!("{e}; pick an empty --out-dir"),
        other => other.into(),
    })?;
    for entry in &output.traces {
        println!("{}", render::render_entry(entry));
    }
    let turns: Vec<_> = output
        .traces
        .iter()
        .filter_map(|e| match e {
            coder_consensus::experiment::TraceEntry::Completed(t) => Some(t),
            _ => None,
        })
        .flat_map(|t| t.single_agent_turn.iter().chain(&t.turns).chain(&t.arbiter_turn))
        .collect();
    let count = |f: fn(&coder_consensus::TurnRecord) -> usize| turns.iter().map(|t| f(t)).sum::<usize>();
    println!(
        "extraction summary: {} turns, {} re-prompted, {} duplicate label(s) ({} conflicting), {} extraneous label(s)",
        turns.len(),
        turns.iter().filter(|t| t.retried).count(),
        count(|t| t.extraction.duplicate_labels.len()),
        count(|t| t.extraction.conflicting_labels.len()),
        count(|t| t.extraction.extraneous_labels.len()),
    );
    if let Some(dir) = out_dir {
        println!("artifacts written to {}", dir.display());
    }
    Ok(0)
}
