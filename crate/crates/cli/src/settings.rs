//! Layered run settings: command-line flags override the environment, which
//! overrides the TOML config file, which overrides built-in defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use coder_consensus::analysis::MissingPolicy;
use coder_consensus::backend::{HttpConfig, BASE_URL_ENV};
use coder_consensus::experiment::{Pairing, DEFAULT_TEMPERATURES};

pub const DEFAULT_MODEL: &str = "llama3";
pub const DEFAULT_OUT_DIR: &str = "out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    /// Ollama-compatible HTTP endpoint.
    Http,
    /// Deterministic offline mock.
    Mock,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

/// Keys accepted in the `--config` TOML file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    base_url: Option<String>,
    model_id: Option<OneOrMany>,
    temperatures: Option<Vec<f64>>,
    pairings: Option<Vec<String>>,
    max_rounds: Option<u32>,
    history_window: Option<usize>,
    workers: Option<usize>,
    out_dir: Option<PathBuf>,
    alias_file: Option<PathBuf>,
    seed: Option<u64>,
    codebook: Option<PathBuf>,
    transcript: Option<PathBuf>,
    ground_truth: Option<PathBuf>,
    backend: Option<BackendChoice>,
    mock_script: Option<PathBuf>,
    missing_policy: Option<String>,
    timeout_secs: Option<u64>,
    transport_retries: Option<u32>,
    max_in_flight: Option<usize>,
    bearer_token: Option<String>,
}

/// Flags shared by `validate` and `run`.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML config file; relative paths inside it resolve against its directory
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory receiving the decision table, traces and manifest
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Endpoint root, e.g. http://localhost:11434
    #[arg(long)]
    pub base_url: Option<String>,
    /// Model id(s), comma separated or repeated
    #[arg(long = "model", value_delimiter = ',')]
    pub models: Vec<String>,
    /// Sampling temperatures, comma separated
    #[arg(long, value_delimiter = ',')]
    pub temperatures: Vec<f64>,
    /// Persona pairings such as bold-empathetic, comma separated
    #[arg(long, value_delimiter = ',')]
    pub pairings: Vec<String>,
    /// Discussion rounds before arbitration
    #[arg(long)]
    pub max_rounds: Option<u32>,
    /// Parallel segment workers per configuration
    #[arg(long)]
    pub workers: Option<usize>,
    /// Skip configurations the manifest marks complete
    #[arg(long)]
    pub resume: bool,
    /// Extra label aliases merged over the built-in table
    #[arg(long)]
    pub alias_file: Option<PathBuf>,
    /// How unextractable labels are scored: count_as_disagree or exclude
    #[arg(long)]
    pub missing_policy: Option<String>,
    /// Sampling seed forwarded to the backend
    #[arg(long)]
    pub seed: Option<u64>,
    /// Codebook TOML, or "builtin"
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Transcript CSV
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Ground-truth CSV
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Backend implementation
    #[arg(long, value_enum)]
    pub backend: Option<BackendChoice>,
    /// Scripted mock responses (TOML); synthetic replies when absent
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    /// Preceding segments shown as conversation history
    #[arg(long)]
    pub history_window: Option<usize>,
    /// Stop after this many configurations (resume later with --resume)
    #[arg(long, hide = true)]
    pub max_configs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub models: Vec<String>,
    pub temperatures: Vec<f64>,
    pub pairings: Vec<Pairing>,
    pub max_rounds: u32,
    pub history_window: usize,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub resume: bool,
    pub alias_file: Option<PathBuf>,
    pub seed: Option<u64>,
    pub codebook: PathBuf,
    pub transcript: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub backend: BackendChoice,
    pub mock_script: Option<PathBuf>,
    pub missing_policy: MissingPolicy,
    pub http: HttpConfig,
    pub max_configs: Option<usize>,
}

fn load_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn rebase(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() || p.as_os_str() == coder_consensus::codebook::BUILTIN_CODEBOOK {
        p
    } else {
        base.join(p)
    }
}

fn non_empty<T>(v: Vec<T>) -> Option<Vec<T>> {
    (!v.is_empty()).then_some(v)
}

impl Settings {
    /// Resolves settings, reading the base URL override from the process
    /// environment.
    pub fn resolve(args: &CommonArgs) -> Result<Self> {
        Self::resolve_with_env(args, std::env::var(BASE_URL_ENV).ok())
    }

    pub fn resolve_with_env(args: &CommonArgs, env_base_url: Option<String>) -> Result<Self> {
        let (file, base) = match &args.config {
            Some(path) => (
                load_file(path)?,
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (FileConfig::default(), PathBuf::new()),
        };
        let path = |flag: &Option<PathBuf>, from_file: Option<PathBuf>| {
            flag.clone().or_else(|| from_file.map(|p| rebase(&base, p)))
        };

        let models = non_empty(args.models.clone())
            .or(file.model_id.map(|m| match m {
                OneOrMany::One(s) => vec![s],
                OneOrMany::Many(v) => v,
            }))
            .unwrap_or_else(|| vec![DEFAULT_MODEL.to_string()]);
        let temperatures = non_empty(args.temperatures.clone())
            .or(file.temperatures)
            .unwrap_or_else(|| DEFAULT_TEMPERATURES.to_vec());
        let pairings = match non_empty(args.pairings.clone()).or(file.pairings) {
            Some(list) => list
                .iter()
                .map(|p| p.parse::<Pairing>().map_err(anyhow::Error::msg))
                .collect::<Result<Vec<_>>>()?,
            None => Pairing::canonical().to_vec(),
        };
        let missing_policy = match args.missing_policy.clone().or(file.missing_policy) {
            Some(s) => s.parse().map_err(anyhow::Error::msg)?,
            None => MissingPolicy::default(),
        };
        let max_rounds = args.max_rounds.or(file.max_rounds).unwrap_or(2);
        if max_rounds == 0 {
            bail!("max_rounds must be at least 1");
        }
        let defaults = HttpConfig::default();
        let http = HttpConfig {
            base_url: args
                .base_url
                .clone()
                .or(env_base_url)
                .or(file.base_url)
                .unwrap_or(defaults.base_url),
            timeout: file.timeout_secs.map(Duration::from_secs).unwrap_or(defaults.timeout),
            transport_retries: file.transport_retries.unwrap_or(defaults.transport_retries),
            max_in_flight: file.max_in_flight.unwrap_or(defaults.max_in_flight),
            bearer_token: file.bearer_token,
        };
        Ok(Self {
            models,
            temperatures,
            pairings,
            max_rounds,
            history_window: args.history_window.or(file.history_window).unwrap_or(10),
            workers: args.workers.or(file.workers).unwrap_or(4).max(1),
            out_dir: path(&args.out_dir, file.out_dir).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
            resume: args.resume,
            alias_file: path(&args.alias_file, file.alias_file),
            seed: args.seed.or(file.seed),
            codebook: path(&args.codebook, file.codebook)
                .unwrap_or_else(|| PathBuf::from(coder_consensus::codebook::BUILTIN_CODEBOOK)),
            transcript: path(&args.transcript, file.transcript),
            ground_truth: path(&args.ground_truth, file.ground_truth),
            backend: args.backend.or(file.backend).unwrap_or(BackendChoice::Http),
            mock_script: path(&args.mock_script, file.mock_script),
            missing_policy,
            http,
            max_configs: args.max_configs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn defaults_without_file() {
        let s = Settings::resolve_with_env(&CommonArgs::default(), None).unwrap();
        assert_eq!(s.models, [DEFAULT_MODEL]);
        assert_eq!(s.temperatures, DEFAULT_TEMPERATURES);
        assert_eq!(s.pairings.len(), 6);
        assert_eq!(s.max_rounds, 2);
        assert_eq!(s.history_window, 10);
        assert_eq!(s.http.base_url, "http://localhost:11434");
        assert_eq!(s.backend, BackendChoice::Http);
        assert_eq!(s.missing_policy, MissingPolicy::CountAsDisagree);
    }

    #[test]
    fn flags_beat_env_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(
            dir.path(),
            "base_url = \"http://file:1\"\nmodel_id = [\"a\", \"b\"]\nmax_rounds = 3\ntranscript = \"t.csv\"\nworkers = 8\n",
        );
        let mut args = CommonArgs {
            config: Some(cfg),
            ..CommonArgs::default()
        };
        let s = Settings::resolve_with_env(&args, None).unwrap();
        assert_eq!(s.http.base_url, "http://file:1");
        assert_eq!(s.models, ["a", "b"]);
        assert_eq!(s.max_rounds, 3);
        assert_eq!(s.transcript.unwrap(), dir.path().join("t.csv"));

        let s = Settings::resolve_with_env(&args, Some("http://env:2".into())).unwrap();
        assert_eq!(s.http.base_url, "http://env:2");

        args.base_url = Some("http://flag:3".into());
        args.max_rounds = Some(1);
        args.models = vec!["c".into()];
        let s = Settings::resolve_with_env(&args, Some("http://env:2".into())).unwrap();
        assert_eq!(s.http.base_url, "http://flag:3");
        assert_eq!(s.max_rounds, 1);
        assert_eq!(s.models, ["c"]);
        assert_eq!(s.workers, 8);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(dir.path(), "modle_id = \"x\"\n");
        let args = CommonArgs {
            config: Some(cfg),
            ..CommonArgs::default()
        };
        assert!(Settings::resolve_with_env(&args, None).is_err());
        let args = CommonArgs {
            pairings: vec!["bold-shy".into()],
            ..CommonArgs::default()
        };
        assert!(Settings::resolve_with_env(&args, None).is_err());
        let args = CommonArgs {
            missing_policy: Some("ignore".into()),
            ..CommonArgs::default()
        };
        assert!(Settings::resolve_with_env(&args, None).is_err());
    }
}
