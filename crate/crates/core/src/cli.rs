//! Command-line entry point.
//!
//! Settings resolve in three layers: command-line flags override the config
//! file, which overrides built-in defaults. The API key is read only from
//! `BLOOMQA_API_KEY`; `BLOOMQA_ENDPOINT` overrides the configured endpoint
//! unless `--endpoint` is given.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::evalharness::{
    build_backend, evaluate_instances, generate_all, inspect_instance, BackendConfig, HarnessError,
    Inspection, RunConfig,
};
use crate::lm_backend::{HttpConfig, HttpScoring, LengthBudget, ScoreMode};
use crate::selection::Restriction;
use crate::selftalk::OverlapFilter;
use crate::taxonomy::{DatasetKind, PrefixTemplate};

pub const ENV_API_KEY: &str = "BLOOMQA_API_KEY";
pub const ENV_ENDPOINT: &str = "BLOOMQA_ENDPOINT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "bloomqa",
    version,
    about = "Zero-shot multiple-choice QA with taxonomy-levelled self-talk clarifications"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the multi-seed evaluation and write reports.
    RunEval(RunArgs),
    /// Generate clarification sets only and write them as JSON lines.
    GenClarifications {
        #[command(flatten)]
        run: RunArgs,
        /// Output file for the clarification sets.
        #[arg(long, default_value = "clarifications.jsonl")]
        out: PathBuf,
    },
    /// Print one instance's clarifications, score matrix and selections.
    Inspect {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        instance: String,
        /// Seed to inspect; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check the resolved configuration without touching any backend.
    ValidateConfig(RunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Http,
    Stub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScoreModeArg {
    Normalized,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OverlapArg {
    Off,
    Require,
    Forbid,
}

#[derive(Debug, Clone, Default, Args)]
struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_path: Option<PathBuf>,
    /// Comma-separated restrictions, e.g. `1,2,choice`.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<String>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// JSON table of canned completions and scores for the stub backend.
    #[arg(long)]
    stub_table: Option<PathBuf>,
    #[arg(long)]
    stub_seed: Option<u64>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    max_instances: Option<usize>,
    #[arg(long, value_enum)]
    score_mode: Option<ScoreModeArg>,
    #[arg(long, value_enum)]
    overlap_filter: Option<OverlapArg>,
    /// Structured report output; defaults to `report.json`.
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// TOML prefix registry replacing the bundled one.
    #[arg(long)]
    prefix_registry: Option<PathBuf>,
    #[arg(long)]
    skip_bad_lines: bool,
    #[arg(long)]
    workers: Option<usize>,
    /// Write every request that reached the backend as JSON lines.
    #[arg(long)]
    request_log: Option<PathBuf>,
}

/// Config file layout; every field optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub dataset: Option<DatasetKind>,
    pub data_path: Option<PathBuf>,
    pub levels: Option<Vec<Restriction>>,
    pub seeds: Option<Vec<u64>>,
    pub score_mode: Option<ScoreMode>,
    pub overlap_filter: Option<OverlapFilter>,
    pub cache_dir: Option<PathBuf>,
    pub max_instances: Option<usize>,
    pub report_out: Option<PathBuf>,
    pub prefix_registry: Option<PathBuf>,
    pub skip_bad_lines: Option<bool>,
    pub workers: Option<usize>,
    pub backend: Option<BackendSection>,
    pub stage1: Option<ParamsSection>,
    pub stage2: Option<ParamsSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: Option<String>,
    pub seed: Option<u64>,
    pub table: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: Option<u64>,
    pub max_in_flight: Option<usize>,
    pub max_attempts: Option<u32>,
    pub backoff_ms: Option<u64>,
    pub scoring: Option<HttpScoring>,
    pub send_seed: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub nucleus_p: Option<f64>,
    pub num_samples: Option<usize>,
    pub max_words: Option<usize>,
    pub max_tokens: Option<usize>,
    pub temperature: Option<f64>,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(err: HarnessError) -> Self {
        match err {
            HarnessError::Config(_) | HarnessError::Registry(_) => Failure::Config(err.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

/// Runs one CLI invocation and returns its exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env = |key: &str| std::env::var(key).ok();
    run_command_with(argv, &env, &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`run_command`] with explicit environment lookup and output streams.
pub fn run_command_with<I, T>(
    argv: I,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{rendered}");
            } else {
                let _ = write!(out, "{rendered}");
            }
            return code;
        }
    };
    match dispatch(cli.command, env, out, err) {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(message)) => {
            let _ = writeln!(err, "config error: {message}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(message)) => {
            let _ = writeln!(err, "error: {message}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(
    command: Command,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), Failure> {
    match command {
        Command::ValidateConfig(args) => {
            let config = resolve_config(&args, env)?;
            load_registry(&config)?;
            let _ = writeln!(out, "config ok");
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string_pretty(&config).expect("config serializes")
            );
            Ok(())
        }
        Command::RunEval(args) => run_eval(&args, env, out, err),
        Command::GenClarifications { run, out: path } => {
            gen_clarifications(&run, &path, env, out, err)
        }
        Command::Inspect {
            run,
            instance,
            seed,
        } => inspect(&run, &instance, seed, env, out, err),
    }
}

fn load_registry(config: &RunConfig) -> Result<Vec<PrefixTemplate>, Failure> {
    let registry = config.registry().map_err(|e| Failure::Config(e.to_string()))?;
    config
        .check_registry(&registry)
        .map_err(|e| Failure::Config(e.to_string()))?;
    Ok(registry)
}

fn runtime(message: impl std::fmt::Display) -> Failure {
    Failure::Runtime(message.to_string())
}

fn run_eval(
    args: &RunArgs,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), Failure> {
    let config = resolve_config(args, env)?;
    let registry = load_registry(&config)?;
    let instances = config.load_instances()?;
    let stack = build_backend(&config)?;
    let result = evaluate_instances(&config, &instances, &registry, stack.backend.as_ref());
    write_request_log(args, &stack.log)?;
    let _ = writeln!(err, "backend requests: {}", stack.log.len());
    let report = result?;

    let report_path = config
        .report_out
        .clone()
        .unwrap_or_else(|| PathBuf::from("report.json"));
    write_file(&report_path, report.to_json().as_bytes())?;
    let _ = write!(out, "{}", report.to_text());
    let _ = writeln!(out, "report written to {}", report_path.display());
    Ok(())
}

fn gen_clarifications(
    args: &RunArgs,
    path: &Path,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), Failure> {
    let config = resolve_config(args, env)?;
    let registry = load_registry(&config)?;
    let instances = config.load_instances()?;
    let stack = build_backend(&config)?;
    let mut lines = Vec::new();
    let mut result = Ok(());
    for &seed in &config.seeds {
        match generate_all(&instances, &registry, stack.backend.as_ref(), &config, seed) {
            Ok(sets) => {
                for instance in &instances {
                    let line = serde_json::to_string(&sets[&instance.id]).expect("set serializes");
                    lines.push(line);
                }
            }
            Err(e) => {
                result = Err(Failure::from(e));
                break;
            }
        }
    }
    write_request_log(args, &stack.log)?;
    let _ = writeln!(err, "backend requests: {}", stack.log.len());
    result?;
    let mut body = lines.join("\n");
    body.push('\n');
    write_file(path, body.as_bytes())?;
    let _ = writeln!(
        out,
        "wrote {} clarification set(s) to {}",
        lines.len(),
        path.display()
    );
    Ok(())
}

fn inspect(
    args: &RunArgs,
    instance_id: &str,
    seed: Option<u64>,
    env: &dyn Fn(&str) -> Option<String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), Failure> {
    let config = resolve_config(args, env)?;
    let registry = load_registry(&config)?;
    let instances = config.load_instances()?;
    let instance = instances
        .iter()
        .find(|i| i.id == instance_id)
        .ok_or_else(|| runtime(format!("no instance with id `{instance_id}`")))?;
    let seed = seed.unwrap_or(config.seeds[0]);
    let stack = build_backend(&config)?;
    let result = inspect_instance(&config, instance, &registry, stack.backend.as_ref(), seed);
    write_request_log(args, &stack.log)?;
    let _ = writeln!(err, "backend requests: {}", stack.log.len());
    let _ = write!(out, "{}", render_inspection(&result?, config.dataset));
    Ok(())
}

fn render_inspection(inspection: &Inspection, dataset: DatasetKind) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let instance = &inspection.instance;
    let _ = writeln!(s, "instance {} (seed {})", instance.id, inspection.seed);
    let _ = writeln!(s, "context: {}", instance.prompt);
    if !instance.question.is_empty() {
        let _ = writeln!(s, "question: {}", instance.question);
    }
    for (o, option) in instance.options.iter().enumerate() {
        let mark = if o == instance.gold_index { " (gold)" } else { "" };
        let _ = writeln!(s, "  option {o}: {option}{mark}");
    }
    let Some(outcome) = &inspection.outcome else {
        let _ = writeln!(s, "no clarifications generated");
        return s;
    };
    let _ = writeln!(s, "score matrix ({}):", outcome.matrix.mode);
    for (j, clarification) in outcome.matrix.clarifications.iter().enumerate() {
        let scores: Vec<String> = (0..outcome.matrix.option_count)
            .map(|o| format!("{:>9.4}", outcome.matrix.value(j, o)))
            .collect();
        let _ = writeln!(
            s,
            "  j={j:<3} L{} {}  | {}",
            clarification.level,
            scores.join(" "),
            clarification.answer_text
        );
    }
    let _ = writeln!(s, "selections:");
    for (restriction, selection) in &outcome.selections {
        let label = restriction.label(dataset);
        match selection {
            Some(sel) => {
                let verdict = if sel.chosen_option == instance.gold_index {
                    "correct"
                } else {
                    "wrong"
                };
                let _ = writeln!(
                    s,
                    "  {label}: option {} via j={} (score {:.4}) {verdict}",
                    sel.chosen_option, sel.chosen_clarification, sel.best_score
                );
            }
            None => {
                let _ = writeln!(s, "  {label}: no clarification at this level");
            }
        }
    }
    s
}

fn write_request_log(
    args: &RunArgs,
    log: &crate::lm_backend::RequestLog,
) -> Result<(), Failure> {
    if let Some(path) = &args.request_log {
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).map_err(runtime)?;
        write_file(path, &buf)?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn load_config_file(path: &Path) -> Result<ConfigFile, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn apply_params(params: &mut crate::lm_backend::GenParams, section: &ParamsSection) -> Result<(), Failure> {
    if let Some(p) = section.nucleus_p {
        params.nucleus_p = p;
    }
    if let Some(n) = section.num_samples {
        params.num_samples = n;
    }
    match (section.max_words, section.max_tokens) {
        (Some(_), Some(_)) => {
            return Err(Failure::Config(
                "set either max_words or max_tokens, not both".into(),
            ))
        }
        (Some(w), None) => params.budget = LengthBudget::Words(w),
        (None, Some(t)) => params.budget = LengthBudget::Tokens(t),
        (None, None) => {}
    }
    if section.temperature.is_some() {
        params.temperature = section.temperature;
    }
    Ok(())
}

/// Resolves flags, environment, config file and defaults into a validated
/// [`RunConfig`].
fn resolve_config(
    args: &RunArgs,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<RunConfig, Failure> {
    let file = match &args.config {
        Some(path) => load_config_file(path)?,
        None => ConfigFile::default(),
    };
    let dataset = match &args.dataset {
        Some(name) => name
            .parse::<DatasetKind>()
            .map_err(|e| Failure::Config(e.to_string()))?,
        None => file
            .dataset
            .ok_or_else(|| Failure::Config("no dataset given (--dataset or config `dataset`)".into()))?,
    };
    let data_path = args
        .data_path
        .clone()
        .or(file.data_path.clone())
        .ok_or_else(|| Failure::Config("no data path given (--data-path or config `data_path`)".into()))?;

    let mut config = RunConfig::new(dataset, data_path);

    // Config file layer.
    if let Some(levels) = file.levels {
        config.levels = levels;
    }
    if let Some(seeds) = file.seeds {
        config.seeds = seeds;
    }
    if let Some(mode) = file.score_mode {
        config.score_mode = mode;
    }
    if let Some(filter) = file.overlap_filter {
        config.selftalk.overlap_filter = filter;
    }
    config.cache_dir = file.cache_dir.or(config.cache_dir);
    config.max_instances = file.max_instances.or(config.max_instances);
    config.report_out = file.report_out.or(config.report_out);
    config.prefix_registry = file.prefix_registry.or(config.prefix_registry);
    if let Some(skip) = file.skip_bad_lines {
        config.skip_bad_lines = skip;
    }
    if let Some(workers) = file.workers {
        config.workers = workers;
    }
    if let Some(section) = &file.stage1 {
        apply_params(&mut config.selftalk.question_params, section)?;
    }
    if let Some(section) = &file.stage2 {
        apply_params(&mut config.selftalk.answer_params, section)?;
    }
    let backend_section = file.backend.unwrap_or_default();

    // Flag layer.
    if let Some(levels) = &args.levels {
        config.levels = levels
            .iter()
            .map(|l| l.parse::<Restriction>())
            .collect::<Result<_, _>>()
            .map_err(Failure::Config)?;
    }
    if let Some(seeds) = &args.seeds {
        config.seeds = seeds.clone();
    }
    if let Some(mode) = args.score_mode {
        config.score_mode = match mode {
            ScoreModeArg::Normalized => ScoreMode::Normalized,
            ScoreModeArg::Sum => ScoreMode::Sum,
        };
    }
    if let Some(filter) = args.overlap_filter {
        config.selftalk.overlap_filter = match filter {
            OverlapArg::Off => OverlapFilter::Off,
            OverlapArg::Require => OverlapFilter::Require,
            OverlapArg::Forbid => OverlapFilter::Forbid,
        };
    }
    if args.cache_dir.is_some() {
        config.cache_dir = args.cache_dir.clone();
    }
    if args.max_instances.is_some() {
        config.max_instances = args.max_instances;
    }
    if args.report_out.is_some() {
        config.report_out = args.report_out.clone();
    }
    if args.prefix_registry.is_some() {
        config.prefix_registry = args.prefix_registry.clone();
    }
    if args.skip_bad_lines {
        config.skip_bad_lines = true;
    }
    if let Some(workers) = args.workers {
        config.workers = workers;
    }

    let kind = match (args.backend, backend_section.kind.as_deref()) {
        (Some(BackendKind::Http), _) | (None, Some("http")) => BackendKind::Http,
        (Some(BackendKind::Stub), _) | (None, Some("stub")) | (None, None) => BackendKind::Stub,
        (None, Some(other)) => {
            return Err(Failure::Config(format!("unknown backend kind `{other}`")))
        }
    };
    config.backend = match kind {
        BackendKind::Stub => {
            let BackendConfig::Stub { seed, .. } = BackendConfig::default() else {
                unreachable!("default backend is the stub")
            };
            BackendConfig::Stub {
                seed: args.stub_seed.or(backend_section.seed).unwrap_or(seed),
                table: args.stub_table.clone().or(backend_section.table),
            }
        }
        BackendKind::Http => {
            let mut http = HttpConfig::default();
            if let Some(endpoint) = args
                .endpoint
                .clone()
                .or_else(|| env(ENV_ENDPOINT))
                .or(backend_section.endpoint)
            {
                http.endpoint = endpoint;
            }
            if let Some(model) = args.model.clone().or(backend_section.model) {
                http.model = model;
            }
            if let Some(v) = backend_section.timeout_secs {
                http.timeout_secs = v;
            }
            if let Some(v) = backend_section.max_in_flight {
                http.max_in_flight = v;
            }
            if let Some(v) = backend_section.max_attempts {
                http.max_attempts = v;
            }
            if let Some(v) = backend_section.backoff_ms {
                http.backoff_ms = v;
            }
            if let Some(v) = backend_section.scoring {
                http.scoring = v;
            }
            if let Some(v) = backend_section.send_seed {
                http.send_seed = v;
            }
            http.api_key = env(ENV_API_KEY);
            BackendConfig::Http(http)
        }
    };

    config
        .validate()
        .map_err(|e| Failure::Config(e.to_string()))?;
    Ok(config)
}

/// Resolved configuration for `argv` (a `run-eval`-style argument list
/// without the subcommand), for callers that want the merge without running.
pub fn resolve_run_config<I, T>(
    argv: I,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<RunConfig, String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    #[derive(Parser)]
    struct Only {
        #[command(flatten)]
        run: RunArgs,
    }
    let parsed = Only::try_parse_from(argv).map_err(|e| e.to_string())?;
    resolve_config(&parsed.run, env).map_err(|f| match f {
        Failure::Config(m) | Failure::Runtime(m) => m,
    })
}
