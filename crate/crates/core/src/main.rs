use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use longqa::explain::write_coverage_csv;
use longqa::metrics::MeanMode;
use longqa::pipeline::{
    coverage_from_file, ingest, report_runs, run_explain, run_judge, run_pipeline, shorten_only, BackendKind,
    ExplainMethod, PipelineError, RunConfig, ENV_BACKEND_URL,
};
use longqa::shorten::{ScorerKind, StrategyKind};

#[derive(Parser)]
#[command(name = "longqa", version, about = "Long-context question answering with context shortening")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset and its annotation files and print corpus statistics.
    Ingest {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        triples: Option<PathBuf>,
        #[arg(long)]
        coref: Option<PathBuf>,
    },
    /// Shorten every test record's context and print one JSON line per record.
    Shorten {
        #[command(flatten)]
        run: RunArgs,
        /// Write to this file instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Shorten, generate and evaluate; writes a run directory.
    Run {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Pairwise judging of two answer runs.
    Judge {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        run_a: PathBuf,
        #[arg(long)]
        run_b: PathBuf,
    },
    /// Rationales for a run's selected passages, or coverage of a rationale file.
    Explain {
        #[command(flatten)]
        run: RunArgs,
        /// Answer run whose selections are explained.
        #[arg(long, conflicts_with = "rationales")]
        source_run: Option<PathBuf>,
        /// Existing rationale file; prints its coverage matrix.
        #[arg(long)]
        rationales: Option<PathBuf>,
        #[arg(long, value_parser = parse_from_str::<ExplainMethod>)]
        method: Option<ExplainMethod>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Combine run directories into one report.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = 100)]
        best_k: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    triples: Option<PathBuf>,
    #[arg(long)]
    coref: Option<PathBuf>,
    #[arg(long, value_parser = parse_from_str::<StrategyKind>)]
    strategy: Option<StrategyKind>,
    #[arg(long, value_parser = parse_from_str::<ScorerKind>)]
    scorer: Option<ScorerKind>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_parser = parse_from_str::<BackendKind>)]
    backend: Option<BackendKind>,
    #[arg(long, env = ENV_BACKEND_URL)]
    backend_url: Option<String>,
    #[arg(long)]
    mock_config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    judge_model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    no_cache: bool,
    #[arg(long)]
    harmonic: bool,
}

fn parse_from_str<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = self.$field { cfg.$target = v; })*
            };
        }
        set!(dataset => dataset, strategy => strategy, scorer => scorer, top_k => top_k,
             backend => backend, model => model, judge_model => judge_model, seed => seed,
             out => out, workers => workers);
        if self.triples.is_some() {
            cfg.triples = self.triples;
        }
        if self.coref.is_some() {
            cfg.coref = self.coref;
        }
        if self.backend_url.is_some() {
            cfg.backend_url = self.backend_url;
        }
        if self.mock_config.is_some() {
            cfg.mock_config = self.mock_config;
        }
        if self.run_id.is_some() {
            cfg.run_id = self.run_id;
        }
        if self.cache_dir.is_some() {
            cfg.cache_dir = self.cache_dir;
        }
        if self.no_cache {
            cfg.cache_dir = None;
        }
        if self.harmonic {
            cfg.mean_mode = MeanMode::Harmonic;
        }
        Ok(cfg)
    }
}

// Write errors (usually a closed pipe) are ignored; the exit code still reflects the work done.
fn print_json<T: serde::Serialize>(value: &T) {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn print_line(line: impl std::fmt::Display) {
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn execute(command: Command) -> Result<i32, PipelineError> {
    match command {
        Command::Ingest { dataset, triples, coref } => {
            print_json(&ingest(&dataset, triples.as_deref(), coref.as_deref())?);
            Ok(0)
        }
        Command::Shorten { run, output } => {
            let cfg = run.resolve()?;
            let (records, failures) = shorten_only(&cfg)?;
            let mut bytes = Vec::new();
            for r in &records {
                serde_json::to_writer(&mut bytes, r).expect("serializable");
                bytes.push(b'\n');
            }
            match output {
                Some(path) => longqa::backend::write_atomic(&path, &bytes)
                    .map_err(|source| PipelineError::Io { path: path.clone(), source })?,
                None => std::io::stdout()
                    .write_all(&bytes)
                    .map_err(|source| PipelineError::Io { path: "<stdout>".into(), source })?,
            }
            for f in &failures {
                eprintln!("{}: {:?} failed: {}", f.record_id, f.stage, f.error);
            }
            Ok(if failures.iter().any(|f| f.backend) { 2 } else { 0 })
        }
        Command::Run { run } => {
            let cfg = run.resolve()?;
            let outcome = run_pipeline(&cfg)?;
            print_line(outcome.run_dir.display());
            print_json(&outcome.report);
            Ok(outcome.exit_code())
        }
        Command::Judge { run, run_a, run_b } => {
            let cfg = run.resolve()?;
            let outcome = run_judge(&cfg, &run_a, &run_b)?;
            print_line(outcome.run_dir.display());
            print_json(&outcome.report);
            Ok(if outcome.manifest.backend_failures() > 0 { 2 } else { 0 })
        }
        Command::Explain { run, source_run, rationales, method, limit } => {
            if let Some(path) = rationales {
                let (matrix, trend) = coverage_from_file(&path)?;
                write_coverage_csv(std::io::stdout(), &matrix)?;
                print_json(&trend);
                return Ok(0);
            }
            let Some(source) = source_run else {
                return Err(PipelineError::Config("explain needs --source-run or --rationales".into()));
            };
            let mut cfg = run.resolve()?;
            if let Some(m) = method {
                cfg.explain_method = m;
            }
            if limit.is_some() {
                cfg.explain_limit = limit;
            }
            let outcome = run_explain(&cfg, &source)?;
            print_line(outcome.run_dir.display());
            print_json(&outcome.trend);
            Ok(0)
        }
        Command::Report { runs, best_k } => {
            print_json(&report_runs(&runs, best_k)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
