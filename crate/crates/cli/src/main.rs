//! `anonproxy`: run the anonymizing proxy, replay recorded traffic, generate
//! synthetic corpora and render reports.

mod stub;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};

use anonproxy_core::config::{parse_level_override, Config};
use anonproxy_core::corpus::{generate_jsonl, CorpusSpec};
use anonproxy_core::evaluator::{acceptance_csv, acceptance_rows, summary_csv, summary_table, RunReport};
use anonproxy_core::pipeline::Engine;
use anonproxy_core::replay::{run_replay, SimulatedUpstream, Upstream};
use anonproxy_proxy::{serve, ProxySettings};

#[derive(Debug, Parser)]
#[command(name = "anonproxy", version, about = "Anonymizing proxy for mobile analytics traffic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long, env = "ANONPROXY_CONFIG", value_name = "PATH")]
    config: Option<PathBuf>,
    /// RNG seed; overrides `rng_seed` from the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Privacy level for one app, e.g. `com.example=HIGH`. Repeatable.
    #[arg(long = "level", value_name = "APP=LEVEL")]
    levels: Vec<String>,
    /// Send upstream traffic to this plain-HTTP server instead of the real hosts.
    #[arg(long, value_name = "URL")]
    upstream_stub: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the proxy until interrupted, then write the report.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Report path; defaults to `report_out_path` from the config.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Anonymize a recorded-traffic file offline.
    Replay {
        /// JSON-lines file of recorded requests.
        input: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Anonymized output file; stdout when absent.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Report path; defaults to `report_out_path` from the config.
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
    /// Write a synthetic analytics corpus.
    GenCorpus {
        #[arg(long, default_value_t = CorpusSpec::default().events)]
        events: usize,
        #[arg(long, default_value_t = CorpusSpec::default().apps)]
        apps: usize,
        /// Zipf exponent of the event-type distribution; 0 is uniform.
        #[arg(long, default_value_t = CorpusSpec::default().skew)]
        skew: f64,
        #[arg(long, default_value_t = CorpusSpec::default().seed)]
        seed: u64,
        /// File with one event name per line, most frequent first.
        #[arg(long, value_name = "PATH")]
        vocabulary: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Render a saved report.
    Report {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    /// Aligned per-level table.
    Table,
    /// Per-level CSV.
    Csv,
    /// Per-host acceptance CSV.
    Acceptance,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn config(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Serve { common, out } => run_serve(common, out),
        Command::Replay {
            input,
            common,
            out,
            report,
        } => run_replay_cmd(&input, common, out, report),
        Command::GenCorpus {
            events,
            apps,
            skew,
            seed,
            vocabulary,
            out,
        } => {
            let mut spec = CorpusSpec {
                events,
                apps,
                skew,
                seed,
                ..Default::default()
            };
            if let Some(path) = vocabulary {
                let text = std::fs::read_to_string(&path)
                    .with_context(|| path.display().to_string())
                    .config()?;
                spec.vocabulary = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect();
            }
            let text = generate_jsonl(&spec).config()?;
            write_out(out.as_deref(), &text)
        }
        Command::Report { input, format, out } => {
            let text = std::fs::read_to_string(&input)
                .with_context(|| input.display().to_string())
                .runtime()?;
            let report = RunReport::from_json(&text, &input.display().to_string()).runtime()?;
            let rendered = match format {
                Format::Table => summary_table(&report.summary()),
                Format::Csv => summary_csv(&report.summary()),
                Format::Acceptance => acceptance_csv(&acceptance_rows(&report.apps)),
            };
            write_out(out.as_deref(), &rendered)
        }
    }
}

/// Loads the config and applies command-line overrides.
fn load_config(common: &Common) -> Result<Config, Failure> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Failure::Config(anyhow!("no configuration given; pass --config or set ANONPROXY_CONFIG")))?;
    let mut cfg = Config::load(path).config()?;
    if let Some(seed) = common.seed {
        cfg.rng_seed = Some(seed);
    }
    for spec in &common.levels {
        let (app, level) = parse_level_override(spec).config()?;
        cfg.per_app_levels.insert(app, level);
    }
    if let Some(url) = &common.upstream_stub {
        cfg.upstream_stub = Some(stub::authority(url).config()?);
    }
    Ok(cfg)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => write_file(p, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()).runtime()
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .with_context(|| dir.display().to_string())
            .runtime()?;
    }
    std::fs::write(path, text)
        .with_context(|| path.display().to_string())
        .runtime()
}

fn finish(report: &RunReport, path: Option<&Path>) -> Result<(), Failure> {
    for m in &report.apps {
        if let Err(why) = m.check_conservation() {
            tracing::error!(%why, "metrics do not add up");
        }
    }
    eprint!("{}", summary_table(&report.summary()));
    match path {
        Some(p) => write_file(p, &report.to_json()),
        None => Ok(()),
    }
}

fn run_replay_cmd(input: &Path, common: Common, out: Option<PathBuf>, report: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load_config(&common)?;
    let mut engine = Engine::from_config(&cfg).config()?;
    engine.learn_hosts = false;
    let text = std::fs::read_to_string(input)
        .with_context(|| input.display().to_string())
        .runtime()?;
    let upstream: Box<dyn Upstream> = match &cfg.upstream_stub {
        Some(addr) => Box::new(stub::HttpStub::new(addr)),
        None => Box::new(SimulatedUpstream),
    };
    let result = run_replay(&engine, &text, upstream.as_ref()).runtime()?;
    write_out(out.as_deref(), &result.output)?;
    finish(&result.report, report.as_deref().or(cfg.report_out_path.as_deref()))
}

fn run_serve(common: Common, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = load_config(&common)?;
    let engine = Arc::new(Engine::from_config(&cfg).config()?);
    let settings = ProxySettings::from_config(&cfg).config()?;
    let rt = tokio::runtime::Runtime::new().runtime()?;
    let engine = rt.block_on(async {
        let handle = serve(settings, engine).await.runtime()?;
        println!("listening on {}", handle.local_addr());
        if let Some(path) = &cfg.tls.ca_out_path {
            println!("CA certificate written to {}", path.display());
        }
        let _ = std::io::stdout().flush();
        tokio::signal::ctrl_c().await.runtime()?;
        tracing::info!("interrupted, shutting down");
        Ok::<_, Failure>(handle.shutdown().await)
    })?;
    engine.persist(&cfg).runtime()?;
    finish(&engine.report(), out.as_deref().or(cfg.report_out_path.as_deref()))
}
