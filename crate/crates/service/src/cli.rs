//! The `alaas` command line.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 server or job error.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use alaas_core::model::{ALReport, DatasetId, JobId, SampleId, StrategyKind};
use clap::{Args, Parser, Subcommand};

use crate::api::QueryRequest;
use crate::client::{Client, ClientConfig, ClientError};
use crate::config::load_config;
use crate::server::serve;

#[derive(Debug, Parser)]
#[command(name = "alaas", version, about = "Active learning as a service")]
struct Cli {
    /// Server base URL.
    #[arg(long, global = true, env = "ALAAS_SERVER", default_value = "http://127.0.0.1:8081")]
    server: String,
    /// Give up polling a job after this many seconds.
    #[arg(long, global = true, default_value_t = 600)]
    wait_secs: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register a dataset from a directory or a list of URIs.
    Push(PushArgs),
    /// Run a selection round and print or save the report.
    Query(QueryArgs),
    /// Show a job record.
    Status {
        #[arg(long)]
        job: JobId,
    },
    /// Cancel a job.
    Cancel {
        #[arg(long)]
        job: JobId,
    },
    /// Run the server in this process until SIGINT/SIGTERM.
    Serve {
        #[arg(long, env = "ALAAS_CONFIG")]
        config: PathBuf,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false, id = "source")]
struct Source {
    /// Directory whose files become the pool, sorted by name.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Explicit sample URIs.
    #[arg(long, num_args = 1..)]
    uris: Vec<String>,
}

#[derive(Debug, Args)]
struct PushArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    name: String,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    dataset: DatasetId,
    #[arg(long)]
    strategy: String,
    #[arg(long)]
    budget: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Prior report whose selections count as labeled. Repeatable.
    #[arg(long)]
    labeled_from: Vec<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Zero job id, timestamps and timings so reruns are byte-identical.
    #[arg(long)]
    deterministic: bool,
}

enum Failure {
    Usage(String),
    Server(String),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::InvalidRequest(m) => Failure::Usage(m),
            other => Failure::Server(other.to_string()),
        }
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 { write!(stdout, "{e}") } else { write!(stderr, "{e}") };
            return code;
        }
    };
    match dispatch(cli, stdout, stderr) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(stderr, "error: {m}");
            1
        }
        Err(Failure::Server(m)) => {
            let _ = writeln!(stderr, "error: {m}");
            2
        }
    }
}

fn client(cli: &Cli) -> Result<Client, Failure> {
    let mut cfg = ClientConfig::new(cli.server.clone());
    cfg.max_poll_time_ms = cli.wait_secs.saturating_mul(1000).max(cfg.poll_interval_ms);
    Ok(Client::new(cfg)?)
}

fn io_err(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn labeled_from(files: &[PathBuf]) -> Result<Vec<SampleId>, Failure> {
    let mut ids = BTreeSet::new();
    for f in files {
        let text = std::fs::read_to_string(f).map_err(|e| Failure::Usage(format!("{}: {e}", f.display())))?;
        let report: ALReport = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("{} is not a report: {e}", f.display())))?;
        ids.extend(report.selected_ids());
    }
    Ok(ids.into_iter().collect())
}

fn dispatch(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), Failure> {
    match &cli.command {
        Command::Push(args) => {
            let c = client(&cli)?;
            let id = match &args.source.dir {
                Some(dir) => c.push_dir(dir, &args.name)?,
                None => c.push_uris(&args.source.uris, &args.name)?,
            };
            writeln!(stdout, "{id}").map_err(io_err)?;
        }
        Command::Query(args) => {
            let strategy = StrategyKind::from_alias(&args.strategy).ok_or_else(|| {
                Failure::Usage(format!(
                    "unknown strategy {:?}; valid names: {}",
                    args.strategy,
                    StrategyKind::alias_list()
                ))
            })?;
            if args.budget == 0 {
                return Err(Failure::Usage("budget must be positive".into()));
            }
            let mut req = QueryRequest::new(args.dataset);
            req.strategy = Some(strategy);
            req.budget = Some(args.budget);
            req.seed = args.seed;
            req.batch_size = args.batch_size;
            req.labeled_ids = labeled_from(&args.labeled_from)?;
            let c = client(&cli)?;
            let job = c.submit(&req)?;
            let _ = writeln!(stderr, "job {job} submitted");
            let mut report = c.wait(job)?;
            let _ = writeln!(stderr, "job {job} done: {} selected", report.selected.len());
            if args.deterministic {
                report.make_deterministic();
            }
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            match &args.out {
                Some(path) => std::fs::write(path, json + "\n")
                    .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?,
                None => writeln!(stdout, "{json}").map_err(io_err)?,
            }
        }
        Command::Status { job } => {
            let rec = client(&cli)?.job(*job)?;
            let json = serde_json::to_string_pretty(&rec).expect("record serializes");
            writeln!(stdout, "{json}").map_err(io_err)?;
        }
        Command::Cancel { job } => {
            let rec = client(&cli)?.cancel(*job)?;
            let state = serde_json::to_value(rec.state).expect("state serializes");
            writeln!(stdout, "{}", state.as_str().unwrap_or_default()).map_err(io_err)?;
        }
        Command::Serve { config } => {
            let mut cfg = load_config(config).map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
            cfg.apply_env().map_err(|e| Failure::Usage(e.to_string()))?;
            let handle = serve(cfg).map_err(|e| Failure::Server(e.to_string()))?;
            let _ = writeln!(stderr, "listening on {}", handle.url());
            handle.run_until_signal();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("alaas").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run_args(&[]).0, 1);
        assert_eq!(run_args(&["frobnicate"]).0, 1);
        assert_eq!(run_args(&["push", "--name", "x"]).0, 1);
        assert_eq!(run_args(&["push", "--dir", "d", "--uris", "file:///a", "--name", "x"]).0, 1);
        assert_eq!(run_args(&["status", "--job", "nope"]).0, 1);
    }

    #[test]
    fn unknown_strategy_lists_aliases() {
        let id = DatasetId::random().to_string();
        let (code, _, err) = run_args(&["query", "--dataset", &id, "--strategy", "Best", "--budget", "3"]);
        assert_eq!(code, 1);
        assert!(err.contains("LeastConfidence") && err.contains("KCenterGreedy"), "{err}");
    }

    #[test]
    fn help_exits_0() {
        let (code, out, _) = run_args(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("query"));
    }

    #[test]
    fn unreachable_server_exits_2() {
        let (code, _, err) = run_args(&["--server", "http://127.0.0.1:1", "status", "--job", &JobId::random().to_string()]);
        assert_eq!(code, 2);
        assert!(err.contains("unreachable"), "{err}");
    }
}
