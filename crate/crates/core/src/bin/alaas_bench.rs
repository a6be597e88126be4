//! Runs a benchmark scenario and writes `results.json` / `results.csv`.

use std::path::PathBuf;
use std::process::ExitCode;

use alaas_core::bench::{compare_report, run_scenario, summary_table, BenchResult, BenchScenario};
use clap::Parser;

#[derive(Parser)]
#[command(name = "alaas-bench", about = "Pipeline efficiency benchmarks")]
struct Args {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for results.json and results.csv.
    #[arg(long)]
    out: PathBuf,
    /// Where the synthetic pool and caches are written (default: a temp dir).
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// A previous results.json to compare against.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

fn run(args: Args) -> Result<(), String> {
    let raw = std::fs::read(&args.scenario).map_err(|e| format!("{}: {e}", args.scenario.display()))?;
    let scenario: BenchScenario =
        serde_json::from_slice(&raw).map_err(|e| format!("{}: {e}", args.scenario.display()))?;
    let tmp;
    let work_dir = match &args.work_dir {
        Some(d) => d.clone(),
        None => {
            tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
            tmp.path().to_path_buf()
        }
    };
    let result = run_scenario(&scenario, &work_dir).map_err(|e| e.to_string())?;
    result.write_outputs(&args.out).map_err(|e| e.to_string())?;
    print!("{}", summary_table(&result));
    if let Some(path) = &args.baseline {
        let baseline = BenchResult::read_json(path).map_err(|e| format!("{}: {e}", path.display()))?;
        println!();
        print!("{}", compare_report(&result, &baseline).map_err(|e| e.to_string())?);
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("alaas-bench: {e}");
            ExitCode::from(2)
        }
    }
}
