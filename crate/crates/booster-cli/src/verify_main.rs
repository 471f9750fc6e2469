//! `booster-verify`: run the check battery and write report.csv.
//!
//! Exits 0 iff every check passes. The quick profile trains scaled-down
//! runs (minutes); full uses the complete protocol (hours).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use booster_core::data::{self, SynthConfig};
use booster_core::harness::{self, CheckReport, Profile, REPORT_HEADER};

#[derive(Parser)]
#[command(
    name = "booster-verify",
    version,
    about = "Verification battery: unit properties plus end-to-end criteria"
)]
struct Cli {
    /// quick or full
    #[arg(long, default_value = "quick")]
    profile: String,
    /// Dataset directory; synthesized under SCRATCH when absent
    #[arg(long)]
    data: Option<PathBuf>,
    /// Working directory for trained runs (reused across invocations)
    #[arg(long, default_value = "target/acceptance")]
    scratch: PathBuf,
    /// Report path
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    /// Skip the end-to-end training criteria
    #[arg(long)]
    unit_only: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let profile = match Profile::parse(&cli.profile) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(cli, profile) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli, profile: Profile) -> booster_core::Result<bool> {
    std::fs::create_dir_all(&cli.scratch)?;
    let mut rows = harness::run_unit_properties();

    if !cli.unit_only {
        let data_dir = match cli.data {
            Some(d) => d,
            None => {
                let d = cli.scratch.join("data");
                if !d.join("train-images-idx3-ubyte").exists() {
                    eprintln!("synthesizing dataset at {}", d.display());
                    data::write_synth_corpus(&d, 6000, 1000, 0, &SynthConfig::default())?;
                }
                d
            }
        };
        rows.extend(harness::run_acceptance(&data_dir, &cli.scratch, profile)?);
    }

    println!("{REPORT_HEADER}");
    for r in &rows {
        println!("{}", r.csv_row());
    }
    harness::write_report(&cli.out, &rows)?;

    let failed: Vec<&CheckReport> = rows.iter().filter(|r| !r.pass).collect();
    if failed.is_empty() {
        eprintln!("{} checks passed", rows.len());
    } else {
        eprintln!("{} of {} checks FAILED:", failed.len(), rows.len());
        for f in &failed {
            eprintln!("  {}", f.name);
        }
    }
    Ok(failed.is_empty())
}
