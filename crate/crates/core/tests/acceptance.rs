//! Acceptance suite: runs the ten acceptance experiments with their built-in
//! configurations and prints one PASS/FAIL line per criterion.
//!
//! Positional arguments select criteria by number or experiment id
//! (`cargo test --test acceptance -- 1 E5`); the default is all of them.
//! Reports land under `$CARGO_TARGET_TMPDIR/acceptance/<id>/`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use kpzlab::harness::{run_experiment, ExperimentConfig, ExperimentId};

const CRITERIA: [(usize, &str, ExperimentId); 10] = [
    (1, "exact identities", ExperimentId::Identities),
    (2, "generator-residual scaling", ExperimentId::E2),
    (3, "stationarity", ExperimentId::E1),
    (4, "Boltzmann-Gibbs decay", ExperimentId::E3),
    (5, "canonical-expectation decay", ExperimentId::E4),
    (6, "SHE comparison", ExperimentId::E5),
    (7, "stopping-time monitors", ExperimentId::E6),
    (8, "bridge covariance", ExperimentId::E7),
    (9, "Kipnis-Varadhan decay", ExperimentId::E8),
    (10, "coupling decay", ExperimentId::E9),
];

fn selected(filters: &[String], number: usize, id: ExperimentId) -> bool {
    filters.is_empty()
        || filters.iter().any(|f| f == &number.to_string() || f.parse::<ExperimentId>().is_ok_and(|x| x == id))
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut failures = 0;
    for (number, label, id) in CRITERIA {
        if !selected(&filters, number, id) {
            continue;
        }
        let mut cfg = ExperimentConfig::defaults(id);
        cfg.output = Some(root.join(id.to_string()));
        let start = Instant::now();
        let outcome = run_experiment(&cfg);
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(report) if report.passed() => {
                println!("PASS criterion {number:>2}: {label} ({id}, {secs:.1}s)");
            }
            Ok(report) => {
                failures += 1;
                println!("FAIL criterion {number:>2}: {label} ({id}, {secs:.1}s)");
                for c in report.checks.iter().filter(|c| !c.pass) {
                    println!("     {} = {} (threshold {})", c.name, c.value, c.threshold);
                }
            }
            Err(e) => {
                failures += 1;
                println!("FAIL criterion {number:>2}: {label} ({id}): error: {e}");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
