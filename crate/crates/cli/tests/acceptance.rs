//! Acceptance suite runner. Prints one `criterion N: PASS|FAIL` line per
//! criterion and exits non-zero if any fails.
//!
//! `cargo test -p bdlab-cli --test acceptance` runs all eleven; numeric
//! arguments after `--` select a subset, e.g. `-- 1 7`.

use std::process::ExitCode;

use bdlab_cli::{run_criterion, CRITERIA};

const SEED: u64 = 0;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (id, title) in CRITERIA {
            println!("criterion_{id:02}: test  ({title})");
        }
        return ExitCode::SUCCESS;
    }
    let mut ids: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    if ids.is_empty() {
        ids = CRITERIA.iter().map(|c| c.0).collect();
    }
    let mut failed = 0;
    for id in ids {
        let outcome = run_criterion(id, SEED);
        println!("{}", outcome.summary());
        if !outcome.passed() {
            failed += 1;
        }
    }
    if failed == 0 {
        println!("acceptance: all criteria PASS");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria FAIL");
        ExitCode::FAILURE
    }
}
