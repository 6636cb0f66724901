//! Run the acceptance checks and print one PASS/FAIL line per criterion.
//! Arguments restrict the run to the named criteria.

use std::process::ExitCode;

fn main() -> ExitCode {
    let only: Vec<String> = std::env::args().skip(1).collect();
    let results = virtlab_acceptance::run_suite(&only, |o| println!("{}", o.line()));
    let failed = results.iter().filter(|o| !o.pass).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
