//! Runs the full acceptance suite. Slow in debug builds; the `acceptance`
//! binary in release mode is the quicker way to see the same lines.

use std::io::Write;

#[test]
fn every_criterion_passes() {
    // written to the stdout handle directly so the lines show without --nocapture
    let _ = writeln!(std::io::stdout());
    let results = virtlab_acceptance::run_suite(&[], |o| {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{}", o.line());
        let _ = out.flush();
    });
    assert_eq!(results.len(), virtlab_acceptance::CRITERIA.len());
    let failed: Vec<&str> = results.iter().filter(|o| !o.pass).map(|o| o.name).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
