//! One line per criterion, written past the test harness's output capture.

use std::io::Write;

use s2s_acceptance::{
    criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
    criterion_8, Outcome,
};

#[test]
fn acceptance() {
    let checks: [fn() -> Outcome; 8] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
    ];
    let mut failed = Vec::new();
    // the harness has already printed "test acceptance ... " on this line
    writeln!(std::io::stdout()).unwrap();
    for check in checks {
        let outcome = check();
        let mut out = std::io::stdout().lock();
        writeln!(out, "{outcome}").unwrap();
        out.flush().unwrap();
        if !outcome.passed {
            failed.push(outcome.criterion);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
