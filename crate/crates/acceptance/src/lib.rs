//! Acceptance checks for the whole system. Each `criterion_*` function runs
//! one check end to end and returns an [`Outcome`] instead of panicking, so
//! a runner can report every line before deciding.

use std::fmt;
use std::time::{Duration, Instant};

pub mod server;

mod checks;

pub use checks::{
    criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
    criterion_8,
};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub criterion: u8,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} criterion {}: {} ({:.1} s) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.criterion,
            self.title,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

/// A failed check carries its message; a passing one its summary.
pub type Check = Result<String, String>;

/// Run `body` and time it against `budget`.
pub fn run(criterion: u8, title: &'static str, budget: Duration, body: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(body))
        .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
    let elapsed = start.elapsed();
    let (passed, detail) = match result {
        Ok(d) if elapsed <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over the {} s budget", budget.as_secs())),
        Err(e) => (false, e),
    };
    Outcome {
        criterion,
        title,
        passed,
        detail,
        elapsed,
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

/// `Err(msg)` unless `cond`.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub(crate) fn fail<E: fmt::Display>(context: &str) -> impl FnOnce(E) -> String + '_ {
    move |e| format!("{context}: {e}")
}
