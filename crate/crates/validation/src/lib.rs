//! Minimal runner for long acceptance checks: each check runs in turn,
//! panics count as failures, and one status line is printed per check.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

pub type Check = fn() -> Result<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "{} {:<22} {:>8.1}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

pub fn run_one(name: &'static str, check: Check) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = match catch_unwind(AssertUnwindSafe(check)) {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(p) => (false, format!("panicked: {}", panic_message(p.as_ref()))),
    };
    Outcome {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

/// Runs the checks whose name contains any of `filters` (all when empty),
/// printing each line as it finishes. Returns the outcomes in order.
pub fn run_all(checks: &[(&'static str, Check)], filters: &[String]) -> Vec<Outcome> {
    let selected = checks
        .iter()
        .filter(|(n, _)| filters.is_empty() || filters.iter().any(|f| n.contains(f.as_str())));
    let mut out = Vec::new();
    for (name, check) in selected {
        let o = run_one(name, *check);
        println!("{}", o.line());
        out.push(o);
    }
    out
}

/// Filters from a harness command line, skipping libtest-style flags.
pub fn filters_from_args(args: impl Iterator<Item = String>) -> Vec<String> {
    args.skip(1).filter(|a| !a.starts_with('-')).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok() -> Result<String, String> {
        Ok("fine".into())
    }

    fn bad() -> Result<String, String> {
        Err("off by 3".into())
    }

    fn boom() -> Result<String, String> {
        panic!("exploded")
    }

    #[test]
    fn outcomes_and_lines() {
        let checks: [(&'static str, Check); 3] = [("ok", ok), ("bad", bad), ("boom", boom)];
        let out = run_all(&checks, &[]);
        assert_eq!(out.iter().map(|o| o.passed).collect::<Vec<_>>(), [true, false, false]);
        assert!(out[0].line().starts_with("PASS ok"));
        assert!(out[1].line().ends_with("off by 3"));
        assert_eq!(out[2].detail, "panicked: exploded");
        let only = run_all(&checks, &["bo".to_string()]);
        assert_eq!(only.len(), 1);
    }

    #[test]
    fn filters_skip_flags() {
        let args = ["bin", "--nocapture", "units", "-q"].map(String::from);
        assert_eq!(filters_from_args(args.into_iter()), vec!["units".to_string()]);
    }
}
