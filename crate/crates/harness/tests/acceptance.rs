//! Full-scale acceptance run: every criterion at its stated size and
//! tolerance, one line per criterion. The report lands in
//! `target/tmp/acceptance/`.

use std::io::Write;
use std::path::PathBuf;

use filterlab::acceptance::{budget, run_criterion, Outcome, Scale, ALL};
use filterlab::config::ExperimentConfig;
use filterlab::report::write_report;

const SEED: u64 = 42;

// Written straight to the stderr handle so the lines survive libtest's
// output capture.
fn say(text: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{text}");
}

fn line(o: &Outcome) -> (bool, String) {
    let secs = o.elapsed.as_secs_f64();
    let limit = budget(o.verdict.id);
    let in_time = secs <= limit;
    let ok = o.verdict.passed && in_time;
    let time = if limit.is_finite() {
        format!("{secs:.1} s of {limit:.0} s")
    } else {
        format!("{secs:.1} s")
    };
    let mut text = format!(
        "criterion {:>2} {:<26} {} ({time}) {}",
        o.verdict.id,
        o.verdict.name,
        if ok { "PASS" } else { "FAIL" },
        o.verdict.note
    );
    if !in_time {
        text.push_str(" [over time budget]");
    }
    (ok, text)
}

#[test]
fn acceptance_criteria() {
    let mut outcomes = Vec::new();
    let mut failed = Vec::new();
    for id in ALL {
        let o = run_criterion(id, SEED, Scale::Full);
        let (ok, text) = line(&o);
        say(&text);
        for s in &o.verdict.statistics {
            say(&format!("    {} = {}", s.name, s.value));
        }
        if !ok {
            failed.push(o.verdict.name.clone());
        }
        outcomes.push(o);
    }
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let config = ExperimentConfig::default();
    write_report(&dir, &config, "accept", &outcomes).expect("report written");
    say(&format!("report: {}", dir.display()));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
