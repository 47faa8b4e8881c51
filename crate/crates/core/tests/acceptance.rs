//! Acceptance criteria: one PASS/FAIL line each.
//!
//! Exits 0 after reporting so that a red benchmark criterion does not mask
//! the rest of the suite; set `ACCEPTANCE_STRICT=1` to exit 1 on any FAIL.

use std::time::Instant;

use quickive::checks::{self, CheckResult, Mutation};
use quickive::experiment::{run_experiment, ConfigOverrides, ExperimentConfig, ExperimentKind, ExperimentResult, TrialRow};
use quickive::metrics::median;

const SEED: u64 = 1;

struct Ledger {
    lines: Vec<(bool, String)>,
}

impl Ledger {
    fn record(&mut self, id: &str, name: &str, passed: bool, detail: String) {
        let line = format!("{} {id} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((passed, line));
    }

    fn runtime(&mut self, id: &str, start: Instant, limit_s: f64) {
        let s = start.elapsed().as_secs_f64();
        self.record(id, "runtime", s < limit_s, format!("{s:.1} s (limit {limit_s} s)"));
    }

    fn suite(&mut self, id: &str, results: &[CheckResult], keep: impl Fn(&str) -> bool) {
        for r in results.iter().filter(|r| keep(&r.name)) {
            self.record(
                id,
                &r.name,
                r.passed,
                format!("worst {:.3e} limit {:.3e} ({})", r.worst, r.limit, r.detail),
            );
        }
    }
}

fn config(kind: ExperimentKind, trials: usize) -> ExperimentConfig {
    let flags = ConfigOverrides {
        experiment: Some(kind),
        trials: Some(trials),
        seed: Some(SEED),
        ..ConfigOverrides::default()
    };
    quickive::experiment::resolve_config(None, flags).expect("valid config")
}

fn success(result: &ExperimentResult, alg: &str) -> f64 {
    let s = result.summary_for(alg).expect("algorithm ran");
    // errored runs count as failures here
    s.success as f64 / s.outcomes as f64
}

fn median_iterations(result: &ExperimentResult, alg: &str) -> f64 {
    let mut its: Vec<f64> = result.outcomes_for(alg).map(|o| o.iterations as f64).collect();
    median(&mut its).unwrap_or(f64::NAN)
}

fn extraction(ledger: &mut Ledger) {
    let start = Instant::now();
    let mut cfg = config(ExperimentKind::Extraction, 100);
    cfg.algorithms = vec!["quickive1".into(), "quickive2".into(), "gradient".into()];
    let result = run_experiment(&cfg).expect("extraction runs");
    for alg in ["quickive1", "quickive2"] {
        let s = success(&result, alg);
        ledger.record("AC4", &format!("{alg}_success"), s >= 0.85, format!("{s:.3} (>= 0.85)"));
        let m = median_iterations(&result, alg);
        ledger.record("AC4", &format!("{alg}_median_iterations"), m <= 50.0, format!("{m} (<= 50)"));
    }
    let ratio = median_iterations(&result, "gradient") / median_iterations(&result, "quickive2");
    ledger.record("AC4", "gradient_iteration_ratio", ratio >= 5.0, format!("{ratio:.2} (>= 5)"));
    ledger.runtime("AC4", start, 300.0);
}

fn csv_extraction(ledger: &mut Ledger) {
    let start = Instant::now();
    let mut cfg = config(ExperimentKind::CsvExtraction, 100);
    cfg.algorithms = vec!["quickive2".into(), "quickice2".into()];
    let result = run_experiment(&cfg).expect("csv extraction runs");
    let ive = success(&result, "quickive2");
    let ice = success(&result, "quickice2");
    ledger.record("AC5", "quickive2_success", ive >= 0.75, format!("{ive:.3} (>= 0.75)"));
    ledger.record("AC5", "ice_below_ive", ice < ive, format!("quickice2 {ice:.3} < quickive2 {ive:.3}"));
    ledger.runtime("AC5", start, 600.0);
}

fn separation(ledger: &mut Ledger) {
    let start = Instant::now();
    let cfg = config(ExperimentKind::Separation, 30);
    let result = run_experiment(&cfg).expect("separation runs");
    for alg in ["quickiva1", "quickiva2"] {
        let curve = result.mean_trajectory(alg);
        let last = curve.last().map_or(f64::NAN, |r| r.isr_db_mean);
        ledger.record("AC6", &format!("{alg}_final_isr"), last < -15.0, format!("{last:.2} dB (< -15)"));
        let mut best = f64::INFINITY;
        let mut worst_bump: f64 = 0.0;
        for row in curve.iter().filter(|r| r.iteration >= 5) {
            worst_bump = worst_bump.max(row.isr_db_mean - best);
            best = best.min(row.isr_db_mean);
        }
        ledger.record(
            "AC6",
            &format!("{alg}_monotone_after_5"),
            worst_bump <= 1.0,
            format!("largest rise {worst_bump:.3} dB (<= 1)"),
        );
    }
    ledger.runtime("AC6", start, 600.0);
}

/// Trial rows without the timing column.
fn timeless(result: &ExperimentResult) -> Vec<String> {
    result
        .outcomes
        .iter()
        .map(|o| {
            let r = TrialRow::from(o);
            format!(
                "{},{},{},{:?},{},{},{:?},{:?}",
                r.trial, r.k, r.algorithm, r.sir_db, r.isr_db, r.iterations, r.classification, r.error
            )
        })
        .collect()
}

fn determinism(ledger: &mut Ledger) {
    let kinds = [
        (ExperimentKind::Extraction, 6),
        (ExperimentKind::CsvExtraction, 4),
        (ExperimentKind::Separation, 3),
    ];
    for (kind, trials) in kinds {
        let mut a = config(kind, trials);
        a.n_b = 500;
        a.iterations = 10;
        a.workers = 1;
        let mut b = a.clone();
        b.workers = 3;
        let (ra, rb) = (run_experiment(&a).unwrap(), run_experiment(&b).unwrap());
        let same_trials = timeless(&ra) == timeless(&rb);
        let same_hist = ra.histograms == rb.histograms && ra.iteration_histograms == rb.iteration_histograms;
        let curves = |r: &ExperimentResult| -> Vec<(usize, u64)> {
            r.trajectories
                .iter()
                .flat_map(|(alg, _)| r.mean_trajectory(alg))
                .map(|row| (row.iteration, row.isr_db_mean.to_bits()))
                .collect()
        };
        let same_curves = curves(&ra) == curves(&rb);
        ledger.record(
            "AC8",
            &format!("{kind}_repeatable"),
            same_trials && same_hist && same_curves,
            format!("trials {same_trials}, histograms {same_hist}, trajectories {same_curves} (1 vs 3 workers)"),
        );
    }
}

fn main() {
    let mut ledger = Ledger { lines: Vec::new() };

    let start = Instant::now();
    let identities = checks::algebraic_identities(SEED, 1000);
    ledger.suite("AC1", &identities, |_| true);
    ledger.runtime("AC1", start, 5.0);

    let start = Instant::now();
    let derivatives = checks::derivative_oracles(SEED, 50, Mutation::None);
    ledger.suite("AC2", &derivatives, |_| true);
    ledger.runtime("AC2", start, 30.0);

    let start = Instant::now();
    let samplers = checks::sampler_checks(SEED, 1_000_000, 100_000);
    ledger.suite("AC3", &samplers, |n| n.contains("variance") || n.contains("radial_ks"));
    ledger.runtime("AC3", start, 60.0);

    extraction(&mut ledger);
    csv_extraction(&mut ledger);
    separation(&mut ledger);

    let start = Instant::now();
    let fixed = checks::fixed_point_checks(SEED);
    ledger.suite("AC7", &fixed, |n| n.starts_with("fixed_point"));
    ledger.runtime("AC7", start, 30.0);

    determinism(&mut ledger);

    let failed: Vec<&String> = ledger.lines.iter().filter(|(p, _)| !p).map(|(_, l)| l).collect();
    println!("{} of {} criteria passed", ledger.lines.len() - failed.len(), ledger.lines.len());
    if !failed.is_empty() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
