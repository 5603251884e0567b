//! Acceptance checks computed from stage reports.
//!
//! Checks compare integer success counts and stored errors only, so the
//! same reports always give the same verdicts. Wall-clock budgets are
//! separate [`Check`]s built by [`within_budget`] and are kept out of the
//! summary CSV.

use std::io::Write;

use gap_core::analysis::{ErrorProfile, SuccessTable};
use gap_core::theorylab::{FuzzReport, SweepReport};
use ndiff::gradcheck::OpCheck;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub criterion: u8,
    pub check: String,
    pub value: String,
    pub threshold: String,
    pub pass: bool,
}

fn check(
    criterion: u8,
    name: impl Into<String>,
    value: impl Into<String>,
    threshold: &str,
    pass: bool,
) -> Check {
    Check {
        criterion,
        check: name.into(),
        value: value.into(),
        threshold: threshold.into(),
        pass,
    }
}

pub fn within_budget(criterion: u8, what: &str, secs: f64, limit: f64) -> Check {
    check(
        criterion,
        format!("{what} runtime"),
        format!("{secs:.1}s"),
        &format!("< {limit}s"),
        secs < limit,
    )
}

pub fn theorem(r: &FuzzReport, worst_case_expected: usize) -> Vec<Check> {
    vec![
        check(
            1,
            "violations among satisfying instances",
            r.violations_when_satisfied.to_string(),
            "= 0",
            r.violations_when_satisfied == 0,
        ),
        check(
            1,
            "satisfying instances",
            r.satisfying.to_string(),
            "> 0",
            r.satisfying > 0,
        ),
        check(
            1,
            "worst-case instances",
            r.worst_case_trials.to_string(),
            &format!(">= {worst_case_expected}"),
            r.worst_case_trials >= worst_case_expected,
        ),
        check(
            1,
            "worst-case violations",
            r.worst_case_violations.to_string(),
            "= 0",
            r.worst_case_violations == 0,
        ),
        check(
            1,
            "worst-case instances failing the conditions",
            r.chain_failures.to_string(),
            "= 0",
            r.chain_failures == 0,
        ),
    ]
}

pub fn gradients(ops: &[OpCheck], losses: &[(String, f64)]) -> Vec<Check> {
    let mut out: Vec<Check> = ops
        .iter()
        .map(|c| {
            check(
                2,
                format!("op {}", c.name),
                format!("{:.2e}", c.worst),
                "< 1e-4",
                c.worst < 1e-4,
            )
        })
        .collect();
    out.extend(losses.iter().map(|(v, e)| {
        check(
            2,
            format!("training_loss {v}"),
            format!("{e:.2e}"),
            "< 1e-3",
            *e < 1e-3,
        )
    }));
    out
}

/// Success counts per decile at one magnitude, lowest bucket first.
fn decile_counts(r: &SweepReport, magnitude: f64) -> Option<Vec<(u32, usize)>> {
    (0..10)
        .map(|i| {
            r.cell((10 * i, 10 * i + 10), magnitude)
                .map(|c| (10 * i, c.successes))
        })
        .collect()
}

/// `|a - b| <= pts` percentage points of `n` trials.
fn within_points(a: usize, b: usize, pts: usize, n: usize) -> bool {
    100 * a.abs_diff(b) <= pts * n
}

/// `a - b >= pts` percentage points of `n` trials.
fn at_least_points_above(a: usize, b: usize, pts: usize, n: usize) -> bool {
    100 * a >= 100 * b + pts * n
}

fn pct(k: usize, n: usize) -> String {
    format!("{:.1}%", 100.0 * k as f64 / n as f64)
}

pub fn noise_cost(r: &SweepReport) -> Vec<Check> {
    let n = r.baseline.trials;
    let base = r.baseline.successes;
    let Some(d) = decile_counts(r, 0.5) else {
        return vec![check(3, "decile cells at 0.5", "missing", "present", false)];
    };
    let (low, high) = (d[0].1, d[9].1);
    let inversions = d.windows(2).filter(|w| w[1].1 < w[0].1).count();
    vec![
        check(
            3,
            "[90,100) vs baseline",
            format!("{} vs {}", pct(high, n), pct(base, n)),
            "within 5 points",
            within_points(high, base, 5, n),
        ),
        check(
            3,
            "[0,10) below [90,100)",
            format!("{} vs {}", pct(low, n), pct(high, n)),
            ">= 15 points",
            at_least_points_above(high, low, 15, n),
        ),
        check(
            3,
            "decile inversions",
            format!(
                "{} ({})",
                inversions,
                d.iter()
                    .map(|x| x.1.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            ),
            "<= 1",
            inversions <= 1,
        ),
    ]
}

pub fn noise_model(r: &SweepReport) -> Vec<Check> {
    let n = r.baseline.trials;
    let base = r.baseline.successes;
    let Some(d) = decile_counts(r, 0.2) else {
        return vec![check(4, "decile cells at 0.2", "missing", "present", false)];
    };
    let mut out = vec![check(
        4,
        "[0,10) below [90,100)",
        format!("{} vs {}", pct(d[0].1, n), pct(d[9].1, n)),
        ">= 10 points",
        at_least_points_above(d[9].1, d[0].1, 10, n),
    )];
    for &(lo, k) in &d[5..] {
        out.push(check(
            4,
            format!("[{lo},{}) vs baseline", lo + 10),
            format!("{} vs {}", pct(k, n), pct(base, n)),
            "within 5 points",
            within_points(k, base, 5, n),
        ));
    }
    out
}

pub fn harness(table: &SuccessTable) -> Vec<Check> {
    let rate = |v: &str, t: &str| table.get(v, t).map(|r| (r.successes, r.trials));
    let mut out = Vec::new();
    for (v, t, cmp, pts) in [
        ("oracle", "pointnav", ">", 95),
        ("oracle", "blockpush-task1", ">", 70),
        ("random", "blockpush-task1", "<", 15),
    ] {
        let name = format!("{v} on {t}");
        match rate(v, t) {
            Some((k, n)) => {
                let pass = if cmp == ">" {
                    100 * k > pts * n
                } else {
                    100 * k < pts * n
                };
                out.push(check(
                    5,
                    name,
                    format!("{k}/{n}"),
                    &format!("{cmp} {pts}%"),
                    pass,
                ));
            }
            None => out.push(check(5, name, "missing", "present", false)),
        }
    }
    out
}

/// Top-`k` MSE at step `h`, or NaN if the row is missing.
fn top(p: &ErrorProfile, v: &str, k: usize, h: usize) -> f64 {
    p.get(v, k, h).map_or(f64::NAN, |r| r.mse)
}

pub fn error_redistribution(profiles: &[(u64, ErrorProfile)], horizon: usize) -> Vec<Check> {
    let n = profiles.len();
    let mut out = Vec::new();
    let (mut gap_wins, mut no_goal_wins) = (0, 0);
    for (seed, p) in profiles {
        let (g, s, ng) = (
            top(p, "gap", 10, horizon),
            top(p, "standard", 10, horizon),
            top(p, "gap_no_goal", 10, horizon),
        );
        gap_wins += usize::from(g < s);
        no_goal_wins += usize::from(ng < s);
        out.push(check(
            6,
            format!("seed {seed} top-10 mse gap / standard / gap_no_goal"),
            format!("{g:.3e} / {s:.3e} / {ng:.3e}"),
            "informational",
            true,
        ));
    }
    out.push(check(
        6,
        "seeds with gap top-10 < standard top-10",
        format!("{gap_wins}/{n}"),
        ">= 4 of 5",
        gap_wins * 5 >= 4 * n && n > 0,
    ));
    out.push(check(
        6,
        "seeds with gap_no_goal top-10 < standard top-10",
        format!("{no_goal_wins}/{n}"),
        "not a majority",
        2 * no_goal_wins <= n,
    ));
    out
}

pub fn downstream(tables: &[(u64, SuccessTable)]) -> Vec<Check> {
    let n = tables.len();
    let mut out = Vec::new();
    let mut ok = 0;
    for (seed, t) in tables {
        let k = |v: &str, task: &str| t.get(v, task).map_or(0, |r| r.successes);
        let (g1, s1) = (
            k("gap", "blockpush-task1"),
            k("standard", "blockpush-task1"),
        );
        let (g2, s2) = (
            k("gap", "blockpush-task2"),
            k("standard", "blockpush-task2"),
        );
        let good = g1 >= s1 && g2 > s2;
        ok += usize::from(good);
        out.push(check(
            7,
            format!("seed {seed} gap vs standard (task1; task2)"),
            format!(
                "{g1} vs {s1}; {g2} vs {s2} ({})",
                if good { "win" } else { "no win" }
            ),
            "informational",
            true,
        ));
    }
    out.push(check(
        7,
        "seeds where gap wins",
        format!("{ok}/{n}"),
        ">= 2 of 3",
        ok * 3 >= 2 * n && n > 0,
    ));
    out
}

/// Whether every check of `criterion` passed. Informational rows always
/// pass, so they never decide a verdict.
pub fn verdict(checks: &[Check], criterion: u8) -> bool {
    let mut any = false;
    for c in checks.iter().filter(|c| c.criterion == criterion) {
        any = true;
        if !c.pass {
            return false;
        }
    }
    any
}

pub fn write_summary<W: Write>(checks: &[Check], w: W) -> anyhow::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["criterion", "check", "value", "threshold", "pass"])?;
    for c in checks {
        out.write_record([
            c.criterion.to_string(),
            c.check.clone(),
            c.value.clone(),
            c.threshold.clone(),
            c.pass.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
