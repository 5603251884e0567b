//! Acceptance run: the full `reproduce --seed 7` pipeline at default
//! settings (criteria 1 to 7), the relabeling and format property suites
//! (criterion 8) and a second independent reproduce run compared byte for
//! byte (criterion 9). Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Set `GAP_ACCEPTANCE_DIR` to keep the two run directories; rerunning
//! with the same directory resumes finished stages.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use gap_cli::commands::Ctx;
use gap_cli::config::Config;
use gap_cli::criteria::Check;
use gap_cli::reproduce::{self, ReproduceReport, EVALUATED};
use gap_core::data::{self, Dataset, GoalMode, WindowSpec};
use gap_core::envs::EnvSpec;
use gap_core::planner::{self, CemConfig, OracleModel};
use gap_core::rng;
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};

const SEED: u64 = 7;
const CASES: u32 = 256;

fn run(out: &Path) -> Result<ReproduceReport, String> {
    let ctx = Ctx {
        cfg: Config::default(),
        seed: SEED,
        out: out.to_path_buf(),
        command: format!("gap reproduce --seed {SEED} --out {}", out.display()),
    };
    let started = Instant::now();
    let report = reproduce::reproduce(&ctx).map_err(|e| e.to_string())?;
    eprintln!(
        "reproduce into {} took {:.0}s",
        out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(report)
}

fn describe(c: &Check) -> String {
    format!(
        "{} {}: {} (need {})",
        if c.pass { "ok" } else { "FAIL" },
        c.check,
        c.value,
        c.threshold
    )
}

fn runner() -> TestRunner {
    TestRunner::new(RunnerConfig {
        cases: CASES,
        failure_persistence: None,
        ..RunnerConfig::default()
    })
}

fn suite(name: &str, f: impl FnOnce(&mut TestRunner) -> Result<(), String>) -> (String, bool) {
    match f(&mut runner()) {
        Ok(()) => (format!("ok {name}: {CASES} cases"), true),
        Err(e) => (format!("FAIL {name}: {e}"), false),
    }
}

fn blockpush_dataset() -> Dataset {
    data::collect(&EnvSpec::from_id("blockpush-task1").unwrap(), 8, 30, 31).unwrap()
}

fn zero_residual_at_goal(r: &mut TestRunner) -> Result<(), String> {
    let ds = blockpush_dataset();
    let strat = (any::<u64>(), 2usize..=31, any::<bool>());
    r.run(&strat, |(seed, window_len, full)| {
        // with H = window_len - 1 the start is forced to the window head and
        // the last target is the relabeled goal itself
        let h = if full {
            window_len - 1
        } else {
            (seed % window_len as u64) as usize
        };
        let spec = WindowSpec {
            window_len,
            goal_mode: GoalMode::WindowEnd,
        };
        let w = data::sample_window(&ds, &spec, h, &mut rng::stream(seed, 0)).unwrap();
        for (k, res) in w.residuals.iter().enumerate() {
            for ((ri, si), gi) in res.iter().zip(w.state(k).iter()).zip(w.goal.iter()) {
                prop_assert_eq!(ri + si, *gi);
            }
        }
        if w.t + h == window_len - 1 {
            prop_assert!(w.residuals[h].iter().all(|&x| x == 0.0));
        }
        if full {
            prop_assert_eq!(w.t, 0);
        }
        Ok(())
    })
    .map_err(|e| e.to_string())
}

fn dataset_roundtrip(r: &mut TestRunner) -> Result<(), String> {
    let strat = (0usize..3, 1usize..6, 1usize..25, any::<u64>());
    r.run(&strat, |(env_i, episodes, length, seed)| {
        let env =
            EnvSpec::from_id(["pointnav", "blockpush-task1", "blockpush-task2"][env_i]).unwrap();
        let ds = data::collect(&env, episodes, length, seed).unwrap();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        let back = Dataset::read_from(bytes.as_slice()).unwrap();
        back.verify(&env).unwrap();
        prop_assert_eq!(&back.env_id, &ds.env_id);
        prop_assert_eq!(back.episode_len, ds.episode_len);
        prop_assert_eq!(back.episodes.len(), ds.episodes.len());
        for (a, b) in ds.episodes.iter().zip(&back.episodes) {
            let pairs = a
                .states
                .iter()
                .zip(&b.states)
                .flat_map(|(x, y)| x.iter().zip(y.iter()));
            let act = a
                .actions
                .iter()
                .zip(&b.actions)
                .flat_map(|(x, y)| x.iter().zip(y.iter()));
            for (u, v) in pairs.chain(act) {
                prop_assert!((u - v).abs() <= 1e-6, "{u} vs {v}");
            }
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        prop_assert_eq!(again, bytes);
        Ok(())
    })
    .map_err(|e| e.to_string())
}

fn window_boundary(r: &mut TestRunner) -> Result<(), String> {
    let ds = blockpush_dataset();
    let strat = (any::<u64>(), 1usize..=33, 0usize..35, any::<bool>());
    r.run(&strat, |(seed, window_len, h, episode_end)| {
        let goal_mode = if episode_end {
            GoalMode::EpisodeEnd
        } else {
            GoalMode::WindowEnd
        };
        let spec = WindowSpec {
            window_len,
            goal_mode,
        };
        let n_states = ds.episode_len + 1;
        let got = data::sample_window(&ds, &spec, h, &mut rng::stream(seed, 0));
        if window_len > n_states || h + 1 > window_len {
            prop_assert!(got.is_err());
            return Ok(());
        }
        let w = got.unwrap();
        let ep = &ds.episodes[w.episode];
        prop_assert!(w.offset + window_len <= n_states);
        prop_assert!(w.t + h < window_len);
        prop_assert_eq!(w.horizon(), h);
        prop_assert_eq!(&w.anchor, &ep.states[w.offset]);
        for k in 0..=h {
            prop_assert_eq!(w.state(k), &ep.states[w.offset + w.t + k]);
        }
        for k in 0..h {
            prop_assert_eq!(&w.actions[k], &ep.actions[w.offset + w.t + k]);
        }
        let goal = match goal_mode {
            GoalMode::WindowEnd => &ep.states[w.offset + window_len - 1],
            GoalMode::EpisodeEnd => &ep.states[ds.episode_len],
        };
        prop_assert_eq!(&w.goal, goal);
        Ok(())
    })
    .map_err(|e| e.to_string())
}

fn cem_monotone_elites(r: &mut TestRunner) -> Result<(), String> {
    let cem = CemConfig {
        candidates: 80,
        elites: 8,
        horizon: 8,
        iterations: 4,
        ..CemConfig::default()
    };
    let strat = (any::<u64>(), 0u64..10_000, 0usize..2);
    r.run(&strat, |(seed, task, env_i)| {
        let env = EnvSpec::from_id(["pointnav", "blockpush-task1"][env_i]).unwrap();
        let (s0, goal) = env.sample_task(task);
        let model = OracleModel { env: &env };
        let plan = planner::latent_mpc(&model, &env, &s0, &goal, &cem, seed).unwrap();
        prop_assert_eq!(plan.elite_means.len(), cem.iterations);
        for w in plan.elite_means.windows(2) {
            prop_assert!(w[1] <= w[0], "elite means {:?}", plan.elite_means);
        }
        Ok(())
    })
    .map_err(|e| e.to_string())
}

fn argmin_ties(r: &mut TestRunner) -> Result<(), String> {
    let strat = prop::collection::vec(0u8..4, 1..64);
    r.run(&strat, |costs| {
        let costs: Vec<f64> = costs.into_iter().map(f64::from).collect();
        let i = planner::select_open_loop(&costs).unwrap();
        let first = costs
            .iter()
            .enumerate()
            .fold(0, |best, (j, &c)| if c < costs[best] { j } else { best });
        prop_assert_eq!(i, first);
        Ok(())
    })
    .map_err(|e| e.to_string())
}

fn run_dirs() -> (Option<tempfile::TempDir>, PathBuf, PathBuf) {
    match std::env::var_os("GAP_ACCEPTANCE_DIR") {
        Some(base) => {
            let base = PathBuf::from(base);
            (None, base.join("run-a"), base.join("run-b"))
        }
        None => {
            let tmp = tempfile::tempdir().expect("temp dir");
            let (a, b) = (tmp.path().join("run-a"), tmp.path().join("run-b"));
            (Some(tmp), a, b)
        }
    }
}

fn main() -> ExitCode {
    let mut lines: Vec<(u8, bool, Vec<String>)> = Vec::new();
    let (_tmp, dir_a, dir_b) = run_dirs();

    let first = run(&dir_a);
    for c in EVALUATED {
        match &first {
            Ok(rep) => {
                let mut details: Vec<String> = rep
                    .checks
                    .iter()
                    .filter(|x| x.criterion == c)
                    .map(describe)
                    .collect();
                details.extend(
                    rep.budgets
                        .iter()
                        .filter(|x| x.criterion == c)
                        .map(describe),
                );
                lines.push((c, rep.criterion_passed(c), details));
            }
            Err(e) => lines.push((c, false, vec![format!("reproduce failed: {e}")])),
        }
    }

    let suites = [
        suite("zero residual at goal", zero_residual_at_goal),
        suite("dataset round-trip", dataset_roundtrip),
        suite("window boundary", window_boundary),
        suite("CEM monotone elite improvement", cem_monotone_elites),
        suite("argmin tie-breaking", argmin_ties),
    ];
    let ok = suites.iter().all(|s| s.1);
    lines.push((8, ok, suites.into_iter().map(|s| s.0).collect()));

    let det = match (&first, run(&dir_b)) {
        (Ok(_), Ok(_)) => match reproduce::compare_summaries(&dir_a, &dir_b) {
            Ok(()) => (true, "summary CSVs are byte-identical".to_string()),
            Err(e) => (false, e.to_string()),
        },
        (_, Err(e)) => (false, format!("second reproduce failed: {e}")),
        (Err(_), _) => (false, "first reproduce failed".to_string()),
    };
    lines.push((9, det.0, vec![det.1]));

    println!();
    for (c, _, details) in &lines {
        for d in details {
            println!("  [{c}] {d}");
        }
    }
    let mut all = true;
    for (c, pass, _) in &lines {
        all &= pass;
        println!("criterion {c}: {}", if *pass { "PASS" } else { "FAIL" });
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
