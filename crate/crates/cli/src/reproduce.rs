//! End-to-end pipeline: theorem fuzz, both noise sweeps, harness sanity
//! runs, gradient checks, data collection, training, error profiles,
//! success tables and a rollout dump, followed by the acceptance checks.
//!
//! Every stage leaves `stages/<name>.done` (its wall time) and
//! `stages/<name>.csv` (its checks), plus `stages/<name>.outputs` listing
//! the artifacts it wrote. A rerun into the same directory skips
//! finished stages, and a partly finished training stage only retrains the
//! models that have no completed checkpoint. `summary.csv` holds the checks
//! and nothing time-dependent; wall-clock budgets go to `budgets.csv`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use gap_core::analysis::{self, ModelPredictor, StatePredictor, SuccessTable};
use gap_core::data::{self, Dataset};
use gap_core::envs::EnvSpec;
use gap_core::models::{self, ModelBundle, ModelConfig, Variant};
use gap_core::theorylab::{self, NoiseTarget};
use rayon::prelude::*;

use crate::commands::{self, write_file, Ctx};
use crate::criteria::{self, Check};
use crate::manifest::{RunManifest, CONFIG_FILE, MANIFEST_FILE};
use crate::Failure;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const BUDGETS_FILE: &str = "budgets.csv";

/// Variants trained for every seed; the first seed also trains the rest.
pub const PROFILED: [Variant; 3] = [Variant::Gap, Variant::Standard, Variant::GapNoGoal];
/// Variants planned with in the success tables.
pub const PLANNED: [Variant; 2] = [Variant::Gap, Variant::Standard];

/// Criteria that `reproduce` itself evaluates; the property suites and the
/// determinism rerun live in the acceptance test target.
pub const EVALUATED: [u8; 7] = [1, 2, 3, 4, 5, 6, 7];

#[derive(Clone, Debug)]
pub struct ReproduceReport {
    pub checks: Vec<Check>,
    pub budgets: Vec<Check>,
    pub out: PathBuf,
}

impl ReproduceReport {
    pub fn criterion_passed(&self, c: u8) -> bool {
        criteria::verdict(&self.checks, c)
            && self
                .budgets
                .iter()
                .filter(|b| b.criterion == c)
                .all(|b| b.pass)
    }

    pub fn passed(&self) -> bool {
        EVALUATED.iter().all(|&c| self.criterion_passed(c))
    }
}

/// Seeds used for training and evaluation: `seed, seed + 1, ...`.
pub fn run_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| seed + i).collect()
}

fn read_checks(path: &Path) -> anyhow::Result<Vec<Check>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(Check {
                criterion: rec[0].parse()?,
                check: rec[1].to_string(),
                value: rec[2].to_string(),
                threshold: rec[3].to_string(),
                pass: rec[4].parse()?,
            })
        })
        .collect()
}

struct Pipeline<'a> {
    ctx: &'a Ctx,
    manifest: RunManifest,
    checks: Vec<Check>,
    budgets: Vec<Check>,
}

impl Pipeline<'_> {
    fn out(&self) -> &Path {
        &self.ctx.out
    }

    fn record(&mut self, rel: impl Into<PathBuf>) -> anyhow::Result<()> {
        self.manifest.add_output(rel);
        self.manifest.write(&self.ctx.out)
    }

    /// Runs `body` unless the stage already finished. `body` returns the
    /// stage's checks, its budget checks (given the elapsed seconds) and
    /// the artifacts it wrote.
    fn stage(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut Self) -> anyhow::Result<(Vec<Check>, Vec<PathBuf>)>,
        budget: impl FnOnce(f64) -> Vec<Check>,
    ) -> Result<(), Failure> {
        let done = Path::new("stages").join(format!("{name}.done"));
        let checks_rel = Path::new("stages").join(format!("{name}.csv"));
        let budgets_rel = Path::new("stages").join(format!("{name}.budget.csv"));
        let outputs_rel = Path::new("stages").join(format!("{name}.outputs"));
        let (checks, budgets) = if self.out().join(&done).exists() {
            eprintln!("[{name}] already done, reusing");
            let listed =
                fs::read_to_string(self.out().join(&outputs_rel)).context("stage outputs")?;
            for a in listed.lines().filter(|l| !l.is_empty()) {
                self.record(a)?;
            }
            (
                read_checks(&self.out().join(&checks_rel))?,
                read_checks(&self.out().join(&budgets_rel))?,
            )
        } else {
            eprintln!("[{name}] running");
            let started = Instant::now();
            let (checks, artifacts) =
                body(self).map_err(|e| Failure::Internal(e.context(format!("stage {name}"))))?;
            let secs = started.elapsed().as_secs_f64();
            let budgets = budget(secs);
            let mut listed = String::new();
            for a in artifacts {
                listed.push_str(&format!("{}\n", a.display()));
                self.record(a)?;
            }
            fs::write(self.out().join(&outputs_rel), listed).context("stage outputs")?;
            write_file(&self.out().join(&checks_rel), |w| {
                criteria::write_summary(&checks, w)
            })?;
            write_file(&self.out().join(&budgets_rel), |w| {
                criteria::write_summary(&budgets, w)
            })?;
            fs::write(self.out().join(&done), format!("seconds={secs:.3}\n"))
                .context("stage marker")?;
            eprintln!("[{name}] finished in {secs:.1}s");
            (checks, budgets)
        };
        for rel in [done, checks_rel, budgets_rel, outputs_rel] {
            self.record(rel)?;
        }
        self.checks.extend(checks);
        self.budgets.extend(budgets);
        Ok(())
    }
}

fn dataset_rel(seed: u64) -> PathBuf {
    Path::new("data").join(format!("seed-{seed}.gapd"))
}

fn model_rel(seed: u64, v: Variant) -> PathBuf {
    Path::new("models")
        .join(format!("seed-{seed}"))
        .join(v.tag())
}

const MODEL_DONE: &str = "train_seconds.txt";

fn model_seconds(dir: &Path) -> anyhow::Result<f64> {
    let text = fs::read_to_string(dir.join(MODEL_DONE))?;
    Ok(text.trim().parse()?)
}

/// Checks the directory is fresh, or holds an earlier run of the same
/// seed and config that can be resumed.
fn prepare_out(ctx: &Ctx) -> Result<(), Failure> {
    let out = &ctx.out;
    let seed_file = out.join("stages").join("seed");
    if out.exists() {
        let nonempty = fs::read_dir(out)
            .map_err(anyhow::Error::from)?
            .next()
            .is_some();
        if nonempty && !seed_file.exists() {
            return Err(Failure::Usage(format!(
                "{} is not empty and holds no earlier reproduce run",
                out.display()
            )));
        }
        if seed_file.exists() {
            let prev_seed = fs::read_to_string(&seed_file).map_err(anyhow::Error::from)?;
            let prev_cfg = fs::read_to_string(out.join(CONFIG_FILE)).unwrap_or_default();
            if prev_seed.trim() != ctx.seed.to_string() || prev_cfg != ctx.cfg.to_text() {
                return Err(Failure::Usage(format!(
                    "{} holds a run with a different seed or config",
                    out.display()
                )));
            }
        }
    }
    fs::create_dir_all(out.join("stages")).map_err(anyhow::Error::from)?;
    fs::write(&seed_file, ctx.seed.to_string()).map_err(anyhow::Error::from)?;
    Ok(())
}

pub fn reproduce(ctx: &Ctx) -> Result<ReproduceReport, Failure> {
    let cfg = &ctx.cfg;
    if cfg.eval_seeds > cfg.profile_seeds {
        return Err(Failure::Usage(
            "eval.seeds cannot exceed profile.seeds".into(),
        ));
    }
    prepare_out(ctx)?;
    let manifest = RunManifest::begin(&ctx.out, &ctx.command, &cfg.to_text(), &[])?;
    let mut p = Pipeline {
        ctx,
        manifest,
        checks: Vec::new(),
        budgets: Vec::new(),
    };
    p.record(Path::new("stages").join("seed"))?;
    let seeds = run_seeds(ctx.seed, cfg.profile_seeds);
    let task1 = cfg.env_spec();
    let task2 = EnvSpec::from_id("blockpush-task2")?;

    p.stage(
        "theorem-fuzz",
        |p| {
            let r = theorylab::theorem_fuzz(&cfg.fuzz_config(), p.ctx.seed)?;
            fs::write(p.out().join("fuzz.txt"), commands::fuzz_text(&r))?;
            Ok((criteria::theorem(&r, 1000), vec!["fuzz.txt".into()]))
        },
        |s| vec![criteria::within_budget(1, "theorem fuzz", s, 10.0)],
    )?;

    for (target, criterion) in [(NoiseTarget::Cost, 3u8), (NoiseTarget::Model, 4u8)] {
        let name = format!("noise-{}", target.tag());
        p.stage(
            &name,
            |p| {
                let env = EnvSpec::from_id(&cfg.noise_env)?;
                let r =
                    theorylab::noise_sweep(&env, target, &cfg.sweep_config(target), p.ctx.seed)?;
                let file = format!("noise_{}.csv", target.tag());
                commands::write_sweep(&p.out().join(&file), &r)?;
                let checks = match target {
                    NoiseTarget::Cost => criteria::noise_cost(&r),
                    NoiseTarget::Model => criteria::noise_model(&r),
                };
                Ok((checks, vec![file.into()]))
            },
            |s| {
                vec![criteria::within_budget(
                    criterion,
                    &format!("{} noise sweep", target.tag()),
                    s,
                    120.0,
                )]
            },
        )?;
    }

    p.stage(
        "harness",
        |p| {
            let mut table = SuccessTable::default();
            for env in [EnvSpec::pointnav(), task1.clone()] {
                let t = analysis::success_table(
                    &[],
                    std::slice::from_ref(&env),
                    cfg.harness_trials,
                    &cfg.cem_for(&env),
                    p.ctx.seed,
                )?;
                table.rows.extend(t.rows);
            }
            write_file(&p.out().join("harness.csv"), |w| Ok(table.write_csv(w)?))?;
            Ok((criteria::harness(&table), vec!["harness.csv".into()]))
        },
        |_| Vec::new(),
    )?;

    p.stage(
        "gradcheck",
        |p| {
            let ops = ndiff::gradcheck::op_suite(100);
            let tiny = ModelConfig {
                latent_dim: 4,
                hidden: vec![8],
                dyn_hidden: vec![8],
                beta: cfg.model_beta,
            };
            let ds = data::collect(&task1, 8, 20, p.ctx.seed)?;
            let mut losses = Vec::new();
            for v in Variant::ALL {
                let mut m = ModelBundle::new(v, &task1, tiny.clone(), p.ctx.seed);
                let windows =
                    data::sample_batch(&ds, &cfg.train_config().window, 3, 4, p.ctx.seed, 0)?;
                let batch = m.batch(&task1, &windows)?;
                let noise = models::training_noise(p.ctx.seed, 0, batch.size(), m.latent_dim());
                losses.push((
                    v.to_string(),
                    models::loss_gradient_check(&mut m, &batch, &noise, 10, p.ctx.seed)?,
                ));
            }
            let checks = criteria::gradients(&ops, &losses);
            Ok((checks, Vec::new()))
        },
        |s| vec![criteria::within_budget(2, "gradient checks", s, 30.0)],
    )?;

    p.stage(
        "collect",
        |p| {
            let mut arts = Vec::new();
            for &s in &seeds {
                let ds = data::collect(&task1, cfg.data_episodes, cfg.data_length, s)?;
                let rel = dataset_rel(s);
                fs::create_dir_all(p.out().join("data"))?;
                ds.write(&p.out().join(&rel))?;
                arts.push(rel);
            }
            Ok((Vec::new(), arts))
        },
        |_| Vec::new(),
    )?;

    let jobs: Vec<(u64, Variant)> = seeds
        .iter()
        .enumerate()
        .flat_map(|(i, &s)| {
            let vs: &[Variant] = if i == 0 { &Variant::ALL } else { &PROFILED };
            vs.iter().map(move |&v| (s, v))
        })
        .collect();
    p.stage(
        "train",
        |p| {
            let out = p.out().to_path_buf();
            jobs.par_iter()
                .map(|&(s, v)| -> anyhow::Result<()> {
                    let dir = out.join(model_rel(s, v));
                    if dir.join(MODEL_DONE).exists() {
                        eprintln!("  {v} seed {s}: checkpoint found");
                        return Ok(());
                    }
                    let ds = Dataset::read(&out.join(dataset_rel(s)))?;
                    let started = Instant::now();
                    commands::train_into(cfg, v, &ds, s, &dir)
                        .map_err(|e| anyhow::anyhow!("{e}"))?;
                    let secs = started.elapsed().as_secs_f64();
                    fs::write(dir.join(MODEL_DONE), format!("{secs:.3}\n"))?;
                    eprintln!("  {v} seed {s}: trained in {secs:.0}s");
                    Ok(())
                })
                .collect::<anyhow::Result<Vec<()>>>()?;
            let mut arts = Vec::new();
            for &(s, v) in &jobs {
                for f in ["params.gapw", "meta.txt", "loss.csv", MODEL_DONE] {
                    arts.push(model_rel(s, v).join(f));
                }
            }
            Ok((Vec::new(), arts))
        },
        |_| Vec::new(),
    )?;

    let load = |s: u64, v: Variant| -> anyhow::Result<ModelBundle> {
        Ok(ModelBundle::load(&ctx.out.join(model_rel(s, v)))?)
    };

    p.stage(
        "error-profile",
        |p| {
            let pcfg = cfg.profile_config();
            let mut profiles = Vec::new();
            let mut arts = Vec::new();
            let mut budgets = Vec::new();
            for (i, &s) in seeds.iter().enumerate() {
                let started = Instant::now();
                let vs: Vec<Variant> = if i == 0 {
                    Variant::ALL
                        .into_iter()
                        .filter(|v| *v != Variant::Inverse)
                        .collect()
                } else {
                    PROFILED.to_vec()
                };
                let bundles = vs
                    .iter()
                    .map(|&v| load(s, v))
                    .collect::<anyhow::Result<Vec<_>>>()?;
                let preds = bundles
                    .iter()
                    .map(|b| ModelPredictor::new(b, &task1))
                    .collect::<gap_core::Result<Vec<_>>>()?;
                let refs: Vec<&dyn StatePredictor> =
                    preds.iter().map(|x| x as &dyn StatePredictor).collect();
                let prof = analysis::error_profile(&refs, &task1, &pcfg, s)?;
                let rel = Path::new("profile").join(format!("seed-{s}.csv"));
                write_file(&p.out().join(&rel), |w| Ok(prof.write_csv(w)?))?;
                arts.push(rel);
                let train_secs: f64 = PROFILED
                    .iter()
                    .map(|&v| model_seconds(&p.out().join(model_rel(s, v))))
                    .sum::<anyhow::Result<f64>>()?;
                budgets.push((s, train_secs + started.elapsed().as_secs_f64()));
                profiles.push((s, prof));
            }
            let checks = criteria::error_redistribution(&profiles, pcfg.horizon);
            let budget_rel = Path::new("stages").join("error-profile.seconds");
            let text: String = budgets
                .iter()
                .map(|(s, t)| format!("{s}={t:.3}\n"))
                .collect();
            fs::write(p.out().join(&budget_rel), text)?;
            arts.push(budget_rel);
            Ok((checks, arts))
        },
        |_| Vec::new(),
    )?;
    // per-seed budgets (training of the profiled variants plus the profile)
    let seconds = fs::read_to_string(ctx.out.join("stages").join("error-profile.seconds"))
        .map_err(anyhow::Error::from)?;
    for line in seconds.lines() {
        if let Some((s, t)) = line.split_once('=') {
            let t: f64 = t.parse().map_err(anyhow::Error::from)?;
            p.budgets.push(criteria::within_budget(
                6,
                &format!("seed {s} train + profile"),
                t,
                600.0,
            ));
        }
    }

    let eval_seeds: Vec<u64> = seeds[..cfg.eval_seeds].to_vec();
    p.stage(
        "success-table",
        |p| {
            let mut tables: Vec<(u64, SuccessTable)> = Vec::new();
            let mut arts = Vec::new();
            for &s in &eval_seeds {
                let bundles = PLANNED
                    .iter()
                    .map(|&v| load(s, v))
                    .collect::<anyhow::Result<Vec<_>>>()?;
                let refs: Vec<&ModelBundle> = bundles.iter().collect();
                let mut table = SuccessTable::default();
                for env in [&task1, &task2] {
                    let t = analysis::success_table(
                        &refs,
                        std::slice::from_ref(env),
                        cfg.eval_trials,
                        &cfg.cem_for(env),
                        s,
                    )?;
                    table.rows.extend(t.rows);
                }
                let rel = Path::new("success").join(format!("seed-{s}.csv"));
                write_file(&p.out().join(&rel), |w| Ok(table.write_csv(w)?))?;
                arts.push(rel);
                tables.push((s, table));
            }
            Ok((criteria::downstream(&tables), arts))
        },
        |_| Vec::new(),
    )?;

    p.stage(
        "rollout-dump",
        |p| {
            let s = seeds[0];
            let bundle = load(s, Variant::Gap)?;
            let (s0, goal) = analysis::trial_task(&task1, s, 0);
            let seq = commands::oracle_sequence(cfg, &task1, s, 0)?;
            let records = analysis::rollout_dump(&bundle, &task1, &s0, &goal, &seq)?;
            write_file(&p.out().join("rollout.csv"), |w| {
                Ok(analysis::write_rollout_csv(&records, task1.obs_dim(), w)?)
            })?;
            let r = commands::target_trace_correlation(&records, &task1, &goal.targets);
            let check = Check {
                criterion: 0,
                check: "gap target-block trace correlation".into(),
                value: format!("{r:.3}"),
                threshold: "> 0.8 (informational)".into(),
                pass: r > 0.8,
            };
            Ok((vec![check], vec!["rollout.csv".into()]))
        },
        |_| Vec::new(),
    )?;

    write_file(&ctx.out.join(SUMMARY_FILE), |w| {
        criteria::write_summary(&p.checks, w)
    })?;
    write_file(&ctx.out.join(BUDGETS_FILE), |w| {
        criteria::write_summary(&p.budgets, w)
    })?;
    p.record(SUMMARY_FILE)?;
    p.record(BUDGETS_FILE)?;
    let report = ReproduceReport {
        checks: p.checks,
        budgets: p.budgets,
        out: ctx.out.clone(),
    };
    let mut manifest = p.manifest;
    manifest.finish(
        &ctx.out,
        if report.passed() {
            "ok"
        } else {
            "acceptance-failed"
        },
    )?;
    Ok(report)
}

/// Files under `out` that the manifest does not list.
pub fn orphans(out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let text = fs::read_to_string(out.join(MANIFEST_FILE))?;
    let listed: std::collections::BTreeSet<PathBuf> = text
        .lines()
        .filter_map(|l| l.strip_prefix("output="))
        .map(PathBuf::from)
        .collect();
    let mut stack = vec![out.to_path_buf()];
    let mut found = Vec::new();
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir)? {
            let path = e?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(out)?.to_path_buf();
            if rel != Path::new(MANIFEST_FILE) && !listed.contains(&rel) {
                found.push(rel);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Fails unless both summaries are byte-identical.
pub fn compare_summaries(a: &Path, b: &Path) -> anyhow::Result<()> {
    let x = fs::read(a.join(SUMMARY_FILE))?;
    let y = fs::read(b.join(SUMMARY_FILE))?;
    if x != y {
        bail!(
            "{} and {} differ",
            a.join(SUMMARY_FILE).display(),
            b.join(SUMMARY_FILE).display()
        );
    }
    Ok(())
}
