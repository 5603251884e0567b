//! One function per verb. Each writes its artifacts, the resolved config
//! and a run manifest into its output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use gap_core::analysis::{self, ModelPredictor, Policy, StatePredictor, TrialRecord};
use gap_core::data::{self, Dataset};
use gap_core::envs::{Action, EnvSpec};
use gap_core::models::{self, LossReport, ModelBundle, Variant};
use gap_core::planner::{self, LearnedModel, OracleModel, PlanningModel};
use gap_core::theorylab::{self, FuzzReport, NoiseTarget, SweepReport};
use gap_core::GapError;

use crate::config::Config;
use crate::manifest::RunManifest;
use crate::{data_root, Failure};

pub const DATASET_FILE: &str = "dataset.gapd";

/// Inputs shared by every verb.
#[derive(Clone, Debug)]
pub struct Ctx {
    pub cfg: Config,
    pub seed: u64,
    pub out: PathBuf,
    /// The command line, recorded in the manifest.
    pub command: String,
}

impl Ctx {
    fn begin(&self, inputs: &[PathBuf]) -> Result<RunManifest, Failure> {
        Ok(RunManifest::begin(
            &self.out,
            &self.command,
            &self.cfg.to_text(),
            inputs,
        )?)
    }
}

/// Creates `path` and hands a buffered writer to `f`.
pub fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush()
        .with_context(|| format!("writing {}", path.display()))
}

/// A dataset argument: a file, or a directory holding `dataset.gapd`.
/// Relative paths that do not exist are looked up under the data root.
pub fn resolve_dataset(arg: &Path) -> PathBuf {
    let p = if arg.exists() || arg.is_absolute() {
        arg.to_path_buf()
    } else {
        data_root().join(arg)
    };
    if p.is_dir() {
        p.join(DATASET_FILE)
    } else {
        p
    }
}

fn checkpoint_inputs(dirs: &[PathBuf]) -> Vec<PathBuf> {
    dirs.iter().map(|d| d.join("params.gapw")).collect()
}

fn load_models(dirs: &[PathBuf]) -> Result<Vec<ModelBundle>, Failure> {
    dirs.iter()
        .map(|d| ModelBundle::load(d).map_err(Failure::from))
        .collect()
}

pub fn collect(ctx: &Ctx) -> Result<PathBuf, Failure> {
    let env = ctx.cfg.env_spec();
    let mut m = ctx.begin(&[])?;
    let ds = data::collect(&env, ctx.cfg.data_episodes, ctx.cfg.data_length, ctx.seed)?;
    let path = ctx.out.join(DATASET_FILE);
    ds.write(&path)?;
    m.add_output(DATASET_FILE);
    m.finish(&ctx.out, "ok")?;
    println!(
        "collected {} episodes x {} steps of {} into {}",
        ds.episodes.len(),
        ds.episode_len,
        env.id,
        path.display()
    );
    Ok(path)
}

pub fn write_loss_csv(path: &Path, curve: &[LossReport]) -> anyhow::Result<()> {
    write_file(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "horizon", "reconstruction", "kl", "total"])?;
        for r in curve {
            out.write_record([
                r.step.to_string(),
                r.horizon.to_string(),
                format!("{:e}", r.reconstruction),
                format!("{:e}", r.kl),
                format!("{:e}", r.total),
            ])?;
        }
        out.flush()?;
        Ok(())
    })
}

/// Trains one variant and writes the checkpoint into `out`. On a non-finite
/// loss the last good parameters are still saved before failing.
pub fn train_into(
    cfg: &Config,
    variant: Variant,
    ds: &Dataset,
    seed: u64,
    out: &Path,
) -> Result<(ModelBundle, Vec<LossReport>), Failure> {
    let env = EnvSpec::from_id(&ds.env_id)?;
    let mut bundle = ModelBundle::new(variant, &env, cfg.model_config(&env), seed);
    let tc = cfg.train_config();
    let mut curve = Vec::with_capacity(tc.steps);
    let result = models::train(&mut bundle, ds, &env, &tc, seed, |r| curve.push(r.clone()));
    let extra = [
        ("train.seed".to_string(), seed.to_string()),
        ("train.steps".to_string(), curve.len().to_string()),
    ]
    .into_iter()
    .collect();
    bundle.save(out, &extra)?;
    write_loss_csv(&out.join("loss.csv"), &curve)?;
    match result {
        Ok(_) => Ok((bundle, curve)),
        Err(e @ GapError::NonFiniteLoss { .. }) => Err(Failure::Internal(
            anyhow::Error::new(e).context("checkpointed last good state"),
        )),
        Err(e) => Err(e.into()),
    }
}

pub fn train(ctx: &Ctx, variant: Variant, data: &Path) -> Result<ModelBundle, Failure> {
    let path = resolve_dataset(data);
    let mut m = ctx.begin(std::slice::from_ref(&path))?;
    let ds = Dataset::read(&path)?;
    let (bundle, curve) = train_into(&ctx.cfg, variant, &ds, ctx.seed, &ctx.out)?;
    for f in ["params.gapw", "meta.txt", "loss.csv"] {
        m.add_output(f);
    }
    m.finish(&ctx.out, "ok")?;
    if let Some(last) = curve.last() {
        println!(
            "trained {variant} for {} steps: final H={} reconstruction {:.5} kl {:.5}",
            curve.len(),
            last.horizon,
            last.reconstruction,
            last.kl
        );
    }
    Ok(bundle)
}

pub fn write_trials_csv(path: &Path, records: &[TrialRecord]) -> anyhow::Result<()> {
    write_file(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "trial",
            "success",
            "final_cost",
            "predicted_cost",
            "predicted_terminal",
            "error",
        ])?;
        for r in records {
            out.write_record([
                r.trial.to_string(),
                r.success.to_string(),
                format!("{:e}", r.final_cost),
                format!("{:e}", r.predicted_cost),
                format!("{:e}", r.predicted_terminal),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    })
}

/// Plans `trials` episodes with a trained model, or with the true dynamics
/// when `model` is `None`.
pub fn plan(ctx: &Ctx, model: Option<&Path>, trials: usize) -> Result<Vec<TrialRecord>, Failure> {
    let env = ctx.cfg.env_spec();
    let dirs: Vec<PathBuf> = model.into_iter().map(Path::to_path_buf).collect();
    let mut m = ctx.begin(&checkpoint_inputs(&dirs))?;
    let bundles = load_models(&dirs)?;
    let learned = bundles.first().map(|b| LearnedModel {
        bundle: b,
        env: &env,
    });
    let oracle = OracleModel { env: &env };
    let model: &dyn PlanningModel = match &learned {
        Some(l) => l,
        None => &oracle,
    };
    let records = analysis::run_trials(
        &Policy::Model(model),
        &env,
        trials,
        &ctx.cfg.cem_for(&env),
        ctx.seed,
    );
    write_trials_csv(&ctx.out.join("trials.csv"), &records)?;
    m.add_output("trials.csv");
    m.finish(&ctx.out, "ok")?;
    let ok = records.iter().filter(|r| r.success).count();
    println!(
        "{} on {}: {ok}/{trials} successes",
        model_name(&bundles),
        env.id
    );
    Ok(records)
}

fn model_name(bundles: &[ModelBundle]) -> String {
    bundles
        .first()
        .map_or("oracle".into(), |b| b.variant.to_string())
}

pub fn fuzz_text(r: &FuzzReport) -> String {
    format!(
        "trials={}\nsatisfying={}\nviolations={}\nviolations_when_satisfied={}\nworst_case_trials={}\nworst_case_violations={}\nchain_failures={}\n",
        r.trials,
        r.satisfying,
        r.violations,
        r.violations_when_satisfied,
        r.worst_case_trials,
        r.worst_case_violations,
        r.chain_failures
    )
}

/// Fails with an acceptance error when any instance satisfying both
/// conditions is not ε-optimal.
pub fn theorem_fuzz(ctx: &Ctx) -> Result<FuzzReport, Failure> {
    let mut m = ctx.begin(&[])?;
    let report = theorylab::theorem_fuzz(&ctx.cfg.fuzz_config(), ctx.seed)?;
    let text = fuzz_text(&report);
    fs::write(ctx.out.join("fuzz.txt"), &text).context("writing fuzz.txt")?;
    m.add_output("fuzz.txt");
    let bad = report.violations_when_satisfied + report.worst_case_violations;
    m.finish(&ctx.out, if bad == 0 { "ok" } else { "violations" })?;
    print!("{text}");
    if bad > 0 {
        return Err(Failure::Acceptance(format!(
            "{bad} ε-optimality violations"
        )));
    }
    Ok(report)
}

pub fn write_sweep(path: &Path, report: &SweepReport) -> anyhow::Result<()> {
    write_file(path, |w| Ok(report.write_csv(w)?))
}

pub fn noise_exp(ctx: &Ctx, target: NoiseTarget) -> Result<SweepReport, Failure> {
    let mut m = ctx.begin(&[])?;
    let env = EnvSpec::from_id(&ctx.cfg.noise_env)?;
    let report = theorylab::noise_sweep(&env, target, &ctx.cfg.sweep_config(target), ctx.seed)?;
    let name = format!("noise_{}.csv", target.tag());
    write_sweep(&ctx.out.join(&name), &report)?;
    m.add_output(name);
    m.finish(&ctx.out, "ok")?;
    println!(
        "{} noise on {}: baseline {}/{}",
        target.tag(),
        env.id,
        report.baseline.successes,
        report.baseline.trials
    );
    for c in &report.cells {
        if let Some((lo, hi)) = c.bucket {
            println!(
                "  [{lo:>2},{hi:>3}) x{:<5} {}/{}",
                c.magnitude, c.successes, c.trials
            );
        }
    }
    Ok(report)
}

pub fn error_profile(ctx: &Ctx, model_dirs: &[PathBuf]) -> Result<analysis::ErrorProfile, Failure> {
    if model_dirs.is_empty() {
        return Err(Failure::Usage(
            "error-profile needs at least one --model".into(),
        ));
    }
    let env = ctx.cfg.env_spec();
    let mut m = ctx.begin(&checkpoint_inputs(model_dirs))?;
    let bundles = load_models(model_dirs)?;
    let preds = bundles
        .iter()
        .map(|b| ModelPredictor::new(b, &env))
        .collect::<gap_core::Result<Vec<_>>>()?;
    let refs: Vec<&dyn StatePredictor> = preds.iter().map(|p| p as &dyn StatePredictor).collect();
    let profile = analysis::error_profile(&refs, &env, &ctx.cfg.profile_config(), ctx.seed)?;
    write_file(&ctx.out.join("error_profile.csv"), |w| {
        Ok(profile.write_csv(w)?)
    })?;
    m.add_output("error_profile.csv");
    m.finish(&ctx.out, "ok")?;
    let h = ctx.cfg.profile_horizon;
    for b in &bundles {
        let v = b.variant.to_string();
        let cells: Vec<String> = ctx
            .cfg
            .profile_config()
            .cohorts
            .iter()
            .filter_map(|&k| {
                profile
                    .get(&v, k, h)
                    .map(|r| format!("top{k} {:.5}", r.mse))
            })
            .collect();
        println!("{v:16} h={h}: {}", cells.join("  "));
    }
    Ok(profile)
}

pub fn success_table(
    ctx: &Ctx,
    model_dirs: &[PathBuf],
    tasks: &[String],
    trials: usize,
) -> Result<analysis::SuccessTable, Failure> {
    let envs = tasks
        .iter()
        .map(|t| EnvSpec::from_id(t).map_err(|e| Failure::Usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut m = ctx.begin(&checkpoint_inputs(model_dirs))?;
    let bundles = load_models(model_dirs)?;
    let refs: Vec<&ModelBundle> = bundles.iter().collect();
    let mut table = analysis::SuccessTable::default();
    for env in &envs {
        let t = analysis::success_table(
            &refs,
            std::slice::from_ref(env),
            trials,
            &ctx.cfg.cem_for(env),
            ctx.seed,
        )?;
        table.rows.extend(t.rows);
    }
    write_file(&ctx.out.join("success_table.csv"), |w| {
        Ok(table.write_csv(w)?)
    })?;
    m.add_output("success_table.csv");
    m.finish(&ctx.out, "ok")?;
    for r in &table.rows {
        println!(
            "{:16} {:22} {}/{}",
            r.variant, r.task, r.successes, r.trials
        );
    }
    Ok(table)
}

/// Reads one action per line, comma-separated.
pub fn read_actions(path: &Path, env: &EnvSpec) -> anyhow::Result<Vec<Action>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let a: Vec<f64> = line
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("{}:{}: bad action `{line}`", path.display(), i + 1))?;
        if a.len() != env.action_dim {
            bail!(
                "{}:{}: expected {} components",
                path.display(),
                i + 1,
                env.action_dim
            );
        }
        out.push(Action::new(a));
    }
    Ok(out)
}

/// A goal-reaching action sequence for trial `trial`: the first round of
/// an oracle plan.
pub fn oracle_sequence(
    cfg: &Config,
    env: &EnvSpec,
    seed: u64,
    trial: usize,
) -> gap_core::Result<Vec<Action>> {
    let (s0, goal) = analysis::trial_task(env, seed, trial);
    let plan = planner::latent_mpc(
        &OracleModel { env },
        env,
        &s0,
        &goal,
        &cfg.cem_for(env),
        seed,
    )?;
    Ok(plan.actions)
}

/// Correlation of predicted and true coordinates of the scored blocks
/// along a rollout.
pub fn target_trace_correlation(
    records: &[analysis::RolloutRecord],
    env: &EnvSpec,
    targets: &[usize],
) -> f64 {
    let coords: Vec<usize> = if env.state_dim == 2 {
        vec![0, 1]
    } else {
        targets
            .iter()
            .flat_map(|&b| [2 + 2 * b, 3 + 2 * b])
            .collect()
    };
    let (mut t, mut p) = (Vec::new(), Vec::new());
    for r in records {
        for &c in &coords {
            t.push(r.truth[c]);
            p.push(r.predicted[c]);
        }
    }
    analysis::pearson(&t, &p)
}

pub fn rollout_dump(
    ctx: &Ctx,
    model: &Path,
    trial: usize,
    actions: Option<&Path>,
) -> Result<Vec<analysis::RolloutRecord>, Failure> {
    let env = ctx.cfg.env_spec();
    let mut inputs = checkpoint_inputs(&[model.to_path_buf()]);
    inputs.extend(actions.map(Path::to_path_buf));
    let mut m = ctx.begin(&inputs)?;
    let bundle = ModelBundle::load(model)?;
    let (s0, goal) = analysis::trial_task(&env, ctx.seed, trial);
    let seq = match actions {
        Some(p) => read_actions(p, &env)?,
        None => oracle_sequence(&ctx.cfg, &env, ctx.seed, trial)?,
    };
    let records = analysis::rollout_dump(&bundle, &env, &s0, &goal, &seq)?;
    write_file(&ctx.out.join("rollout.csv"), |w| {
        Ok(analysis::write_rollout_csv(&records, env.obs_dim(), w)?)
    })?;
    m.add_output("rollout.csv");
    m.finish(&ctx.out, "ok")?;
    if env.obs_dim() == env.state_dim {
        println!(
            "{} rollout of {} steps; target trace correlation {:.3}",
            bundle.variant,
            seq.len(),
            target_trace_correlation(&records, &env, &goal.targets)
        );
    }
    Ok(records)
}
