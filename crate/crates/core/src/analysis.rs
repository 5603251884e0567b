//! Evaluation: prediction error by true-cost cohort, planning success
//! tables, and per-step rollout dumps.

use std::io::Write;
use std::time::Instant;

use ndiff::Tensor;
use rayon::prelude::*;

use crate::envs::{Action, EnvSpec, Goal, State};
use crate::error::{GapError, Result};
use crate::models::{Context, ModelBundle, Target};
use crate::planner::{self, CemConfig, LearnedModel, OracleModel, PlanningModel};
use crate::rng;

/// How sequences are ranked when forming cohorts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankBy {
    /// True cost of the last state.
    Terminal,
    /// True cost summed over every visited state.
    Summed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileConfig {
    /// Number of sampled (start, goal) pairs.
    pub contexts: usize,
    /// Random action sequences per context.
    pub sequences: usize,
    pub horizon: usize,
    /// Cohort sizes, each a prefix of the true-cost ranking.
    pub cohorts: Vec<usize>,
    pub rank_by: RankBy,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            contexts: 1,
            sequences: 1000,
            horizon: 15,
            cohorts: vec![1000, 100, 10],
            rank_by: RankBy::Terminal,
        }
    }
}

/// Predicts observations `s_{t+1..t+H}` for many action sequences from one
/// start.
pub trait StatePredictor: Sync {
    fn name(&self) -> String;

    /// `out[i][h]` is the predicted observation after `h + 1` actions of
    /// sequence `i`.
    fn predict(&self, s0: &State, goal: &Goal, seqs: &[Vec<Action>]) -> Result<Vec<Vec<Vec<f64>>>>;
}

/// Ground truth; has zero error by construction.
pub struct TruePredictor<'a> {
    pub env: &'a EnvSpec,
}

impl StatePredictor for TruePredictor<'_> {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict(
        &self,
        s0: &State,
        _goal: &Goal,
        seqs: &[Vec<Action>],
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        seqs.iter()
            .map(|seq| {
                let mut s = s0.clone();
                seq.iter()
                    .map(|a| {
                        s = self.env.step(&s, a)?;
                        self.env.observe(&s)
                    })
                    .collect()
            })
            .collect()
    }
}

/// A decoder-equipped bundle. Residual predictions become observations as
/// `ctx - r̂`, where `ctx` is the goal (`gap`) or the start (`gap_no_goal`).
pub struct ModelPredictor<'a> {
    pub bundle: &'a ModelBundle,
    pub env: &'a EnvSpec,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(bundle: &'a ModelBundle, env: &'a EnvSpec) -> Result<Self> {
        if bundle.variant.target() == Target::Action {
            return Err(GapError::UnsupportedVariant {
                op: "state prediction",
                variant: bundle.variant.to_string(),
            });
        }
        if bundle.obs_dim != env.obs_dim() {
            return Err(GapError::DimMismatch {
                what: "model observation",
                expected: env.obs_dim(),
                got: bundle.obs_dim,
            });
        }
        Ok(Self { bundle, env })
    }

    fn context(&self, s0: &State, goal: &Goal) -> Result<Vec<f64>> {
        match self.bundle.variant.context() {
            Context::Goal => self.env.observe(&goal.state),
            Context::Start | Context::None => self.env.observe(s0),
        }
    }

    /// Predicted observations for `h = 0..=H`, with `h = 0` the decoded
    /// encoding of the start.
    pub fn predict_with_start(
        &self,
        s0: &State,
        goal: &Goal,
        seqs: &[Vec<Action>],
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        let n = seqs.len();
        let horizon = seqs.first().map_or(0, Vec::len);
        let ctx = self.context(s0, goal)?;
        let obs0 = self.env.observe(s0)?;
        let z0 = self.bundle.encode(&obs0, &ctx)?.mean;
        let l = z0.len();
        let mut z = Tensor::matrix(n.max(1), l, z0.repeat(n.max(1)));
        let mut out = vec![Vec::with_capacity(horizon + 1); n.max(1)];
        for h in 0..=horizon {
            if h > 0 {
                let a: Vec<f64> = seqs.iter().flat_map(|s| s[h - 1].iter().copied()).collect();
                z = self
                    .bundle
                    .dynamics_batch(&z, &Tensor::matrix(n, self.bundle.action_dim, a))?;
            }
            let dec = self.bundle.decode_batch(&z)?;
            for (i, row) in out.iter_mut().enumerate() {
                row.push(self.bundle.to_observation(dec.row(i), &ctx)?);
            }
        }
        out.truncate(n);
        Ok(out)
    }
}

impl StatePredictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        self.bundle.variant.to_string()
    }

    fn predict(&self, s0: &State, goal: &Goal, seqs: &[Vec<Action>]) -> Result<Vec<Vec<Vec<f64>>>> {
        Ok(self
            .predict_with_start(s0, goal, seqs)?
            .into_iter()
            .map(|mut p| {
                p.remove(0);
                p
            })
            .collect())
    }
}

/// Sequence indices ordered by cost, lowest first; equal costs keep index
/// order.
pub fn rank_sequences(costs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]));
    order
}

/// Shared evaluation inputs for one context.
#[derive(Clone, Debug)]
pub struct ProfileContext {
    pub start: State,
    pub goal: Goal,
    pub sequences: Vec<Vec<Action>>,
    /// True observations after each action.
    pub truth: Vec<Vec<Vec<f64>>>,
    pub ranking: Vec<usize>,
}

pub fn profile_context(
    env: &EnvSpec,
    cfg: &ProfileConfig,
    seed: u64,
    index: u64,
) -> Result<ProfileContext> {
    let cseed = rng::derive(seed, index);
    let (start, goal) = env.sample_task(cseed);
    let mut r = rng::stream(cseed, 4);
    let sequences: Vec<Vec<Action>> = (0..cfg.sequences)
        .map(|_| {
            (0..cfg.horizon)
                .map(|_| env.random_action(&mut r))
                .collect()
        })
        .collect();
    let mut truth = Vec::with_capacity(cfg.sequences);
    let mut costs = Vec::with_capacity(cfg.sequences);
    for seq in &sequences {
        let mut s = start.clone();
        let mut obs = Vec::with_capacity(cfg.horizon);
        let mut summed = 0.0;
        for a in seq {
            s = env.step(&s, a)?;
            summed += env.cost(&s, &goal)?;
            obs.push(env.observe(&s)?);
        }
        costs.push(match cfg.rank_by {
            RankBy::Terminal => env.cost(&s, &goal)?,
            RankBy::Summed => summed,
        });
        truth.push(obs);
    }
    Ok(ProfileContext {
        start,
        goal,
        sequences,
        truth,
        ranking: rank_sequences(&costs),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub variant: String,
    pub cohort: usize,
    /// Prediction step, `1..=H`.
    pub h: usize,
    pub mse: f64,
    /// Sample standard deviation over `n`, divided by `sqrt(n)`.
    pub se: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorProfile {
    pub rows: Vec<ProfileRow>,
}

impl ErrorProfile {
    pub fn get(&self, variant: &str, cohort: usize, h: usize) -> Option<&ProfileRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.cohort == cohort && r.h == h)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["variant", "cohort", "h", "mse", "se", "n"])?;
        for r in &self.rows {
            out.write_record([
                r.variant.clone(),
                r.cohort.to_string(),
                r.h.to_string(),
                format!("{:e}", r.mse),
                format!("{:e}", r.se),
                r.n.to_string(),
            ])?;
        }
        out.flush().map_err(|e| GapError::io("<csv>", e))
    }
}

/// Mean and standard error (sample std / sqrt n).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-variant, per-cohort, per-step observation MSE on shared sequences.
pub fn error_profile(
    predictors: &[&dyn StatePredictor],
    env: &EnvSpec,
    cfg: &ProfileConfig,
    seed: u64,
) -> Result<ErrorProfile> {
    if cfg.cohorts.iter().any(|&k| k == 0 || k > cfg.sequences) {
        return Err(GapError::invalid(format!(
            "cohort sizes {:?} must lie in 1..={}",
            cfg.cohorts, cfg.sequences
        )));
    }
    let contexts = (0..cfg.contexts as u64)
        .map(|c| profile_context(env, cfg, seed, c))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for p in predictors {
        // errs[c][i][h]: per-sequence MSE over observation coordinates
        let errs = contexts
            .par_iter()
            .map(|ctx| -> Result<Vec<Vec<f64>>> {
                let pred = p.predict(&ctx.start, &ctx.goal, &ctx.sequences)?;
                Ok(pred
                    .iter()
                    .zip(&ctx.truth)
                    .map(|(ps, ts)| {
                        ps.iter()
                            .zip(ts)
                            .map(|(a, b)| {
                                a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
                                    / a.len() as f64
                            })
                            .collect()
                    })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        for &k in &cfg.cohorts {
            for h in 0..cfg.horizon {
                let xs: Vec<f64> = contexts
                    .iter()
                    .zip(&errs)
                    .flat_map(|(ctx, e)| ctx.ranking[..k].iter().map(move |&i| e[i][h]))
                    .collect();
                let (mse, se) = mean_se(&xs);
                rows.push(ProfileRow {
                    variant: p.name(),
                    cohort: k,
                    h: h + 1,
                    mse,
                    se,
                    n: xs.len(),
                });
            }
        }
    }
    Ok(ErrorProfile { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub success: bool,
    pub final_cost: f64,
    /// Summed latent cost of the first plan; NaN when no plan was made.
    pub predicted_cost: f64,
    pub predicted_terminal: f64,
    pub wall_ms: f64,
    /// Planner error, if the trial failed to run.
    pub error: Option<String>,
}

/// `(start, goal)` of trial `i`; shared by every row of a table.
pub fn trial_task(env: &EnvSpec, seed: u64, trial: usize) -> (State, Goal) {
    env.sample_task(rng::derive(seed, 0x7a5c_0000 + trial as u64))
}

/// Policies a success table can evaluate.
pub enum Policy<'a> {
    Model(&'a dyn PlanningModel),
    Random,
}

/// Runs `trials` episodes; planner errors count as failures and are kept
/// in the record.
pub fn run_trials(
    policy: &Policy<'_>,
    env: &EnvSpec,
    trials: usize,
    cfg: &CemConfig,
    seed: u64,
) -> Vec<TrialRecord> {
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            let (s0, goal) = trial_task(env, seed, trial);
            let plan_seed = rng::derive(seed, 0x9e00_0000 + trial as u64);
            let started = Instant::now();
            let result = match policy {
                Policy::Model(m) => planner::execute_replan(*m, env, &s0, &goal, cfg, plan_seed),
                Policy::Random => {
                    planner::random_episode(env, &s0, &goal, cfg.rounds * cfg.horizon, plan_seed)
                }
            };
            let wall_ms = started.elapsed().as_secs_f64() * 1e3;
            match result {
                Ok(ep) => TrialRecord {
                    trial,
                    success: ep.success,
                    final_cost: ep.final_cost,
                    predicted_cost: ep.plans.first().map_or(f64::NAN, |p| p.predicted_cost),
                    predicted_terminal: ep.plans.first().map_or(f64::NAN, |p| p.terminal_cost),
                    wall_ms,
                    error: None,
                },
                Err(e) => TrialRecord {
                    trial,
                    success: false,
                    final_cost: f64::NAN,
                    predicted_cost: f64::NAN,
                    predicted_terminal: f64::NAN,
                    wall_ms,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuccessRow {
    pub variant: String,
    pub task: String,
    pub trials: usize,
    pub successes: usize,
    pub seeds: Vec<u64>,
}

impl SuccessRow {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SuccessTable {
    pub rows: Vec<SuccessRow>,
}

impl SuccessTable {
    pub fn get(&self, variant: &str, task: &str) -> Option<&SuccessRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.task == task)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "variant",
            "task",
            "trials",
            "successes",
            "success_rate",
            "seeds",
        ])?;
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            out.write_record([
                r.variant.clone(),
                r.task.clone(),
                r.trials.to_string(),
                r.successes.to_string(),
                format!("{:.4}", r.rate()),
                seeds.join(" "),
            ])?;
        }
        out.flush().map_err(|e| GapError::io("<csv>", e))
    }
}

/// Success of every model on every task, plus the oracle and random rows.
/// All rows of a task share the same trial set.
pub fn success_table(
    models: &[&ModelBundle],
    tasks: &[EnvSpec],
    trials: usize,
    cfg: &CemConfig,
    seed: u64,
) -> Result<SuccessTable> {
    let mut rows = Vec::new();
    for env in tasks {
        let row = |name: String, records: Vec<TrialRecord>| SuccessRow {
            variant: name,
            task: env.id.clone(),
            trials,
            successes: records.iter().filter(|r| r.success).count(),
            seeds: vec![seed],
        };
        let oracle = OracleModel { env };
        rows.push(row(
            "oracle".into(),
            run_trials(&Policy::Model(&oracle), env, trials, cfg, seed),
        ));
        rows.push(row(
            "random".into(),
            run_trials(&Policy::Random, env, trials, cfg, seed),
        ));
        for m in models {
            if m.obs_dim != env.obs_dim() {
                return Err(GapError::DimMismatch {
                    what: "model observation",
                    expected: env.obs_dim(),
                    got: m.obs_dim,
                });
            }
            let learned = LearnedModel { bundle: m, env };
            rows.push(row(
                m.variant.to_string(),
                run_trials(&Policy::Model(&learned), env, trials, cfg, seed),
            ));
        }
    }
    Ok(SuccessTable { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRecord {
    pub step: usize,
    pub truth: Vec<f64>,
    pub predicted: Vec<f64>,
    /// `goal - predicted`, in observation space.
    pub residual: Vec<f64>,
}

/// True and predicted observations along `actions`, starting with the
/// decoded encoding of `s0` at step 0.
pub fn rollout_dump(
    bundle: &ModelBundle,
    env: &EnvSpec,
    s0: &State,
    goal: &Goal,
    actions: &[Action],
) -> Result<Vec<RolloutRecord>> {
    let predictor = ModelPredictor::new(bundle, env)?;
    let pred = predictor
        .predict_with_start(s0, goal, &[actions.to_vec()])?
        .remove(0);
    let goal_obs = env.observe(&goal.state)?;
    let mut s = s0.clone();
    let mut out = Vec::with_capacity(actions.len() + 1);
    for (step, p) in pred.into_iter().enumerate() {
        if step > 0 {
            s = env.step(&s, &actions[step - 1])?;
        }
        out.push(RolloutRecord {
            step,
            truth: env.observe(&s)?,
            residual: goal_obs.iter().zip(&p).map(|(g, x)| g - x).collect(),
            predicted: p,
        });
    }
    Ok(out)
}

/// Header: `step`, then `true_i`, `pred_i`, `residual_i` for each
/// observation coordinate `i`.
pub fn rollout_header(obs_dim: usize) -> Vec<String> {
    std::iter::once("step".to_string())
        .chain((0..obs_dim).map(|i| format!("true_{i}")))
        .chain((0..obs_dim).map(|i| format!("pred_{i}")))
        .chain((0..obs_dim).map(|i| format!("residual_{i}")))
        .collect()
}

pub fn write_rollout_csv<W: Write>(records: &[RolloutRecord], obs_dim: usize, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(rollout_header(obs_dim))?;
    for r in records {
        let row: Vec<String> = std::iter::once(r.step.to_string())
            .chain(
                r.truth
                    .iter()
                    .chain(&r.predicted)
                    .chain(&r.residual)
                    .map(|v| format!("{v:e}")),
            )
            .collect();
        out.write_record(row)?;
    }
    out.flush().map_err(|e| GapError::io("<csv>", e))
}

/// Pearson correlation; NaN when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}
