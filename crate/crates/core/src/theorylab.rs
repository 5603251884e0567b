//! Executable checks of the ε-optimality guarantee for lowest-predicted-cost
//! selection, and the noise-injection study on pointnav.
//!
//! Setting: `N` candidate action sequences with true costs `c*_1 <= ... <=
//! c*_N` and predicted costs `ĉ_i`. The policy picks `argmin ĉ`. If the best
//! candidate is predicted within `ε` (`|c*_1 - ĉ_1| < ε`) and every clearly
//! worse candidate `i` (`c*_i > c*_1 + ε`) is predicted with error below its
//! margin (`|c*_i - ĉ_i| < (c*_i - c*_1) - ε`), the pick is ε-optimal. The
//! remaining candidates are already within `ε` of the best and may be
//! predicted arbitrarily badly.

use rand::Rng as _;
use rayon::prelude::*;

use crate::envs::{Action, EnvSpec, Goal, State};
use crate::error::{GapError, Result};
use crate::planner::select_open_loop;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct CostInstance {
    true_costs: Vec<f64>,
    predicted: Vec<f64>,
    epsilon: f64,
}

impl CostInstance {
    pub fn new(true_costs: Vec<f64>, predicted: Vec<f64>, epsilon: f64) -> Result<Self> {
        if true_costs.is_empty() || true_costs.len() != predicted.len() {
            return Err(GapError::invalid(format!(
                "need matching non-empty cost lists, got {} true and {} predicted",
                true_costs.len(),
                predicted.len()
            )));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(GapError::invalid(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if true_costs.iter().chain(&predicted).any(|c| !c.is_finite()) {
            return Err(GapError::invalid("costs must be finite"));
        }
        if let Some(i) = (1..true_costs.len()).find(|&i| true_costs[i] < true_costs[i - 1]) {
            return Err(GapError::invalid(format!(
                "true costs must be sorted ascending (index {i} breaks the order)"
            )));
        }
        Ok(Self {
            true_costs,
            predicted,
            epsilon,
        })
    }

    pub fn true_costs(&self) -> &[f64] {
        &self.true_costs
    }

    pub fn predicted(&self) -> &[f64] {
        &self.predicted
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.true_costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_costs.is_empty()
    }
}

/// Status of one suboptimal candidate under the second condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexCheck {
    /// Already within `ε` of the best; no requirement.
    Exempt,
    Holds,
    Violated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionReport {
    pub eq1_ok: bool,
    pub eq2_ok: bool,
    /// Entry `i` describes candidate `i + 1`; candidate 0 is covered by `eq1_ok`.
    pub per_index: Vec<IndexCheck>,
}

pub fn check_conditions(inst: &CostInstance) -> ConditionReport {
    let (c, p, eps) = (&inst.true_costs, &inst.predicted, inst.epsilon);
    let eq1_ok = (c[0] - p[0]).abs() < eps;
    let per_index: Vec<IndexCheck> = (1..c.len())
        .map(|i| {
            if c[i] <= c[0] + eps {
                IndexCheck::Exempt
            } else if (c[i] - p[i]).abs() < (c[i] - c[0]) - eps {
                IndexCheck::Holds
            } else {
                IndexCheck::Violated
            }
        })
        .collect();
    ConditionReport {
        eq1_ok,
        eq2_ok: per_index.iter().all(|&s| s != IndexCheck::Violated),
        per_index,
    }
}

/// Whether the lowest-predicted-cost pick is within `ε` of the best true cost.
pub fn check_optimality(inst: &CostInstance) -> bool {
    let pick = select_open_loop(&inst.predicted).expect("validated instance");
    inst.true_costs[pick] <= inst.true_costs[0] + inst.epsilon
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuzzConfig {
    pub trials: usize,
    pub n: usize,
    pub worst_case_trials: usize,
    /// Multiplier on the second condition's bound; values above 1 generate
    /// instances that may break the guarantee.
    pub bound_scale: f64,
    /// Offset used by the worst-case construction.
    pub delta: f64,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        Self {
            trials: 10_000,
            n: 100,
            worst_case_trials: 1_000,
            bound_scale: 1.0,
            delta: 1e-9,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FuzzReport {
    pub trials: usize,
    /// Random instances meeting both conditions.
    pub satisfying: usize,
    /// Random instances whose pick was not ε-optimal.
    pub violations: usize,
    /// Violations among instances meeting both conditions.
    pub violations_when_satisfied: usize,
    pub worst_case_trials: usize,
    pub worst_case_violations: usize,
    /// Worst-case instances where the best candidate's prediction was not
    /// strictly below every non-exempt one.
    pub chain_failures: usize,
}

/// True costs with no candidate within `GAP_MARGIN` of the exemption
/// boundary `c*_1 + ε`, so strict comparisons are unambiguous.
const GAP_MARGIN: f64 = 1e-6;
const SAMPLE_MARGIN: f64 = 1e-9;

fn random_true_costs(rng: &mut rng::Rng, n: usize) -> (Vec<f64>, f64) {
    loop {
        let mut c: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        c.sort_by(f64::total_cmp);
        let eps = 10f64.powf(rng.random_range(-2.0..0.5));
        let edge = c[0] + eps;
        if c.iter().all(|&x| (x - edge).abs() > GAP_MARGIN) {
            return (c, eps);
        }
    }
}

/// `c + e` with `|e| < bound - margin`, drawn by rejection from a box twice
/// as wide.
fn within(rng: &mut rng::Rng, c: f64, bound: f64) -> f64 {
    let limit = bound - SAMPLE_MARGIN;
    loop {
        let e = rng.random_range(-2.0 * bound..2.0 * bound);
        if e.abs() < limit {
            return c + e;
        }
    }
}

fn random_instance(rng: &mut rng::Rng, n: usize, bound_scale: f64) -> CostInstance {
    let (c, eps) = random_true_costs(rng, n);
    let p = c
        .iter()
        .enumerate()
        .map(|(i, &ci)| {
            if i == 0 {
                within(rng, ci, eps)
            } else if ci <= c[0] + eps {
                // no constraint: anything from far below to far above
                ci + rng.random_range(-10.0..10.0)
            } else {
                within(rng, ci, bound_scale * ((ci - c[0]) - eps))
            }
        })
        .collect();
    CostInstance::new(c, p, eps).expect("generated instance is valid")
}

/// The adversarial predictions: the best candidate as pessimistic as
/// allowed, every non-exempt one as optimistic as allowed, exempt ones far
/// below everything.
pub fn worst_case_instance(true_costs: Vec<f64>, epsilon: f64, delta: f64) -> Result<CostInstance> {
    let c1 = true_costs[0];
    let p = true_costs
        .iter()
        .enumerate()
        .map(|(i, &ci)| {
            if i == 0 {
                c1 + epsilon - delta
            } else if ci <= c1 + epsilon {
                ci - 1e3
            } else {
                ci - (ci - c1) + epsilon + delta
            }
        })
        .collect();
    CostInstance::new(true_costs, p, epsilon)
}

pub fn theorem_fuzz(cfg: &FuzzConfig, seed: u64) -> Result<FuzzReport> {
    if cfg.trials == 0 || cfg.n == 0 {
        return Err(GapError::invalid(
            "theorem fuzzing needs at least one trial and one candidate",
        ));
    }
    let random: Vec<(bool, bool)> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, t as u64);
            let inst = random_instance(&mut rng, cfg.n, cfg.bound_scale);
            let cond = check_conditions(&inst);
            (cond.eq1_ok && cond.eq2_ok, check_optimality(&inst))
        })
        .collect();
    let worst: Vec<(bool, bool)> = (0..cfg.worst_case_trials)
        .into_par_iter()
        .map(|t| -> Result<(bool, bool)> {
            let mut rng = rng::stream(rng::derive(seed, 0x3c), t as u64);
            let (c, eps) = random_true_costs(&mut rng, cfg.n);
            let inst = worst_case_instance(c, eps, cfg.delta)?;
            let (c, p) = (inst.true_costs(), inst.predicted());
            let chain = (1..c.len())
                .filter(|&i| c[i] > c[0] + eps)
                .all(|i| p[0] < p[i]);
            Ok((chain, check_optimality(&inst)))
        })
        .collect::<Result<_>>()?;
    Ok(FuzzReport {
        trials: cfg.trials,
        satisfying: random.iter().filter(|r| r.0).count(),
        violations: random.iter().filter(|r| !r.1).count(),
        violations_when_satisfied: random.iter().filter(|r| r.0 && !r.1).count(),
        worst_case_trials: cfg.worst_case_trials,
        worst_case_violations: worst.iter().filter(|r| !r.1).count(),
        chain_failures: worst.iter().filter(|r| !r.0).count(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseTarget {
    /// Perturb predicted costs.
    Cost,
    /// Perturb every predicted state along the sequence.
    Model,
}

impl NoiseTarget {
    pub fn tag(self) -> &'static str {
        match self {
            NoiseTarget::Cost => "cost",
            NoiseTarget::Model => "model",
        }
    }
}

impl std::str::FromStr for NoiseTarget {
    type Err = GapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cost" => Ok(NoiseTarget::Cost),
            "model" => Ok(NoiseTarget::Model),
            other => Err(GapError::invalid(format!(
                "unknown noise target `{other}` (expected cost or model)"
            ))),
        }
    }
}

/// Noise applied to the sequences whose true-cost rank falls in
/// `[lo, hi)` percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub target: NoiseTarget,
    pub bucket: (u32, u32),
    pub magnitude: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.bucket;
        if lo >= hi || hi > 100 {
            return Err(GapError::invalid(format!("bad bucket [{lo}, {hi})")));
        }
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(GapError::invalid(format!(
                "bad noise magnitude {}",
                self.magnitude
            )));
        }
        Ok(())
    }

    /// Rank positions covered by the bucket among `n` sequences.
    pub fn ranks(&self, n: usize) -> std::ops::Range<usize> {
        let at = |p: u32| p as usize * n / 100;
        at(self.bucket.0)..at(self.bucket.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub trials: usize,
    pub sequences: usize,
    /// Actions per sequence; the environment's episode length by default.
    pub seq_len: usize,
    pub buckets: Vec<(u32, u32)>,
    pub magnitudes: Vec<f64>,
}

impl SweepConfig {
    pub fn deciles() -> Vec<(u32, u32)> {
        (0..10).map(|i| (10 * i, 10 * i + 10)).collect()
    }

    pub fn for_target(target: NoiseTarget, env: &EnvSpec) -> Self {
        Self {
            trials: 500,
            sequences: 100,
            seq_len: env.episode_len,
            buckets: Self::deciles(),
            magnitudes: match target {
                NoiseTarget::Cost => vec![0.1, 0.25, 0.5, 1.0],
                NoiseTarget::Model => vec![0.05, 0.1, 0.2],
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub target: NoiseTarget,
    /// `None` for the noise-free baseline.
    pub bucket: Option<(u32, u32)>,
    pub magnitude: f64,
    pub trials: usize,
    pub successes: usize,
}

impl SweepCell {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }

    /// Normal-approximation 95% half-width.
    pub fn ci95(&self) -> f64 {
        let p = self.success_rate();
        1.96 * (p * (1.0 - p) / self.trials as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub target: NoiseTarget,
    pub seq_len: usize,
    pub sequences: usize,
    pub baseline: SweepCell,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn cell(&self, bucket: (u32, u32), magnitude: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.bucket == Some(bucket) && c.magnitude == magnitude)
    }

    /// One row per cell, baseline first with empty bucket bounds.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "target",
            "bucket_lo",
            "bucket_hi",
            "magnitude",
            "trials",
            "successes",
            "success_rate",
            "ci95",
        ])?;
        for c in std::iter::once(&self.baseline).chain(&self.cells) {
            let (lo, hi) = c.bucket.map_or((String::new(), String::new()), |(lo, hi)| {
                (lo.to_string(), hi.to_string())
            });
            out.write_record([
                c.target.tag().to_string(),
                lo,
                hi,
                c.magnitude.to_string(),
                c.trials.to_string(),
                c.successes.to_string(),
                format!("{:.4}", c.success_rate()),
                format!("{:.4}", c.ci95()),
            ])?;
        }
        out.flush().map_err(|e| GapError::io("<csv>", e))
    }
}

/// One sampled planning problem with everything the noise models need.
pub struct NoiseTrial {
    pub start: State,
    pub goal: Goal,
    pub sequences: Vec<Vec<Action>>,
    /// True states `s_1..s_T` of each sequence.
    pub rollouts: Vec<Vec<State>>,
    pub true_costs: Vec<f64>,
    /// Sequence indices sorted by true cost, lowest first.
    pub ranking: Vec<usize>,
    /// Unit-scale uniform draws in `[-1, 1)`: one per sequence for cost
    /// noise, `seq_len * state_dim` per sequence for state noise.
    cost_draws: Vec<f64>,
    state_draws: Vec<Vec<f64>>,
}

/// Unsquared distance between terminal state and goal.
fn distance(env: &EnvSpec, s: &State, goal: &Goal) -> Result<f64> {
    Ok(env.cost(s, goal)?.sqrt())
}

impl NoiseTrial {
    pub fn sample(env: &EnvSpec, cfg: &SweepConfig, seed: u64, trial: u64) -> Result<Self> {
        let tseed = rng::derive(seed, trial);
        let (s0, goal) = env.sample_task(tseed);
        let mut rng = rng::stream(tseed, 2);
        let sequences: Vec<Vec<Action>> = (0..cfg.sequences)
            .map(|_| {
                (0..cfg.seq_len)
                    .map(|_| env.random_action(&mut rng))
                    .collect()
            })
            .collect();
        let rollouts = sequences
            .iter()
            .map(|seq| {
                let mut s = s0.clone();
                seq.iter()
                    .map(|a| {
                        s = env.step(&s, a)?;
                        Ok(s.clone())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let true_costs = rollouts
            .iter()
            .map(|r| distance(env, r.last().unwrap_or(&s0), &goal))
            .collect::<Result<Vec<_>>>()?;
        let mut ranking: Vec<usize> = (0..cfg.sequences).collect();
        ranking.sort_by(|&a, &b| true_costs[a].total_cmp(&true_costs[b]));
        let mut noise = rng::stream(tseed, 3);
        let cost_draws = (0..cfg.sequences)
            .map(|_| noise.random_range(-1.0..1.0))
            .collect();
        let state_draws = (0..cfg.sequences)
            .map(|_| {
                (0..cfg.seq_len * env.state_dim)
                    .map(|_| noise.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        Ok(Self {
            start: s0,
            goal,
            sequences,
            rollouts,
            true_costs,
            ranking,
            cost_draws,
            state_draws,
        })
    }

    /// Predicted cost of every sequence under `noise` (none for baseline).
    pub fn predicted_costs(&self, env: &EnvSpec, noise: Option<&NoiseSpec>) -> Result<Vec<f64>> {
        let mut pred = self.true_costs.clone();
        let Some(spec) = noise else {
            return Ok(pred);
        };
        let eps = spec.magnitude;
        for &i in &self.ranking[spec.ranks(self.sequences.len())] {
            match spec.target {
                NoiseTarget::Cost => pred[i] += eps * self.cost_draws[i],
                NoiseTarget::Model => {
                    let d = env.state_dim;
                    let mut s = self.start.clone();
                    for (k, a) in self.sequences[i].iter().enumerate() {
                        let next = env.step(&s, a)?;
                        let draws = &self.state_draws[i][k * d..(k + 1) * d];
                        s = State::new(
                            next.iter()
                                .zip(draws)
                                .map(|(x, u)| (x + eps * u).clamp(0.0, 1.0))
                                .collect(),
                        );
                    }
                    pred[i] = distance(env, &s, &self.goal)?;
                }
            }
        }
        Ok(pred)
    }

    /// Whether the truly executed lowest-predicted-cost sequence succeeds.
    pub fn selected_success(&self, env: &EnvSpec, noise: Option<&NoiseSpec>) -> Result<bool> {
        let pick = select_open_loop(&self.predicted_costs(env, noise)?)?;
        let last = self.rollouts[pick].last().unwrap_or(&self.start);
        Ok(env.success(last, &self.goal))
    }
}

/// Success of argmin-predicted-cost selection among random sequences with
/// noise injected into one true-cost bucket at a time. All cells share the
/// same trials and the same unit noise draws.
pub fn noise_sweep(
    env: &EnvSpec,
    target: NoiseTarget,
    cfg: &SweepConfig,
    seed: u64,
) -> Result<SweepReport> {
    if cfg.trials == 0 || cfg.sequences == 0 || cfg.seq_len == 0 {
        return Err(GapError::invalid(
            "noise sweep needs trials, sequences and steps",
        ));
    }
    let specs: Vec<NoiseSpec> = cfg
        .buckets
        .iter()
        .flat_map(|&bucket| {
            cfg.magnitudes.iter().map(move |&magnitude| NoiseSpec {
                target,
                bucket,
                magnitude,
            })
        })
        .collect();
    for s in &specs {
        s.validate()?;
    }
    // outcomes[trial] = (baseline, per spec)
    let outcomes: Vec<(bool, Vec<bool>)> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| {
            let trial = NoiseTrial::sample(env, cfg, seed, t)?;
            let base = trial.selected_success(env, None)?;
            let cells = specs
                .iter()
                .map(|s| trial.selected_success(env, Some(s)))
                .collect::<Result<Vec<_>>>()?;
            Ok((base, cells))
        })
        .collect::<Result<_>>()?;
    type Outcome = (bool, Vec<bool>);
    let count = |f: &dyn Fn(&Outcome) -> bool| outcomes.iter().filter(|o| f(o)).count();
    Ok(SweepReport {
        target,
        seq_len: cfg.seq_len,
        sequences: cfg.sequences,
        baseline: SweepCell {
            target,
            bucket: None,
            magnitude: 0.0,
            trials: cfg.trials,
            successes: count(&|o| o.0),
        },
        cells: specs
            .iter()
            .enumerate()
            .map(|(j, s)| SweepCell {
                target,
                bucket: Some(s.bucket),
                magnitude: s.magnitude,
                trials: cfg.trials,
                successes: count(&|o| o.1[j]),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(c: &[f64], p: &[f64], eps: f64) -> CostInstance {
        CostInstance::new(c.to_vec(), p.to_vec(), eps).unwrap()
    }

    #[test]
    fn conditions_hold_example() {
        let i = inst(&[1.0, 2.0, 3.0], &[1.4, 2.1, 2.9], 0.5);
        let r = check_conditions(&i);
        assert!(r.eq1_ok && r.eq2_ok);
        assert_eq!(r.per_index, vec![IndexCheck::Holds, IndexCheck::Holds]);
        assert!(check_optimality(&i));
    }

    #[test]
    fn conditions_violated_example() {
        let i = inst(&[1.0, 3.0], &[1.05, 0.9], 0.1);
        let r = check_conditions(&i);
        assert!(r.eq1_ok && !r.eq2_ok);
        assert_eq!(r.per_index, vec![IndexCheck::Violated]);
        assert!(!check_optimality(&i));
    }

    #[test]
    fn exact_predictions_always_satisfy() {
        let c = [0.5, 0.7, 2.0, 9.0];
        for eps in [1e-6, 0.1, 5.0] {
            let r = check_conditions(&inst(&c, &c, eps));
            assert!(r.eq1_ok && r.eq2_ok);
        }
    }

    #[test]
    fn single_candidate_and_wide_epsilon_are_optimal() {
        assert!(check_optimality(&inst(&[3.0], &[-7.0], 0.1)));
        // every candidate within ε of the best
        assert!(check_optimality(&inst(
            &[1.0, 1.5, 2.0],
            &[9.0, 5.0, -3.0],
            1.5
        )));
    }

    #[test]
    fn unsorted_or_invalid_instances_rejected() {
        assert!(CostInstance::new(vec![2.0, 1.0], vec![0.0, 0.0], 0.1).is_err());
        assert!(CostInstance::new(vec![1.0], vec![0.0], 0.0).is_err());
        assert!(CostInstance::new(vec![1.0], vec![0.0, 1.0], 0.1).is_err());
        assert!(CostInstance::new(vec![], vec![], 0.1).is_err());
    }

    #[test]
    fn worst_case_satisfies_conditions() {
        let i = worst_case_instance(vec![1.0, 1.05, 2.0, 4.0], 0.1, 1e-9).unwrap();
        let r = check_conditions(&i);
        assert!(r.eq1_ok && r.eq2_ok);
        assert_eq!(r.per_index[0], IndexCheck::Exempt);
        assert!(check_optimality(&i));
    }

    #[test]
    fn bucket_ranks_partition() {
        let mut seen = vec![0; 100];
        for (lo, hi) in SweepConfig::deciles() {
            let spec = NoiseSpec {
                target: NoiseTarget::Cost,
                bucket: (lo, hi),
                magnitude: 0.1,
            };
            for r in spec.ranks(100) {
                seen[r] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn zero_magnitude_is_baseline() {
        let env = EnvSpec::pointnav();
        let cfg = SweepConfig {
            trials: 20,
            sequences: 100,
            seq_len: 10,
            buckets: vec![(0, 10), (40, 60)],
            magnitudes: vec![0.0],
        };
        for target in [NoiseTarget::Cost, NoiseTarget::Model] {
            let rep = noise_sweep(&env, target, &cfg, 5).unwrap();
            for c in &rep.cells {
                assert_eq!(c.successes, rep.baseline.successes);
            }
        }
    }
}
