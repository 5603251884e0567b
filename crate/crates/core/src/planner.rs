//! Cross-entropy-method MPC in a model's latent space.
//!
//! Candidate actions are sampled in normalised units `u ∈ [-1, 1]` and
//! scaled by the environment bound, so the initial `N(0, 1)` proposal means
//! the same thing for every environment.

use ndiff::Tensor;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::envs::{Action, EnvSpec, Goal, State};
use crate::error::{GapError, Result};
use crate::models::{Context, ModelBundle};
use crate::rng;

pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CemConfig {
    pub candidates: usize,
    pub elites: usize,
    pub horizon: usize,
    pub iterations: usize,
    /// Plan-execute rounds per episode.
    pub rounds: usize,
    /// Carry each iteration's elites into the next candidate pool, so the
    /// returned sequence is the lowest-cost one seen in any iteration.
    pub keep_elites: bool,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            candidates: 1000,
            elites: 10,
            horizon: 15,
            iterations: 3,
            rounds: 2,
            keep_elites: true,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.elites == 0 || self.elites > self.candidates {
            return Err(GapError::invalid(format!(
                "need 1 <= elites ({}) <= candidates ({})",
                self.elites, self.candidates
            )));
        }
        if self.iterations == 0 || self.horizon == 0 || self.rounds == 0 {
            return Err(GapError::invalid(
                "iterations, horizon and rounds must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Start and goal latents of one planning problem.
#[derive(Clone, Debug)]
pub struct EncodedTask {
    /// `[1, L]`.
    pub z: Tensor,
    /// `[1, L]`.
    pub z_goal: Tensor,
    /// Scored entities of the goal, for models that score in state space.
    pub targets: Vec<usize>,
}

/// What the planner needs from a model.
pub trait PlanningModel: Sync {
    fn encode_task(&self, s: &State, goal: &Goal) -> Result<EncodedTask>;

    /// One step for a batch of latents `[n, L]` under actions `[n, A]` in
    /// environment units.
    fn step_batch(&self, z: &Tensor, actions: &Tensor) -> Result<Tensor>;

    /// Per-row cost of `z` against the task goal; squared latent distance
    /// unless overridden.
    fn cost_batch(&self, z: &Tensor, task: &EncodedTask) -> Vec<f64> {
        let g = task.z_goal.data();
        (0..z.rows())
            .map(|i| z.row(i).iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum())
            .collect()
    }
}

/// A trained bundle planning for `env`.
pub struct LearnedModel<'a> {
    pub bundle: &'a ModelBundle,
    pub env: &'a EnvSpec,
}

impl PlanningModel for LearnedModel<'_> {
    /// Encoder means of `(s, ctx)` and `(goal, ctx_goal)`: the goal-conditioned
    /// variants use the goal as context for both, `gap_no_goal` uses `s`
    /// (the start of the sequence being planned).
    fn encode_task(&self, s: &State, goal: &Goal) -> Result<EncodedTask> {
        let obs = self.env.observe(s)?;
        let obs_g = self.env.observe(&goal.state)?;
        let ctx = match self.bundle.variant.context() {
            Context::Start => &obs,
            _ => &obs_g,
        };
        let l = self.bundle.latent_dim();
        let z = self.bundle.encode(&obs, ctx)?.mean;
        let z_goal = self.bundle.encode(&obs_g, ctx)?.mean;
        Ok(EncodedTask {
            z: Tensor::matrix(1, l, z),
            z_goal: Tensor::matrix(1, l, z_goal),
            targets: goal.targets.clone(),
        })
    }

    fn step_batch(&self, z: &Tensor, actions: &Tensor) -> Result<Tensor> {
        self.bundle.dynamics_batch(z, actions)
    }
}

/// True dynamics and true task cost, with the state itself as the latent.
pub struct OracleModel<'a> {
    pub env: &'a EnvSpec,
}

impl PlanningModel for OracleModel<'_> {
    fn encode_task(&self, s: &State, goal: &Goal) -> Result<EncodedTask> {
        let d = self.env.state_dim;
        Ok(EncodedTask {
            z: Tensor::matrix(1, d, s.to_vec()),
            z_goal: Tensor::matrix(1, d, goal.state.to_vec()),
            targets: goal.targets.clone(),
        })
    }

    fn step_batch(&self, z: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let mut out = Vec::with_capacity(z.len());
        for i in 0..z.rows() {
            let s = State::new(z.row(i).to_vec());
            let a = Action::new(actions.row(i).to_vec());
            out.extend(self.env.step(&s, &a)?.into_inner());
        }
        Ok(Tensor::matrix(z.rows(), z.cols(), out))
    }

    fn cost_batch(&self, z: &Tensor, task: &EncodedTask) -> Vec<f64> {
        (0..z.rows())
            .map(|i| crate::envs::scored_sq_distance(z.row(i), task.z_goal.data(), &task.targets))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    pub actions: Vec<Action>,
    /// Summed latent cost over `h = 1..=H` of the returned sequence.
    pub predicted_cost: f64,
    /// Latent cost at `h = H` of the returned sequence.
    pub terminal_cost: f64,
    /// Mean summed cost of the elites after each iteration.
    pub elite_means: Vec<f64>,
    pub sampled: usize,
}

/// Summed and terminal cost of each normalised candidate sequence.
fn score(
    model: &dyn PlanningModel,
    task: &EncodedTask,
    seqs: &[Vec<f64>],
    horizon: usize,
    action_dim: usize,
    bound: f64,
) -> Result<Vec<(f64, f64)>> {
    let n = seqs.len();
    let l = task.z.cols();
    let mut z = Tensor::matrix(n, l, task.z.data().repeat(n));
    let mut summed = vec![0.0; n];
    let mut terminal = vec![0.0; n];
    for h in 0..horizon {
        let a: Vec<f64> = seqs
            .iter()
            .flat_map(|u| {
                u[h * action_dim..(h + 1) * action_dim]
                    .iter()
                    .map(|x| x * bound)
            })
            .collect();
        z = model.step_batch(&z, &Tensor::matrix(n, action_dim, a))?;
        terminal = model.cost_batch(&z, task);
        for (s, c) in summed.iter_mut().zip(&terminal) {
            *s += c;
        }
    }
    Ok(summed.into_iter().zip(terminal).collect())
}

/// Latent MPC: encode, then `iterations` rounds of sample, roll out, sort,
/// refit to the elites. Sorting is stable, so equal costs keep candidate
/// order.
pub fn latent_mpc(
    model: &dyn PlanningModel,
    env: &EnvSpec,
    s: &State,
    goal: &Goal,
    cfg: &CemConfig,
    seed: u64,
) -> Result<PlanResult> {
    cfg.validate()?;
    let task = model.encode_task(s, goal)?;
    let (h, a_dim) = (cfg.horizon, env.action_dim);
    let width = h * a_dim;
    let mut rng = rng::stream(seed, 0);
    let mut mu = vec![0.0; width];
    let mut sigma = vec![1.0; width];
    let mut elites: Vec<(Vec<f64>, (f64, f64))> = Vec::new();
    let mut elite_means = Vec::with_capacity(cfg.iterations);

    for _ in 0..cfg.iterations {
        let mut seqs: Vec<Vec<f64>> = (0..cfg.candidates)
            .map(|_| {
                (0..width)
                    .map(|j| {
                        let x: f64 = rng.sample(StandardNormal);
                        (mu[j] + sigma[j] * x).clamp(-1.0, 1.0)
                    })
                    .collect()
            })
            .collect();
        let mut scores = score(model, &task, &seqs, h, a_dim, env.action_bound)?;
        if cfg.keep_elites {
            for (u, c) in elites.drain(..) {
                seqs.push(u);
                scores.push(c);
            }
        }
        if let Some(bad) = scores.iter().find(|c| !c.0.is_finite()) {
            return Err(GapError::invalid(format!(
                "non-finite planning cost {}",
                bad.0
            )));
        }
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
        elites = order[..cfg.elites]
            .iter()
            .map(|&i| (seqs[i].clone(), scores[i]))
            .collect();
        elite_means.push(elites.iter().map(|e| e.1 .0).sum::<f64>() / cfg.elites as f64);

        let k = cfg.elites as f64;
        for j in 0..width {
            let m = elites.iter().map(|e| e.0[j]).sum::<f64>() / k;
            let var = elites.iter().map(|e| (e.0[j] - m).powi(2)).sum::<f64>() / k;
            mu[j] = m;
            sigma[j] = var.sqrt().max(SIGMA_FLOOR);
        }
    }

    let (best, (predicted_cost, terminal_cost)) = elites.swap_remove(0);
    let actions = best
        .chunks_exact(a_dim)
        .map(|u| env.clip_action(&u.iter().map(|x| x * env.action_bound).collect::<Vec<_>>()))
        .collect();
    Ok(PlanResult {
        actions,
        predicted_cost,
        terminal_cost,
        elite_means,
        sampled: cfg.candidates * cfg.iterations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub final_state: State,
    pub actions: Vec<Action>,
    pub plans: Vec<PlanResult>,
    pub success: bool,
    pub final_cost: f64,
}

/// Plans `horizon` actions, executes all of them, and repeats for
/// `cfg.rounds` rounds.
pub fn execute_replan(
    model: &dyn PlanningModel,
    env: &EnvSpec,
    s0: &State,
    goal: &Goal,
    cfg: &CemConfig,
    seed: u64,
) -> Result<Episode> {
    let mut s = s0.clone();
    let mut actions = Vec::with_capacity(cfg.rounds * cfg.horizon);
    let mut plans = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let plan = latent_mpc(model, env, &s, goal, cfg, rng::derive(seed, round as u64))?;
        for a in &plan.actions {
            s = env.step(&s, a)?;
            actions.push(a.clone());
        }
        plans.push(plan);
    }
    Ok(Episode {
        success: env.success(&s, goal),
        final_cost: env.cost(&s, goal)?,
        final_state: s,
        actions,
        plans,
    })
}

/// Uniform random actions for the same episode budget; the floor baseline.
pub fn random_episode(
    env: &EnvSpec,
    s0: &State,
    goal: &Goal,
    steps: usize,
    seed: u64,
) -> Result<Episode> {
    let mut rng = rng::stream(seed, 7);
    let mut s = s0.clone();
    let mut actions = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a = env.random_action(&mut rng);
        s = env.step(&s, &a)?;
        actions.push(a);
    }
    Ok(Episode {
        success: env.success(&s, goal),
        final_cost: env.cost(&s, goal)?,
        final_state: s,
        actions,
        plans: Vec::new(),
    })
}

/// Index (0-based) of the lowest cost; the first one on ties.
pub fn select_open_loop(costs: &[f64]) -> Result<usize> {
    if costs.is_empty() {
        return Err(GapError::invalid("no candidate costs to select from"));
    }
    if let Some(c) = costs.iter().find(|c| !c.is_finite()) {
        return Err(GapError::invalid(format!("non-finite candidate cost {c}")));
    }
    let mut best = 0;
    for (i, &c) in costs.iter().enumerate().skip(1) {
        if c < costs[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Latent is the running sum of actions; cost is squared distance to a
    /// fixed point, so the optimum is known in closed form.
    pub(crate) struct Integrator;

    impl PlanningModel for Integrator {
        fn encode_task(&self, s: &State, goal: &Goal) -> Result<EncodedTask> {
            Ok(EncodedTask {
                z: Tensor::matrix(1, 2, s.to_vec()),
                z_goal: Tensor::matrix(1, 2, goal.state.to_vec()),
                targets: Vec::new(),
            })
        }

        fn step_batch(&self, z: &Tensor, actions: &Tensor) -> Result<Tensor> {
            Ok(z.add(actions)?)
        }
    }

    fn task(target: [f64; 2]) -> (State, Goal) {
        (
            State::new(vec![0.0, 0.0]),
            Goal {
                state: State::new(target.to_vec()),
                targets: Vec::new(),
            },
        )
    }

    #[test]
    fn cem_finds_quadratic_optimum() {
        let env = EnvSpec::pointnav();
        let (s, g) = task([0.06, -0.03]);
        let cfg = CemConfig {
            horizon: 1,
            iterations: 5,
            ..CemConfig::default()
        };
        let plan = latent_mpc(&Integrator, &env, &s, &g, &cfg, 0).unwrap();
        assert!((plan.actions[0][0] - 0.06).abs() < 1e-2);
        assert!((plan.actions[0][1] + 0.03).abs() < 1e-2);
    }

    #[test]
    fn bound_is_respected_when_optimum_is_outside() {
        let env = EnvSpec::pointnav();
        let (s, g) = task([0.5, 0.5]);
        let cfg = CemConfig {
            horizon: 3,
            candidates: 100,
            ..CemConfig::default()
        };
        let plan = latent_mpc(&Integrator, &env, &s, &g, &cfg, 1).unwrap();
        for a in &plan.actions {
            assert!(a.iter().all(|x| x.abs() <= env.action_bound));
        }
        assert_eq!(plan.sampled, 300);
    }

    #[test]
    fn same_seed_same_plan() {
        let env = EnvSpec::pointnav();
        let (s, g) = task([0.2, 0.1]);
        let cfg = CemConfig {
            candidates: 50,
            ..CemConfig::default()
        };
        let a = latent_mpc(&Integrator, &env, &s, &g, &cfg, 9).unwrap();
        assert_eq!(a, latent_mpc(&Integrator, &env, &s, &g, &cfg, 9).unwrap());
    }

    #[test]
    fn single_iteration_is_random_shooting() {
        // With one iteration the result is the best of the initial draws.
        let env = EnvSpec::pointnav();
        let (s, g) = task([0.1, 0.1]);
        let cfg = CemConfig {
            candidates: 20,
            elites: 20,
            horizon: 2,
            iterations: 1,
            ..CemConfig::default()
        };
        let plan = latent_mpc(&Integrator, &env, &s, &g, &cfg, 4).unwrap();
        let mut rng = rng::stream(4, 0);
        let draws: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                (0..4)
                    .map(|_| rng.sample::<f64, _>(StandardNormal).clamp(-1.0, 1.0))
                    .collect()
            })
            .collect();
        let task = Integrator.encode_task(&s, &g).unwrap();
        let scores = score(&Integrator, &task, &draws, 2, 2, env.action_bound).unwrap();
        let summed: Vec<f64> = scores.iter().map(|c| c.0).collect();
        let best = select_open_loop(&summed).unwrap();
        assert_eq!(plan.predicted_cost, summed[best]);
    }

    #[test]
    fn degenerate_elites_floor_sigma() {
        let env = EnvSpec::pointnav();
        let (s, g) = task([0.0, 0.0]);
        let cfg = CemConfig {
            candidates: 1,
            elites: 1,
            horizon: 2,
            iterations: 4,
            ..CemConfig::default()
        };
        let plan = latent_mpc(&Integrator, &env, &s, &g, &cfg, 0).unwrap();
        assert_eq!(plan.elite_means.len(), 4);
        assert!(plan.predicted_cost.is_finite());
    }

    #[test]
    fn replan_executes_horizon_actions_per_round() {
        let env = EnvSpec::pointnav();
        let (s, g) = env.sample_task(3);
        let cfg = CemConfig {
            candidates: 100,
            horizon: 5,
            ..CemConfig::default()
        };
        let ep = execute_replan(&OracleModel { env: &env }, &env, &s, &g, &cfg, 3).unwrap();
        assert_eq!(ep.actions.len(), 10);
        assert_eq!(ep.plans.len(), 2);
        assert_eq!(ep.actions[..5], ep.plans[0].actions[..]);
        assert_eq!(ep.actions[5..], ep.plans[1].actions[..]);
        let mut replay = s.clone();
        for a in &ep.actions {
            replay = env.step(&replay, a).unwrap();
        }
        assert_eq!(replay, ep.final_state);
    }

    #[test]
    fn select_examples() {
        assert_eq!(select_open_loop(&[3.0, 1.0, 2.0]).unwrap(), 1);
        assert_eq!(select_open_loop(&[1.0, 1.0]).unwrap(), 0);
        assert!(select_open_loop(&[]).is_err());
        assert!(select_open_loop(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let env = EnvSpec::pointnav();
        let (s, g) = task([0.1, 0.1]);
        let cfg = CemConfig {
            candidates: 5,
            elites: 6,
            ..CemConfig::default()
        };
        assert!(latent_mpc(&Integrator, &env, &s, &g, &cfg, 0).is_err());
    }
}
