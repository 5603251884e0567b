//! Self-supervised experience: random-policy collection, the on-disk
//! trajectory store, and hindsight-relabeled training windows.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;

use crate::envs::{Action, EnvSpec, State};
use crate::error::{GapError, Result};
use crate::rng;

pub const DATASET_MAGIC: &[u8; 4] = b"GAPD";
pub const DATASET_VERSION: u32 = 1;

/// `states.len() == actions.len() + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env_id: String,
    pub episode_len: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub episodes: Vec<Trajectory>,
    /// Known for freshly collected data; not part of the file format.
    pub seed: Option<u64>,
}

fn quantize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

/// Rolls out a uniform random policy for `episodes` episodes of `length`
/// steps. Episode `i` draws from its own stream of `seed`.
///
/// States and actions are rounded to `f32` as they are produced, so stored
/// trajectories replay exactly under [`EnvSpec::step`].
pub fn collect(env: &EnvSpec, episodes: usize, length: usize, seed: u64) -> Result<Dataset> {
    if episodes == 0 || length == 0 {
        return Err(GapError::invalid(
            "collect needs at least one episode of one step",
        ));
    }
    let episodes = (0..episodes)
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let mut s = State::new(quantize(&env.reset(rng::derive(seed, i as u64))));
            let mut states = vec![s.clone()];
            let mut actions = Vec::with_capacity(length);
            for _ in 0..length {
                let a = Action::new(quantize(&env.random_action(&mut rng)));
                // f32 rounding can nudge a component past the bound.
                let a = env.clip_action(&a);
                s = State::new(quantize(&env.step(&s, &a)?));
                states.push(s.clone());
                actions.push(a);
            }
            Ok(Trajectory { states, actions })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        env_id: env.id.clone(),
        episode_len: length,
        state_dim: env.state_dim,
        action_dim: env.action_dim,
        episodes,
        seed: Some(seed),
    })
}

impl Dataset {
    pub fn num_transitions(&self) -> usize {
        self.episodes.len() * self.episode_len
    }

    /// `GAPD` layout, little-endian: magic, version u32, env id (u32 length +
    /// utf-8), episode count u32, episode length u32, state dim u32, action
    /// dim u32, then per episode all states followed by all actions as f32.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.env_id.len() as u32).to_le_bytes())?;
        w.write_all(self.env_id.as_bytes())?;
        for v in [
            self.episodes.len(),
            self.episode_len,
            self.state_dim,
            self.action_dim,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for ep in &self.episodes {
            for v in ep.states.iter().flat_map(|s| s.iter()) {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
            for v in ep.actions.iter().flat_map(|a| a.iter()) {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(GapError::Format(format!("dataset magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(GapError::Format(format!("dataset version {version}")));
        }
        let id_len = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; id_len];
        read_exact(&mut r, &mut id)?;
        let env_id = String::from_utf8(id).map_err(|e| GapError::Format(format!("env id: {e}")))?;
        let count = read_u32(&mut r)? as usize;
        let episode_len = read_u32(&mut r)? as usize;
        let state_dim = read_u32(&mut r)? as usize;
        let action_dim = read_u32(&mut r)? as usize;
        let mut read_vecs = |n: usize, dim: usize| -> Result<Vec<Vec<f64>>> {
            let mut raw = vec![0u8; n * dim * 4];
            read_exact(&mut r, &mut raw)?;
            let flat: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            Ok(flat.chunks_exact(dim).map(<[f64]>::to_vec).collect())
        };
        let mut episodes = Vec::with_capacity(count);
        for _ in 0..count {
            let states = read_vecs(episode_len + 1, state_dim)?
                .into_iter()
                .map(State::new)
                .collect();
            let actions = read_vecs(episode_len, action_dim)?
                .into_iter()
                .map(Action::new)
                .collect();
            episodes.push(Trajectory { states, actions });
        }
        Ok(Self {
            env_id,
            episode_len,
            state_dim,
            action_dim,
            episodes,
            seed: None,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| GapError::io(path, e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| GapError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| GapError::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }

    /// Checks dimensions against `env` and replays a few transitions of
    /// every episode through the true dynamics.
    pub fn verify(&self, env: &EnvSpec) -> Result<()> {
        if self.state_dim != env.state_dim || self.action_dim != env.action_dim {
            return Err(GapError::invalid(format!(
                "dataset from `{}` ({}-d states) does not match `{}` ({}-d states)",
                self.env_id, self.state_dim, env.id, env.state_dim
            )));
        }
        for (i, ep) in self.episodes.iter().enumerate() {
            if ep.states.len() != ep.actions.len() + 1 || ep.actions.len() != self.episode_len {
                return Err(GapError::Format(format!(
                    "episode {i} has inconsistent lengths"
                )));
            }
            for t in [0, self.episode_len / 2, self.episode_len - 1] {
                let next = env.step(&ep.states[t], &ep.actions[t])?;
                let err = next
                    .iter()
                    .zip(ep.states[t + 1].iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if err > 1e-6 {
                    return Err(GapError::Format(format!(
                        "episode {i} step {t} does not replay under `{}` (error {err:e})",
                        env.id
                    )));
                }
            }
        }
        Ok(())
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| GapError::Format(format!("truncated dataset: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Which state a window is relabeled with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoalMode {
    /// Last state of the sampled window.
    WindowEnd,
    /// Last state of the episode the window was cut from.
    EpisodeEnd,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    /// Number of states in a window.
    pub window_len: usize,
    pub goal_mode: GoalMode,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            window_len: 15,
            goal_mode: GoalMode::WindowEnd,
        }
    }
}

/// One relabeled training sample.
///
/// `residuals[k] = goal - s_{t+k}` for `k = 0..=H`; with window-end goals
/// and `t + H` at the window end the last residual is exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct RelabeledWindow {
    pub episode: usize,
    pub offset: usize,
    /// Index of `start` within the window.
    pub t: usize,
    /// First state of the window.
    pub anchor: State,
    pub start: State,
    pub actions: Vec<Action>,
    pub successors: Vec<State>,
    pub goal: State,
    pub residuals: Vec<Vec<f64>>,
}

impl RelabeledWindow {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// `s_{t+k}`, with `k = 0` the start state.
    pub fn state(&self, k: usize) -> &State {
        if k == 0 {
            &self.start
        } else {
            &self.successors[k - 1]
        }
    }

    /// Raw-state targets `s_{t+k}` for `k = 0..=H`, the counterpart of
    /// `residuals` for reconstruction models.
    pub fn raw_targets(&self) -> Vec<&State> {
        (0..=self.horizon()).map(|k| self.state(k)).collect()
    }
}

/// Draws one window: a uniform episode, a uniform window offset, then a
/// uniform start `t` leaving room for `h` successors inside the window.
pub fn sample_window(
    ds: &Dataset,
    spec: &WindowSpec,
    h: usize,
    rng: &mut rng::Rng,
) -> Result<RelabeledWindow> {
    let n_states = ds.episode_len + 1;
    if spec.window_len < 1 || spec.window_len > n_states {
        return Err(GapError::invalid(format!(
            "window of {} states does not fit episodes of {} states",
            spec.window_len, n_states
        )));
    }
    if h + 1 > spec.window_len {
        return Err(GapError::invalid(format!(
            "horizon {h} too large for a window of {} states",
            spec.window_len
        )));
    }
    if ds.episodes.is_empty() {
        return Err(GapError::invalid("empty dataset"));
    }
    let episode = rng.random_range(0..ds.episodes.len());
    let offset = rng.random_range(0..=n_states - spec.window_len);
    let t = rng.random_range(0..=spec.window_len - 1 - h);
    let ep = &ds.episodes[episode];
    let abs = offset + t;
    let goal = match spec.goal_mode {
        GoalMode::WindowEnd => ep.states[offset + spec.window_len - 1].clone(),
        GoalMode::EpisodeEnd => ep.states[n_states - 1].clone(),
    };
    let residuals = (0..=h)
        .map(|k| {
            goal.iter()
                .zip(ep.states[abs + k].iter())
                .map(|(g, s)| g - s)
                .collect()
        })
        .collect();
    Ok(RelabeledWindow {
        episode,
        offset,
        t,
        anchor: ep.states[offset].clone(),
        start: ep.states[abs].clone(),
        actions: ep.actions[abs..abs + h].to_vec(),
        successors: ep.states[abs + 1..=abs + h].to_vec(),
        goal,
        residuals,
    })
}

/// The batch used at training step `step`. Depends only on the dataset,
/// `seed` and `step`, so every model variant trained with the same seed
/// sees identical batches.
pub fn sample_batch(
    ds: &Dataset,
    spec: &WindowSpec,
    h: usize,
    batch_size: usize,
    seed: u64,
    step: usize,
) -> Result<Vec<RelabeledWindow>> {
    let mut rng = rng::stream(rng::derive(seed, 0xba7c), step as u64);
    (0..batch_size)
        .map(|_| sample_window(ds, spec, h, &mut rng))
        .collect()
}

/// Curriculum horizon: `min(step / quota, h_max)`.
pub fn curriculum_h(train_step: usize, step_quota: usize, h_max: usize) -> usize {
    (train_step / step_quota.max(1)).min(h_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        collect(&EnvSpec::pointnav(), 4, 20, 1).unwrap()
    }

    #[test]
    fn counts() {
        let ds = collect(&EnvSpec::pointnav(), 1, 5, 0).unwrap();
        assert_eq!(ds.episodes[0].states.len(), 6);
        assert_eq!(ds.episodes[0].actions.len(), 5);
        assert!(collect(&EnvSpec::pointnav(), 0, 5, 0).is_err());
    }

    #[test]
    fn collected_data_replays() {
        let env = EnvSpec::from_id("blockpush-task1").unwrap();
        let ds = collect(&env, 3, 30, 2).unwrap();
        ds.verify(&env).unwrap();
        assert!(ds.verify(&EnvSpec::pointnav()).is_err());
    }

    #[test]
    fn window_end_goal_gives_zero_final_residual() {
        let ds = small();
        let spec = WindowSpec {
            window_len: 6,
            goal_mode: GoalMode::WindowEnd,
        };
        let mut rng = rng::stream(0, 0);
        let mut hit = 0;
        for _ in 0..200 {
            let w = sample_window(&ds, &spec, 5, &mut rng).unwrap();
            // h = window_len - 1 forces t = 0 and t + H at the window end
            assert_eq!(w.t, 0);
            assert!(w.residuals[5].iter().all(|&r| r == 0.0));
            hit += 1;
        }
        assert_eq!(hit, 200);
    }

    #[test]
    fn zero_horizon_has_single_residual() {
        let ds = small();
        let mut rng = rng::stream(0, 1);
        let w = sample_window(&ds, &WindowSpec::default(), 0, &mut rng).unwrap();
        assert_eq!(w.residuals.len(), 1);
        assert!(w.actions.is_empty() && w.successors.is_empty());
        let expect: Vec<f64> = w
            .goal
            .iter()
            .zip(w.start.iter())
            .map(|(g, s)| g - s)
            .collect();
        assert_eq!(w.residuals[0], expect);
    }

    #[test]
    fn oversized_horizon_or_window_fails() {
        let ds = small();
        let mut rng = rng::stream(0, 2);
        let spec = WindowSpec::default();
        assert!(sample_window(&ds, &spec, 15, &mut rng).is_err());
        let too_long = WindowSpec {
            window_len: 22,
            ..spec
        };
        assert!(sample_window(&ds, &too_long, 0, &mut rng).is_err());
    }

    #[test]
    fn episode_end_mode_uses_last_episode_state() {
        let ds = small();
        let spec = WindowSpec {
            window_len: 5,
            goal_mode: GoalMode::EpisodeEnd,
        };
        let mut rng = rng::stream(3, 0);
        let w = sample_window(&ds, &spec, 2, &mut rng).unwrap();
        assert_eq!(&w.goal, ds.episodes[w.episode].states.last().unwrap());
    }

    #[test]
    fn curriculum_schedule() {
        assert_eq!(curriculum_h(0, 2000, 10), 0);
        assert_eq!(curriculum_h(1999, 2000, 10), 0);
        assert_eq!(curriculum_h(2000, 2000, 10), 1);
        assert_eq!(curriculum_h(10 * 2000, 2000, 5), 5);
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let ds = small();
        let spec = WindowSpec::default();
        let a = sample_batch(&ds, &spec, 3, 8, 42, 7).unwrap();
        let b = sample_batch(&ds, &spec, 3, 8, 42, 7).unwrap();
        let c = sample_batch(&ds, &spec, 3, 8, 42, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
