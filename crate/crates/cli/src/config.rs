//! Flat `key = value` run configuration.
//!
//! Every key has a default; a config file only lists what it changes.
//! Parsing is strict: unknown keys, duplicates, lines without `=` and values
//! of the wrong type are errors that name the offending line.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use gap_core::analysis::{ProfileConfig, RankBy};
use gap_core::data::{GoalMode, WindowSpec};
use gap_core::envs::EnvSpec;
use gap_core::models::{ModelConfig, TrainConfig};
use gap_core::planner::CemConfig;
use gap_core::theorylab::{FuzzConfig, NoiseTarget, SweepConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub env: String,

    pub data_episodes: usize,
    pub data_length: usize,
    pub data_window: usize,
    pub data_goal_mode: GoalMode,

    /// `None` picks 16 for vector observations and 32 for grids.
    pub model_latent_dim: Option<usize>,
    pub model_hidden: Vec<usize>,
    pub model_dyn_hidden: Vec<usize>,
    pub model_beta: f64,

    pub train_steps: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    pub train_quota: usize,
    pub train_h_max: usize,

    pub cem: CemConfig,
    /// Planning horizon on PointNav, whose episodes are only 10 steps.
    pub cem_pointnav_horizon: usize,

    pub fuzz_trials: usize,
    pub fuzz_n: usize,
    pub fuzz_worst_case: usize,
    pub fuzz_bound_scale: f64,

    pub noise_env: String,
    pub noise_trials: usize,
    pub noise_sequences: usize,
    pub noise_cost_magnitudes: Vec<f64>,
    pub noise_model_magnitudes: Vec<f64>,

    pub profile_contexts: usize,
    pub profile_sequences: usize,
    pub profile_horizon: usize,
    pub profile_rank_by: RankBy,
    pub profile_cohorts: Vec<usize>,
    /// Training seeds whose models enter the error profile.
    pub profile_seeds: usize,

    pub eval_trials: usize,
    /// How many of the profile seeds also run the success table.
    pub eval_seeds: usize,
    pub harness_trials: usize,
}

impl Default for Config {
    fn default() -> Self {
        let cem = CemConfig::default();
        let fuzz = FuzzConfig::default();
        let profile = ProfileConfig::default();
        let train = TrainConfig::default();
        let model = ModelConfig::default();
        let nav = EnvSpec::pointnav();
        Self {
            env: "blockpush-task1".into(),
            data_episodes: 500,
            data_length: 30,
            data_window: train.window.window_len,
            data_goal_mode: train.window.goal_mode,
            model_latent_dim: None,
            model_hidden: model.hidden,
            model_dyn_hidden: model.dyn_hidden,
            model_beta: model.beta,
            train_steps: train.steps,
            train_batch: train.batch_size,
            train_lr: train.lr,
            train_quota: train.step_quota,
            train_h_max: train.h_max,
            cem_pointnav_horizon: nav.episode_len,
            cem,
            fuzz_trials: fuzz.trials,
            fuzz_n: fuzz.n,
            fuzz_worst_case: fuzz.worst_case_trials,
            fuzz_bound_scale: fuzz.bound_scale,
            noise_env: nav.id.clone(),
            noise_trials: 500,
            noise_sequences: 100,
            noise_cost_magnitudes: SweepConfig::for_target(NoiseTarget::Cost, &nav).magnitudes,
            noise_model_magnitudes: SweepConfig::for_target(NoiseTarget::Model, &nav).magnitudes,
            profile_contexts: profile.contexts,
            profile_sequences: profile.sequences,
            profile_horizon: profile.horizon,
            profile_rank_by: profile.rank_by,
            profile_cohorts: profile.cohorts,
            profile_seeds: 5,
            eval_trials: 100,
            eval_seeds: 3,
            harness_trials: 100,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    v.split(',').map(|x| parse(x.trim())).collect()
}

fn list<T: Display>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn goal_mode_tag(m: GoalMode) -> &'static str {
    match m {
        GoalMode::WindowEnd => "window_end",
        GoalMode::EpisodeEnd => "episode_end",
    }
}

fn rank_by_tag(r: RankBy) -> &'static str {
    match r {
        RankBy::Terminal => "terminal",
        RankBy::Summed => "summed",
    }
}

impl Config {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "env" => {
                EnvSpec::from_id(v).map_err(|e| e.to_string())?;
                self.env = v.into();
            }
            "data.episodes" => self.data_episodes = parse(v)?,
            "data.length" => self.data_length = parse(v)?,
            "data.window" => self.data_window = parse(v)?,
            "data.goal_mode" => {
                self.data_goal_mode = match v {
                    "window_end" => GoalMode::WindowEnd,
                    "episode_end" => GoalMode::EpisodeEnd,
                    _ => return Err(format!("`{v}`: expected window_end or episode_end")),
                }
            }
            "model.latent_dim" => {
                self.model_latent_dim = if v == "auto" { None } else { Some(parse(v)?) }
            }
            "model.hidden" => self.model_hidden = parse_list(v)?,
            "model.dyn_hidden" => self.model_dyn_hidden = parse_list(v)?,
            "model.beta" => self.model_beta = parse(v)?,
            "train.steps" => self.train_steps = parse(v)?,
            "train.batch" => self.train_batch = parse(v)?,
            "train.lr" => self.train_lr = parse(v)?,
            "train.quota" => self.train_quota = parse(v)?,
            "train.h_max" => self.train_h_max = parse(v)?,
            "cem.candidates" => self.cem.candidates = parse(v)?,
            "cem.elites" => self.cem.elites = parse(v)?,
            "cem.horizon" => self.cem.horizon = parse(v)?,
            "cem.iterations" => self.cem.iterations = parse(v)?,
            "cem.rounds" => self.cem.rounds = parse(v)?,
            "cem.keep_elites" => self.cem.keep_elites = parse(v)?,
            "cem.pointnav_horizon" => self.cem_pointnav_horizon = parse(v)?,
            "fuzz.trials" => self.fuzz_trials = parse(v)?,
            "fuzz.n" => self.fuzz_n = parse(v)?,
            "fuzz.worst_case" => self.fuzz_worst_case = parse(v)?,
            "fuzz.bound_scale" => self.fuzz_bound_scale = parse(v)?,
            "noise.env" => {
                EnvSpec::from_id(v).map_err(|e| e.to_string())?;
                self.noise_env = v.into();
            }
            "noise.trials" => self.noise_trials = parse(v)?,
            "noise.sequences" => self.noise_sequences = parse(v)?,
            "noise.cost_magnitudes" => self.noise_cost_magnitudes = parse_list(v)?,
            "noise.model_magnitudes" => self.noise_model_magnitudes = parse_list(v)?,
            "profile.contexts" => self.profile_contexts = parse(v)?,
            "profile.sequences" => self.profile_sequences = parse(v)?,
            "profile.horizon" => self.profile_horizon = parse(v)?,
            "profile.rank_by" => {
                self.profile_rank_by = match v {
                    "terminal" => RankBy::Terminal,
                    "summed" => RankBy::Summed,
                    _ => return Err(format!("`{v}`: expected terminal or summed")),
                }
            }
            "profile.cohorts" => self.profile_cohorts = parse_list(v)?,
            "profile.seeds" => self.profile_seeds = parse(v)?,
            "eval.trials" => self.eval_trials = parse(v)?,
            "eval.seeds" => self.eval_seeds = parse(v)?,
            "harness.trials" => self.harness_trials = parse(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("env", self.env.clone()),
            ("data.episodes", self.data_episodes.to_string()),
            ("data.length", self.data_length.to_string()),
            ("data.window", self.data_window.to_string()),
            ("data.goal_mode", goal_mode_tag(self.data_goal_mode).into()),
            (
                "model.latent_dim",
                self.model_latent_dim
                    .map_or("auto".into(), |l| l.to_string()),
            ),
            ("model.hidden", list(&self.model_hidden)),
            ("model.dyn_hidden", list(&self.model_dyn_hidden)),
            ("model.beta", self.model_beta.to_string()),
            ("train.steps", self.train_steps.to_string()),
            ("train.batch", self.train_batch.to_string()),
            ("train.lr", self.train_lr.to_string()),
            ("train.quota", self.train_quota.to_string()),
            ("train.h_max", self.train_h_max.to_string()),
            ("cem.candidates", self.cem.candidates.to_string()),
            ("cem.elites", self.cem.elites.to_string()),
            ("cem.horizon", self.cem.horizon.to_string()),
            ("cem.iterations", self.cem.iterations.to_string()),
            ("cem.rounds", self.cem.rounds.to_string()),
            ("cem.keep_elites", self.cem.keep_elites.to_string()),
            (
                "cem.pointnav_horizon",
                self.cem_pointnav_horizon.to_string(),
            ),
            ("fuzz.trials", self.fuzz_trials.to_string()),
            ("fuzz.n", self.fuzz_n.to_string()),
            ("fuzz.worst_case", self.fuzz_worst_case.to_string()),
            ("fuzz.bound_scale", self.fuzz_bound_scale.to_string()),
            ("noise.env", self.noise_env.clone()),
            ("noise.trials", self.noise_trials.to_string()),
            ("noise.sequences", self.noise_sequences.to_string()),
            ("noise.cost_magnitudes", list(&self.noise_cost_magnitudes)),
            ("noise.model_magnitudes", list(&self.noise_model_magnitudes)),
            ("profile.contexts", self.profile_contexts.to_string()),
            ("profile.sequences", self.profile_sequences.to_string()),
            ("profile.horizon", self.profile_horizon.to_string()),
            ("profile.rank_by", rank_by_tag(self.profile_rank_by).into()),
            ("profile.cohorts", list(&self.profile_cohorts)),
            ("profile.seeds", self.profile_seeds.to_string()),
            ("eval.trials", self.eval_trials.to_string()),
            ("eval.seeds", self.eval_seeds.to_string()),
            ("harness.trials", self.harness_trials.to_string()),
        ]
    }

    /// The resolved config in the same format [`Config::parse`] reads.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let n = i + 1;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {n}: expected `key = value`, got `{line}`"))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(format!("line {n}: duplicate key `{k}`"));
            }
            cfg.set(k, v).map_err(|e| format!("line {n}: {k}: {e}"))?;
        }
        Ok(cfg)
    }

    /// Reads `path` (if any) and then applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, String> {
        let mut cfg = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                Self::parse(&text).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => Self::default(),
        };
        for (k, v) in overrides {
            cfg.set(k, v).map_err(|e| format!("override {k}: {e}"))?;
        }
        Ok(cfg)
    }

    pub fn env_spec(&self) -> EnvSpec {
        EnvSpec::from_id(&self.env).expect("validated on set")
    }

    pub fn model_config(&self, env: &EnvSpec) -> ModelConfig {
        let mut m = ModelConfig::for_env(env);
        if let Some(l) = self.model_latent_dim {
            m.latent_dim = l;
        }
        m.hidden = self.model_hidden.clone();
        m.dyn_hidden = self.model_dyn_hidden.clone();
        m.beta = self.model_beta;
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch_size: self.train_batch,
            lr: self.train_lr,
            step_quota: self.train_quota,
            h_max: self.train_h_max,
            window: WindowSpec {
                window_len: self.data_window,
                goal_mode: self.data_goal_mode,
            },
        }
    }

    /// CEM settings for `env`; PointNav plans over its own episode length.
    pub fn cem_for(&self, env: &EnvSpec) -> CemConfig {
        let mut c = self.cem.clone();
        if env.id == "pointnav" {
            c.horizon = self.cem_pointnav_horizon;
        }
        c
    }

    pub fn fuzz_config(&self) -> FuzzConfig {
        FuzzConfig {
            trials: self.fuzz_trials,
            n: self.fuzz_n,
            worst_case_trials: self.fuzz_worst_case,
            bound_scale: self.fuzz_bound_scale,
            ..FuzzConfig::default()
        }
    }

    pub fn sweep_config(&self, target: NoiseTarget) -> SweepConfig {
        let env = EnvSpec::from_id(&self.noise_env).expect("validated on set");
        SweepConfig {
            trials: self.noise_trials,
            sequences: self.noise_sequences,
            magnitudes: match target {
                NoiseTarget::Cost => self.noise_cost_magnitudes.clone(),
                NoiseTarget::Model => self.noise_model_magnitudes.clone(),
            },
            ..SweepConfig::for_target(target, &env)
        }
    }

    pub fn profile_config(&self) -> ProfileConfig {
        ProfileConfig {
            contexts: self.profile_contexts,
            sequences: self.profile_sequences,
            horizon: self.profile_horizon,
            rank_by: self.profile_rank_by,
            cohorts: self.profile_cohorts.clone(),
        }
    }
}
