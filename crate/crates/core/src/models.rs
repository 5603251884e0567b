//! Latent dynamics model family.
//!
//! Every variant shares the same three pieces: a stochastic encoder
//! producing a diagonal Gaussian over `z`, a latent forward model, and a
//! head that supervises the latent space. Variants differ only in what the
//! encoder is conditioned on and what the head reconstructs:
//!
//! | variant           | encoder input      | head target          | head    |
//! |-------------------|--------------------|----------------------|---------|
//! | `standard`        | `s`                | `s_{t+k}`            | sigmoid |
//! | `gap`             | `s`, goal          | `goal - s_{t+k}`     | linear  |
//! | `gap_no_goal`     | `s`, window start  | `start - s_{t+k}`    | linear  |
//! | `gap_no_residual` | `s`, goal          | `s_{t+k}`            | sigmoid |
//! | `inverse`         | `s`                | `a_{t+k-1}`          | linear  |

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use ndiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::data::{self, Dataset, RelabeledWindow, WindowSpec};
use crate::envs::{EnvSpec, State};
use crate::error::{GapError, Result};
use crate::rng;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Standard,
    Gap,
    GapNoGoal,
    GapNoResidual,
    Inverse,
}

/// What the encoder sees next to the current observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Context {
    None,
    Goal,
    /// First state of the predicted sequence.
    Start,
}

/// What the head reconstructs at each predicted step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// Raw observation, sigmoid head.
    State,
    /// Context minus observation, linear head.
    Residual,
    /// Preceding action from consecutive latents.
    Action,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Standard,
        Variant::Gap,
        Variant::GapNoGoal,
        Variant::GapNoResidual,
        Variant::Inverse,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Gap => "gap",
            Variant::GapNoGoal => "gap_no_goal",
            Variant::GapNoResidual => "gap_no_residual",
            Variant::Inverse => "inverse",
        }
    }

    pub fn context(self) -> Context {
        match self {
            Variant::Standard | Variant::Inverse => Context::None,
            Variant::Gap | Variant::GapNoResidual => Context::Goal,
            Variant::GapNoGoal => Context::Start,
        }
    }

    pub fn target(self) -> Target {
        match self {
            Variant::Standard | Variant::GapNoResidual => Target::State,
            Variant::Gap | Variant::GapNoGoal => Target::Residual,
            Variant::Inverse => Target::Action,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = GapError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| {
                GapError::invalid(format!(
                    "unknown variant `{s}` (expected one of standard, gap, gap_no_goal, gap_no_residual, inverse)"
                ))
            })
    }
}

/// Diagonal Gaussian over the latent state.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDist {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentDist {
    /// A point mass, represented with `log_var` at its floor.
    pub fn point(mean: Vec<f64>) -> Self {
        let log_var = vec![LOG_VAR_MIN; mean.len()];
        Self { mean, log_var }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + exp(log_var / 2) * noise`.
    pub fn sample_with(&self, noise: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }

    pub fn sample(&self, rng: &mut rng::Rng) -> Vec<f64> {
        let noise: Vec<f64> = (0..self.dim())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.sample_with(&noise)
    }

    /// `KL(self || N(0, I))`.
    pub fn kl_to_unit(&self) -> f64 {
        0.5 * self
            .mean
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Hidden widths of the encoder and of the decoder or inverse head.
    pub hidden: Vec<usize>,
    pub dyn_hidden: Vec<usize>,
    /// KL weight.
    pub beta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            hidden: vec![128, 128],
            dyn_hidden: vec![128, 128, 128],
            beta: 1e-3,
        }
    }
}

impl ModelConfig {
    /// Defaults with the latent width raised for grid observations.
    pub fn for_env(env: &EnvSpec) -> Self {
        let mut cfg = Self::default();
        if env.obs_dim() > 64 {
            cfg.latent_dim = 32;
        }
        cfg
    }
}

/// Fully connected ReLU network with a linear last layer.
#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    fn new(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut rng::Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut init = |n: usize| -> Vec<f64> {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                let w = Tensor::matrix(fan_in, fan_out, init(fan_in * fan_out));
                let b = Tensor::matrix(1, fan_out, init(fan_out));
                (
                    store.insert(&format!("{prefix}.{i}.w"), w),
                    store.insert(&format!("{prefix}.{i}.b"), b),
                )
            })
            .collect();
        Self { layers }
    }

    fn graph(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(store, w), g.param(store, b));
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(store.value(w))?.add(store.value(b))?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

/// Parameters and wiring of one trained (or freshly initialised) model.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub variant: Variant,
    pub cfg: ModelConfig,
    pub env_id: String,
    pub obs_dim: usize,
    pub action_dim: usize,
    /// Actions are divided by this before entering the network.
    pub action_scale: f64,
    pub params: ParamStore,
    enc: Mlp,
    dyn_net: Mlp,
    head: Mlp,
}

/// Tensors for one training batch; targets follow the variant's wiring.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Tensor,
    pub ctx: Option<Tensor>,
    /// Normalised actions, one `[B, action_dim]` tensor per step.
    pub actions: Vec<Tensor>,
    /// Observations `s_{t+k}` for `k = 0..=H`.
    pub future_obs: Vec<Tensor>,
    /// Head targets for `k = 0..=H` (empty for the inverse variant).
    pub targets: Vec<Tensor>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.obs.rows()
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub horizon: usize,
    /// Sum of the per-step head losses.
    pub reconstruction: f64,
    pub kl: f64,
    pub per_step: Vec<f64>,
    pub total: f64,
}

impl ModelBundle {
    pub fn new(variant: Variant, env: &EnvSpec, cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = rng::stream(rng::derive(seed, 0x1417), 0);
        let mut params = ParamStore::new();
        let obs_dim = env.obs_dim();
        let l = cfg.latent_dim;
        let enc_in = if variant.context() == Context::None {
            obs_dim
        } else {
            2 * obs_dim
        };
        let chain = |first: usize, hidden: &[usize], last: usize| -> Vec<usize> {
            std::iter::once(first)
                .chain(hidden.iter().copied())
                .chain(std::iter::once(last))
                .collect()
        };
        let enc = Mlp::new(
            &mut params,
            "enc",
            &chain(enc_in, &cfg.hidden, 2 * l),
            &mut rng,
        );
        let dyn_net = Mlp::new(
            &mut params,
            "dyn",
            &chain(l + env.action_dim, &cfg.dyn_hidden, l),
            &mut rng,
        );
        let head = if variant.target() == Target::Action {
            Mlp::new(
                &mut params,
                "inv",
                &chain(2 * l, &cfg.hidden, env.action_dim),
                &mut rng,
            )
        } else {
            Mlp::new(
                &mut params,
                "dec",
                &chain(l, &cfg.hidden, obs_dim),
                &mut rng,
            )
        };
        Self {
            variant,
            cfg,
            env_id: env.id.clone(),
            obs_dim,
            action_dim: env.action_dim,
            action_scale: env.action_bound,
            params,
            enc,
            dyn_net,
            head,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn check_cols(&self, what: &'static str, t: &Tensor, expected: usize) -> Result<()> {
        if t.shape().len() != 2 || t.cols() != expected {
            return Err(GapError::DimMismatch {
                what,
                expected,
                got: *t.shape().last().unwrap_or(&0),
            });
        }
        Ok(())
    }

    fn encoder_input(&self, obs: &Tensor, ctx: Option<&Tensor>) -> Result<Tensor> {
        self.check_cols("observation", obs, self.obs_dim)?;
        match (self.variant.context(), ctx) {
            (Context::None, _) => Ok(obs.clone()),
            (_, Some(c)) => {
                self.check_cols("context", c, self.obs_dim)?;
                Ok(Tensor::concat_cols(&[obs, c])?)
            }
            (_, None) => Err(GapError::invalid(format!(
                "the {} variant needs a context observation",
                self.variant
            ))),
        }
    }

    /// Batched encoder: `(mean, log_var)`, each `[B, L]`. `ctx` is ignored by
    /// variants without conditioning.
    pub fn encode_batch(&self, obs: &Tensor, ctx: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let x = self.encoder_input(obs, ctx)?;
        let out = self.enc.eval(&self.params, &x)?;
        let l = self.latent_dim();
        Ok((
            out.slice_cols(0, l)?,
            out.slice_cols(l, l)?.clamp(LOG_VAR_MIN, LOG_VAR_MAX),
        ))
    }

    pub fn encode(&self, obs: &[f64], ctx: &[f64]) -> Result<LatentDist> {
        let o = Tensor::matrix(1, obs.len(), obs.to_vec());
        let c = Tensor::matrix(1, ctx.len(), ctx.to_vec());
        let (mean, log_var) = self.encode_batch(&o, Some(&c))?;
        Ok(LatentDist {
            mean: mean.into_data(),
            log_var: log_var.into_data(),
        })
    }

    /// One latent step for a batch: `z' = z + f_dyn(z, a / scale)`, with
    /// `a` in environment units.
    pub fn dynamics_batch(&self, z: &Tensor, actions: &Tensor) -> Result<Tensor> {
        self.check_cols("latent", z, self.latent_dim())?;
        self.check_cols("action", actions, self.action_dim)?;
        let a = actions.scale(1.0 / self.action_scale);
        let delta = self
            .dyn_net
            .eval(&self.params, &Tensor::concat_cols(&[z, &a])?)?;
        Ok(z.add(&delta)?)
    }

    /// Next-step latent from the mean of `z`.
    pub fn dynamics(&self, z: &LatentDist, action: &[f64]) -> Result<LatentDist> {
        let zt = Tensor::matrix(1, z.dim(), z.mean.clone());
        let at = Tensor::matrix(1, action.len(), action.to_vec());
        Ok(LatentDist::point(
            self.dynamics_batch(&zt, &at)?.into_data(),
        ))
    }

    /// Latent means along an open-loop rollout, starting with `z0`.
    pub fn rollout(&self, z0: &LatentDist, actions: &[Vec<f64>]) -> Result<Vec<LatentDist>> {
        let mut out = vec![z0.clone()];
        for a in actions {
            let next = self.dynamics(out.last().expect("non-empty"), a)?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        match self.variant.target() {
            Target::Action => Err(GapError::UnsupportedVariant {
                op: "decode",
                variant: self.variant.to_string(),
            }),
            t => {
                self.check_cols("latent", z, self.latent_dim())?;
                let out = self.head.eval(&self.params, z)?;
                Ok(if t == Target::State {
                    out.sigmoid()
                } else {
                    out
                })
            }
        }
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .decode_batch(&Tensor::matrix(1, z.len(), z.to_vec()))?
            .into_data())
    }

    /// Predicted action (environment units) between two latents.
    pub fn invert(&self, z_t: &LatentDist, z_next: &LatentDist) -> Result<Vec<f64>> {
        if self.variant != Variant::Inverse {
            return Err(GapError::UnsupportedVariant {
                op: "invert",
                variant: self.variant.to_string(),
            });
        }
        let l = self.latent_dim();
        if z_t.dim() != l || z_next.dim() != l {
            return Err(GapError::DimMismatch {
                what: "latent",
                expected: l,
                got: z_t.dim().max(z_next.dim()),
            });
        }
        let x = Tensor::matrix(1, 2 * l, [z_t.mean.clone(), z_next.mean.clone()].concat());
        Ok(self
            .head
            .eval(&self.params, &x)?
            .scale(self.action_scale)
            .into_data())
    }

    /// Converts a head output back to an observation estimate: identity for
    /// raw-state heads, `ctx - r` for residual heads.
    pub fn to_observation(&self, head_out: &[f64], ctx: &[f64]) -> Result<Vec<f64>> {
        match self.variant.target() {
            Target::State => Ok(head_out.to_vec()),
            Target::Residual => Ok(ctx.iter().zip(head_out).map(|(c, r)| c - r).collect()),
            Target::Action => Err(GapError::UnsupportedVariant {
                op: "to_observation",
                variant: self.variant.to_string(),
            }),
        }
    }

    /// Assembles training tensors from relabeled windows.
    pub fn batch(&self, env: &EnvSpec, windows: &[RelabeledWindow]) -> Result<Batch> {
        let h = windows.first().map_or(0, RelabeledWindow::horizon);
        if windows.iter().any(|w| w.horizon() != h) {
            return Err(GapError::invalid("windows in a batch must share a horizon"));
        }
        let rows = |f: &dyn Fn(&RelabeledWindow) -> Result<Vec<f64>>| -> Result<Tensor> {
            let r = windows.iter().map(f).collect::<Result<Vec<_>>>()?;
            Ok(Tensor::from_rows(&r)?)
        };
        let obs_of = |s: &State| env.observe(s);
        let ctx_state = |w: &RelabeledWindow| -> State {
            match self.variant.context() {
                Context::Start => w.anchor.clone(),
                _ => w.goal.clone(),
            }
        };
        let obs = rows(&|w| obs_of(&w.start))?;
        let ctx = match self.variant.context() {
            Context::None => None,
            _ => Some(rows(&|w| obs_of(&ctx_state(w)))?),
        };
        let scale = 1.0 / self.action_scale;
        let actions = (0..h)
            .map(|k| rows(&|w| Ok(w.actions[k].iter().map(|a| a * scale).collect())))
            .collect::<Result<Vec<_>>>()?;
        let future_obs = (0..=h)
            .map(|k| rows(&|w| obs_of(w.state(k))))
            .collect::<Result<Vec<_>>>()?;
        let targets = match self.variant.target() {
            Target::Action => Vec::new(),
            Target::State => future_obs.clone(),
            Target::Residual => {
                let c = ctx.as_ref().expect("residual variants are conditioned");
                future_obs
                    .iter()
                    .map(|o| c.sub(o))
                    .collect::<std::result::Result<Vec<_>, _>>()?
            }
        };
        Ok(Batch {
            obs,
            ctx,
            actions,
            future_obs,
            targets,
        })
    }

    /// Builds the training objective on `g`. `noise` is the `[B, L]` unit
    /// Gaussian draw used for the reparameterised encoder sample.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        batch: &Batch,
        noise: &Tensor,
    ) -> Result<(Var, Vec<Var>, Var)> {
        let b = batch.size() as f64;
        let l = self.latent_dim();
        let x = self.encoder_input(&batch.obs, batch.ctx.as_ref())?;
        let x = g.input(x);
        let enc = self.enc.graph(g, &self.params, x)?;
        let mean = g.slice_cols(enc, 0, l)?;
        let raw_lv = g.slice_cols(enc, l, l)?;
        let log_var = g.clamp(raw_lv, LOG_VAR_MIN, LOG_VAR_MAX);

        let half = g.scale(log_var, 0.5);
        let std = g.exp(half);
        let eps = g.input(noise.clone());
        let spread = g.mul(std, eps)?;
        let z0 = g.add(mean, spread)?;

        let m2 = g.square(mean);
        let m2 = g.sum(m2);
        let var = g.exp(log_var);
        let var = g.sum(var);
        let lv = g.sum(log_var);
        let kl = g.add(m2, var)?;
        let kl = g.sub(kl, lv)?;
        let kl = g.scale(kl, 0.5 / b);
        let kl = g.add_scalar(kl, -0.5 * l as f64);

        let mut latents = vec![z0];
        for a in &batch.actions {
            let z = *latents.last().expect("non-empty");
            let a = g.input(a.clone());
            let za = g.concat(&[z, a])?;
            let delta = self.dyn_net.graph(g, &self.params, za)?;
            latents.push(g.add(z, delta)?);
        }

        let per_step = if self.variant.target() == Target::Action {
            self.inverse_terms(g, batch, &latents, mean)?
        } else {
            latents
                .iter()
                .zip(&batch.targets)
                .map(|(&z, target)| {
                    let mut out = self.head.graph(g, &self.params, z)?;
                    if self.variant.target() == Target::State {
                        out = g.sigmoid(out);
                    }
                    let t = g.input(target.clone());
                    Ok(g.mse(out, t)?)
                })
                .collect::<Result<Vec<_>>>()?
        };

        let mut total = g.scale(kl, self.cfg.beta);
        for &term in &per_step {
            total = g.add(total, term)?;
        }
        Ok((total, per_step, kl))
    }

    /// Per step `k >= 1`: latent regression of the rolled-out `z_{t+k}` onto
    /// the (stop-gradient) encoder mean of `s_{t+k}`, plus action prediction
    /// from consecutive encoder means.
    fn inverse_terms(
        &self,
        g: &mut Graph,
        batch: &Batch,
        latents: &[Var],
        mean0: Var,
    ) -> Result<Vec<Var>> {
        let l = self.latent_dim();
        let mut means = vec![mean0];
        for obs in &batch.future_obs[1..] {
            let x = g.input(obs.clone());
            let enc = self.enc.graph(g, &self.params, x)?;
            means.push(g.slice_cols(enc, 0, l)?);
        }
        let mut terms = Vec::with_capacity(batch.horizon());
        for k in 1..latents.len() {
            let target = g.detach(means[k]);
            let latent = g.mse(latents[k], target)?;
            let pair = g.concat(&[means[k - 1], means[k]])?;
            let pred = self.head.graph(g, &self.params, pair)?;
            let a = g.input(batch.actions[k - 1].clone());
            let act = g.mse(pred, a)?;
            terms.push(g.add(latent, act)?);
        }
        Ok(terms)
    }

    /// Evaluates the objective on one batch without touching gradients.
    pub fn training_loss(&self, batch: &Batch, noise: &Tensor, step: usize) -> Result<LossReport> {
        let mut g = Graph::new();
        let (total, per_step, kl) = self.loss_graph(&mut g, batch, noise)?;
        Ok(report(&g, step, batch.horizon(), total, &per_step, kl))
    }

    pub fn save(&self, dir: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GapError::io(dir, e))?;
        let weights = dir.join(WEIGHTS_FILE);
        let file = File::create(&weights).map_err(|e| GapError::io(&weights, e))?;
        ndiff::write_params(&self.params, BufWriter::new(file))?;
        let mut meta = self.metadata();
        for (k, v) in extra {
            meta.entry(k.clone()).or_insert_with(|| v.clone());
        }
        let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let path = dir.join(META_FILE);
        fs::write(&path, text).map_err(|e| GapError::io(&path, e))
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        BTreeMap::from([
            ("variant".into(), self.variant.to_string()),
            ("env".into(), self.env_id.clone()),
            ("obs_dim".into(), self.obs_dim.to_string()),
            ("action_dim".into(), self.action_dim.to_string()),
            ("action_scale".into(), format!("{:?}", self.action_scale)),
            ("latent_dim".into(), self.cfg.latent_dim.to_string()),
            ("hidden".into(), list(&self.cfg.hidden)),
            ("dyn_hidden".into(), list(&self.cfg.dyn_hidden)),
            ("beta".into(), format!("{:?}", self.cfg.beta)),
        ])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| GapError::io(&path, e))?;
        let meta: BTreeMap<&str, &str> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| GapError::Format(format!("{}: bad line `{l}`", path.display())))
            })
            .collect::<Result<_>>()?;
        let get = |k: &str| -> Result<&str> {
            meta.get(k)
                .copied()
                .ok_or_else(|| GapError::Format(format!("{}: missing `{k}`", path.display())))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| GapError::Format(format!("{}: bad `{k}`", path.display())))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| GapError::Format(format!("{}: bad `{k}`", path.display())))
                })
                .collect()
        };
        let env = EnvSpec::from_id(get("env")?)?;
        let cfg = ModelConfig {
            latent_dim: num("latent_dim")? as usize,
            hidden: list("hidden")?,
            dyn_hidden: list("dyn_hidden")?,
            beta: num("beta")?,
        };
        let mut bundle = Self::new(get("variant")?.parse()?, &env, cfg, 0);
        if bundle.obs_dim != num("obs_dim")? as usize {
            return Err(GapError::Format(format!(
                "{}: obs_dim does not match `{}`",
                path.display(),
                env.id
            )));
        }
        bundle.action_scale = num("action_scale")?;

        let weights = dir.join(WEIGHTS_FILE);
        let file = File::open(&weights).map_err(|e| GapError::io(&weights, e))?;
        let stored = ndiff::read_params(BufReader::new(file))?;
        if stored.len() != bundle.params.len() {
            return Err(GapError::Format(format!(
                "{}: {} tensors, expected {}",
                weights.display(),
                stored.len(),
                bundle.params.len()
            )));
        }
        for (name, value) in stored.named_values() {
            let id = bundle.params.id(name)?;
            if bundle.params.value(id).shape() != value.shape() {
                return Err(GapError::Format(format!(
                    "{}: `{name}` has shape {:?}",
                    weights.display(),
                    value.shape()
                )));
            }
            *bundle.params.value_mut(id) = value.clone();
        }
        Ok(bundle)
    }
}

pub const WEIGHTS_FILE: &str = "params.gapw";
pub const META_FILE: &str = "meta.txt";

fn report(
    g: &Graph,
    step: usize,
    horizon: usize,
    total: Var,
    per_step: &[Var],
    kl: Var,
) -> LossReport {
    let per_step: Vec<f64> = per_step.iter().map(|&v| g.value(v).item()).collect();
    LossReport {
        step,
        horizon,
        reconstruction: per_step.iter().sum(),
        kl: g.value(kl).item(),
        per_step,
        total: g.value(total).item(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub step_quota: usize,
    pub h_max: usize,
    pub window: WindowSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            lr: 1e-4,
            step_quota: 2_000,
            h_max: 10,
            window: WindowSpec::default(),
        }
    }
}

/// Worst relative error between the tape gradient of the training loss and
/// central finite differences, over `probes` randomly chosen parameter
/// entries. Leaves the parameters as it found them.
///
/// The inverse variant's latent target is stop-gradient, so its encoder
/// weights are not probed: finite differences would move the target too.
pub fn loss_gradient_check(
    bundle: &mut ModelBundle,
    batch: &Batch,
    noise: &Tensor,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let (total, _, _) = bundle.loss_graph(&mut g, batch, noise)?;
    bundle.params.zero_grad();
    g.backward(total, &mut bundle.params)?;
    let ids: Vec<ParamId> = bundle
        .params
        .ids()
        .filter(|&id| {
            bundle.variant != Variant::Inverse || !bundle.params.name(id).starts_with("enc.")
        })
        .collect();
    let mut r = rng::stream(seed, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let id = ids[r.random_range(0..ids.len())];
        let j = r.random_range(0..bundle.params.value(id).len());
        let analytic = bundle.params.grad(id).data()[j];
        let orig = bundle.params.value(id).data()[j];
        let mut at = |x: f64| -> Result<f64> {
            bundle.params.value_mut(id).data_mut()[j] = x;
            Ok(bundle.training_loss(batch, noise, 0)?.total)
        };
        let up = at(orig + ndiff::gradcheck::STEP)?;
        let down = at(orig - ndiff::gradcheck::STEP)?;
        bundle.params.value_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * ndiff::gradcheck::STEP);
        worst = worst.max(ndiff::gradcheck::rel_err(analytic, numeric));
    }
    bundle.params.zero_grad();
    Ok(worst)
}

/// Unit Gaussian noise for the encoder sample at `step`.
pub fn training_noise(seed: u64, step: usize, rows: usize, latent_dim: usize) -> Tensor {
    let mut rng = rng::stream(rng::derive(seed, 0xe95), step as u64);
    Tensor::matrix(
        rows,
        latent_dim,
        (0..rows * latent_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    )
}

/// Runs `cfg.steps` Adam updates starting from the bundle's current
/// parameters and returns the loss curve.
///
/// A non-finite loss or gradient stops training with
/// [`GapError::NonFiniteLoss`]; the bundle then still holds the parameters
/// from the last good step.
pub fn train(
    bundle: &mut ModelBundle,
    ds: &Dataset,
    env: &EnvSpec,
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&LossReport),
) -> Result<Vec<LossReport>> {
    ds.verify(env)?;
    if bundle.obs_dim != env.obs_dim() || bundle.action_dim != env.action_dim {
        return Err(GapError::invalid(format!(
            "model built for `{}` cannot train on `{}` data",
            bundle.env_id, env.id
        )));
    }
    let h_cap = cfg.h_max.min(cfg.window.window_len.saturating_sub(1));
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let h = data::curriculum_h(step, cfg.step_quota, h_cap);
        let windows = data::sample_batch(ds, &cfg.window, h, cfg.batch_size, seed, step)?;
        let batch = bundle.batch(env, &windows)?;
        let noise = training_noise(seed, step, batch.size(), bundle.latent_dim());

        let mut g = Graph::new();
        let (total, per_step, kl) = bundle.loss_graph(&mut g, &batch, &noise)?;
        let rep = report(&g, step, h, total, &per_step, kl);
        if !rep.total.is_finite() {
            return Err(GapError::NonFiniteLoss { step });
        }
        g.backward(total, &mut bundle.params)?;
        if bundle.params.adam_step(cfg.lr).is_err() {
            return Err(GapError::NonFiniteLoss { step });
        }
        on_step(&rep);
        curve.push(rep);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> (EnvSpec, ModelBundle) {
        let env = EnvSpec::from_id("blockpush-task1").unwrap();
        let cfg = ModelConfig {
            latent_dim: 4,
            hidden: vec![8],
            dyn_hidden: vec![8],
            beta: 1e-3,
        };
        let m = ModelBundle::new(variant, &env, cfg, 3);
        (env, m)
    }

    #[test]
    fn variant_tags_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
        }
        assert!("gap-no-goal".parse::<Variant>().is_err());
    }

    #[test]
    fn kl_of_unit_gaussian_is_zero() {
        let d = LatentDist {
            mean: vec![0.0; 5],
            log_var: vec![0.0; 5],
        };
        assert_eq!(d.kl_to_unit(), 0.0);
        let shifted = LatentDist {
            mean: vec![1.0, 0.0],
            log_var: vec![0.0, 0.0],
        };
        assert!((shifted.kl_to_unit() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sample_at_variance_floor_is_mean() {
        let d = LatentDist::point(vec![0.3, -0.2]);
        let s = d.sample_with(&[1.0, -1.0]);
        for (a, b) in s.iter().zip(&d.mean) {
            assert!((a - b).abs() < 1e-2);
        }
    }

    #[test]
    fn encode_respects_conditioning() {
        let s = [0.5, 0.15, 0.3, 0.35, 0.5, 0.35, 0.7, 0.35];
        let g1 = [0.2; 8];
        let g2 = [0.6; 8];
        let (_, gap) = tiny(Variant::Gap);
        assert_eq!(gap.encode(&s, &g1).unwrap(), gap.encode(&s, &g1).unwrap());
        assert_ne!(gap.encode(&s, &g1).unwrap(), gap.encode(&s, &g2).unwrap());
        let (_, std) = tiny(Variant::Standard);
        assert_eq!(std.encode(&s, &g1).unwrap(), std.encode(&s, &g2).unwrap());
        assert!(gap.encode(&s[..4], &g1).is_err());
    }

    #[test]
    fn heads_follow_variant() {
        let z = [0.1, -2.0, 3.0, 0.4];
        for v in [Variant::Standard, Variant::GapNoResidual] {
            let out = tiny(v).1.decode(&z).unwrap();
            assert_eq!(out.len(), 8);
            assert!(out.iter().all(|&x| x > 0.0 && x < 1.0));
        }
        assert_eq!(tiny(Variant::Gap).1.decode(&z).unwrap().len(), 8);
        let (_, inv) = tiny(Variant::Inverse);
        assert!(matches!(
            inv.decode(&z),
            Err(GapError::UnsupportedVariant { .. })
        ));
        let zt = LatentDist::point(z.to_vec());
        assert_eq!(inv.invert(&zt, &zt).unwrap().len(), 2);
        assert!(tiny(Variant::Gap).1.invert(&zt, &zt).is_err());
    }

    #[test]
    fn empty_rollout_is_identity() {
        let (_, m) = tiny(Variant::Gap);
        let z = LatentDist {
            mean: vec![0.1, 0.2, 0.3, 0.4],
            log_var: vec![-1.0; 4],
        };
        assert_eq!(m.rollout(&z, &[]).unwrap(), vec![z]);
    }

    #[test]
    fn residual_reconstruction() {
        let (_, m) = tiny(Variant::Gap);
        assert_eq!(
            m.to_observation(&[0.1, -0.2], &[0.5, 0.5]).unwrap(),
            vec![0.4, 0.7]
        );
        let (_, s) = tiny(Variant::Standard);
        assert_eq!(
            s.to_observation(&[0.1, 0.2], &[0.5, 0.5]).unwrap(),
            vec![0.1, 0.2]
        );
    }

    #[test]
    fn batch_wiring() {
        let (env, _) = tiny(Variant::Gap);
        let ds = data::collect(&env, 3, 30, 0).unwrap();
        let windows = data::sample_batch(&ds, &WindowSpec::default(), 2, 4, 0, 0).unwrap();
        let w = &windows[0];
        let gap = tiny(Variant::Gap).1.batch(&env, &windows).unwrap();
        let expect: Vec<f64> = w.residuals[2].clone();
        assert_eq!(gap.targets[2].row(0), &expect[..]);
        assert_eq!(gap.ctx.as_ref().unwrap().row(0), &w.goal[..]);

        let no_goal = tiny(Variant::GapNoGoal).1.batch(&env, &windows).unwrap();
        assert_eq!(no_goal.ctx.as_ref().unwrap().row(0), &w.anchor[..]);
        let r: Vec<f64> = w
            .anchor
            .iter()
            .zip(w.state(1).iter())
            .map(|(a, s)| a - s)
            .collect();
        assert_eq!(no_goal.targets[1].row(0), &r[..]);

        let std = tiny(Variant::Standard).1.batch(&env, &windows).unwrap();
        assert!(std.ctx.is_none());
        assert_eq!(std.targets[2].row(0), &w.state(2)[..]);
        let nr = tiny(Variant::GapNoResidual)
            .1
            .batch(&env, &windows)
            .unwrap();
        assert_eq!(nr.targets[2].row(0), &w.state(2)[..]);
        assert_eq!(nr.ctx.as_ref().unwrap().row(0), &w.goal[..]);

        let inv = tiny(Variant::Inverse).1.batch(&env, &windows).unwrap();
        assert!(inv.targets.is_empty());
        assert_eq!(inv.actions[0].row(0)[0], w.actions[0][0] / env.action_bound);
    }

    #[test]
    fn graph_loss_matches_value_route() {
        // Recompute the Gap objective from the public value-route pieces.
        let (env, m) = tiny(Variant::Gap);
        let ds = data::collect(&env, 2, 30, 1).unwrap();
        let windows = data::sample_batch(&ds, &WindowSpec::default(), 3, 5, 1, 0).unwrap();
        let batch = m.batch(&env, &windows).unwrap();
        let noise = training_noise(1, 0, 5, 4);
        let rep = m.training_loss(&batch, &noise, 0).unwrap();

        let (mean, lv) = m.encode_batch(&batch.obs, batch.ctx.as_ref()).unwrap();
        let mut kl = 0.0;
        let mut z_rows = Vec::new();
        for i in 0..5 {
            let d = LatentDist {
                mean: mean.row(i).to_vec(),
                log_var: lv.row(i).to_vec(),
            };
            kl += d.kl_to_unit() / 5.0;
            z_rows.push(d.sample_with(noise.row(i)));
        }
        let mut z = Tensor::from_rows(&z_rows).unwrap();
        let mut recon = 0.0;
        for k in 0..=3 {
            if k > 0 {
                let a = batch.actions[k - 1].scale(env.action_bound);
                z = m.dynamics_batch(&z, &a).unwrap();
            }
            let out = m.decode_batch(&z).unwrap();
            recon += out.sub(&batch.targets[k]).unwrap().square().mean();
        }
        assert!((rep.kl - kl).abs() < 1e-10, "{} vs {kl}", rep.kl);
        assert!((rep.reconstruction - recon).abs() < 1e-10);
        assert!((rep.total - (recon + 1e-3 * kl)).abs() < 1e-10);
        assert_eq!(rep.per_step.len(), 4);
    }
}
