//! PPO with a clipped surrogate, truncated GAE, value loss and entropy bonus,
//! training a backbone plus linear actor/critic heads against [`Pong`].

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Features, FEATURE_DIM};
use crate::env::{Action, EpisodeInfo, Observation, Pong, PongConfig};
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, l2_norm, Adam, Categorical, Dense, NUM_ACTIONS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_coef: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub num_envs: usize,
    pub num_steps: usize,
    pub update_epochs: usize,
    pub num_minibatches: usize,
    pub total_timesteps: u64,
    pub max_grad_norm: f64,
    pub norm_adv: bool,
    pub clip_vloss: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_coef: 0.2,
            vf_coef: 0.5,
            ent_coef: 0.01,
            learning_rate: 2.5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-5,
            num_envs: 8,
            num_steps: 128,
            update_epochs: 4,
            num_minibatches: 4,
            total_timesteps: 500_000,
            max_grad_norm: 0.5,
            norm_adv: true,
            clip_vloss: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::config(format!("ppo.{name} must lie in (0, 1], got {v}")))
            }
        };
        unit("gamma", self.gamma)?;
        unit("gae_lambda", self.gae_lambda)?;
        if !(self.clip_coef > 0.0) {
            return Err(Error::config("ppo.clip_coef must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::config("ppo.learning_rate and ppo.max_grad_norm must be positive"));
        }
        if self.num_envs == 0 || self.num_steps == 0 || self.num_minibatches == 0 || self.update_epochs == 0 {
            return Err(Error::config("ppo sizes (num_envs, num_steps, num_minibatches, update_epochs) must be positive"));
        }
        if self.batch_size() % self.num_minibatches != 0 {
            return Err(Error::config(format!(
                "num_envs·num_steps = {} is not divisible by num_minibatches = {}",
                self.batch_size(),
                self.num_minibatches
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.num_envs * self.num_steps
    }

    pub fn minibatch_size(&self) -> usize {
        self.batch_size() / self.num_minibatches
    }

    pub fn num_iterations(&self) -> u64 {
        self.total_timesteps / self.batch_size() as u64
    }
}

/// Policy and value evaluated on one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutput {
    pub features: Features,
    pub logits: [f64; NUM_ACTIONS],
    pub value: f64,
}

/// Backbone plus linear heads. The flat parameter vector is laid out as
/// `[backbone | actor (8→3) | critic (8→1)]`.
#[derive(Debug, Clone)]
pub struct Agent {
    backbone: Backbone,
    actor: Dense,
    critic: Dense,
}

impl Agent {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        Ok(Self {
            backbone: Backbone::new(config)?,
            actor: Dense::new(FEATURE_DIM, NUM_ACTIONS, true),
            critic: Dense::new(FEATURE_DIM, 1, true),
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn num_params(&self) -> usize {
        self.backbone.num_params() + self.actor.num_params() + self.critic.num_params()
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut p = self.backbone.init_params(rng);
        p.extend(self.actor.init(0.01, rng));
        p.extend(self.critic.init(1.0, rng));
        p
    }

    /// Splits a flat vector into (backbone, actor, critic) slices.
    pub fn split<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let (b, rest) = params.split_at(self.backbone.num_params());
        let (a, c) = rest.split_at(self.actor.num_params());
        (b, a, c)
    }

    fn check(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::config(format!(
                "agent expects {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        Ok(())
    }

    fn heads(&self, actor: &[f64], critic: &[f64], features: &Features) -> Result<([f64; NUM_ACTIONS], f64)> {
        let l = self.actor.forward(actor, features)?;
        let v = self.critic.forward(critic, features)?;
        Ok(([l[0], l[1], l[2]], v[0]))
    }

    pub fn evaluate(&self, params: &[f64], obs: &Observation) -> Result<PolicyOutput> {
        self.check(params)?;
        let (b, a, c) = self.split(params);
        let features = self.backbone.forward(b, obs)?;
        let (logits, value) = self.heads(a, c, &features)?;
        Ok(PolicyOutput { features, logits, value })
    }

    /// Gradient of a per-sample loss whose derivatives with respect to the
    /// logits and value are produced by `loss_grad` from the forward outputs.
    /// Returns the closure's side output alongside the parameter gradient.
    fn sample_grad<T, F>(&self, params: &[f64], obs: &Observation, loss_grad: F) -> Result<(T, Vec<f64>)>
    where
        F: FnOnce(&PolicyOutput) -> Result<(T, [f64; NUM_ACTIONS], f64)>,
    {
        let (b, a, c) = self.split(params);
        let mut head_grads = None;
        let bg = self.backbone.backward_with(b, obs, |features| {
            let (logits, value) = self.heads(a, c, features)?;
            let out = PolicyOutput { features: *features, logits, value };
            let (extra, dlogits, dvalue) = loss_grad(&out)?;
            let (ga, dfa) = self.actor.backward(a, features, &dlogits)?;
            let (gc, dfc) = self.critic.backward(c, features, &[dvalue])?;
            head_grads = Some((extra, ga, gc));
            Ok(std::array::from_fn(|i| dfa[i] + dfc[i]))
        })?;
        let (extra, ga, gc) = head_grads.expect("upstream closure runs exactly once");
        let mut grad = bg.param_grad;
        grad.extend(ga);
        grad.extend(gc);
        Ok((extra, grad))
    }
}

/// Per-step storage for `num_steps × num_envs`, indexed `t * num_envs + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub num_steps: usize,
    pub obs: Vec<Observation>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// `dones[i]`: the episode ended on this step (terminated or truncated).
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
}

impl RolloutBuffer {
    pub fn with_capacity(num_envs: usize, num_steps: usize) -> Self {
        let n = num_envs * num_steps;
        Self {
            num_envs,
            num_steps,
            obs: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            log_probs: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.num_envs * self.num_steps
    }

    fn column<T: Copy>(v: &[T], env: usize, num_envs: usize) -> Vec<T> {
        v.iter().skip(env).step_by(num_envs).copied().collect()
    }

    /// GAE for every env column, flattened back into buffer order.
    pub fn advantages(&self, bootstrap_values: &[f64], gamma: f64, lambda: f64) -> Result<AdvantageEstimate> {
        if !self.is_full() {
            return Err(Error::usage("rollout buffer must be full before computing advantages"));
        }
        if bootstrap_values.len() != self.num_envs {
            return Err(Error::config("one bootstrap value per env required"));
        }
        let n = self.len();
        let mut advantages = vec![0.0; n];
        let mut returns = vec![0.0; n];
        for (e, &boot) in bootstrap_values.iter().enumerate() {
            let est = compute_gae(
                &Self::column(&self.rewards, e, self.num_envs),
                &Self::column(&self.values, e, self.num_envs),
                &Self::column(&self.dones, e, self.num_envs),
                boot,
                gamma,
                lambda,
            )?;
            for t in 0..self.num_steps {
                advantages[t * self.num_envs + e] = est.advantages[t];
                returns[t * self.num_envs + e] = est.returns[t];
            }
        }
        Ok(AdvantageEstimate { advantages, returns })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageEstimate {
    pub advantages: Vec<f64>,
    /// `advantage + value`, the critic's regression target.
    pub returns: Vec<f64>,
}

/// Truncated GAE over one env's sequence:
/// `δ_t = r_t + γ(1−d_t)V_{t+1} − V_t`, `Â_t = δ_t + γλ(1−d_t)Â_{t+1}`,
/// where `d_t` marks an episode ending at step `t` and `V_T` is the bootstrap.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<AdvantageEstimate> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::config(format!(
            "gae inputs differ in length: rewards {n}, values {}, dones {}",
            values.len(),
            dones.len()
        )));
    }
    let mut advantages = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        advantages[t] = next_adv;
        next_value = values[t];
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(AdvantageEstimate { advantages, returns })
}

/// Standardizes to zero mean and unit (sample) standard deviation. Leaves a
/// single-element or constant batch centered only.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len();
    if n == 0 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    adv.iter_mut().for_each(|a| *a -= mean);
    if n < 2 {
        return;
    }
    let std = (adv.iter().map(|a| a * a).sum::<f64>() / (n - 1) as f64).sqrt();
    if std > 1e-12 {
        adv.iter_mut().for_each(|a| *a /= std);
    }
}

/// One training sample drawn from the rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub obs: Observation,
    pub action: usize,
    pub old_log_prob: f64,
    pub old_value: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Minimization loss `−L^CLIP + c1·L^VF − c2·S` with its components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    /// `L^CLIP` (the maximization objective, not negated).
    pub clip: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

impl LossComponents {
    fn is_finite(&self) -> bool {
        [self.total, self.clip, self.value, self.entropy].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub components: LossComponents,
    pub dlogits: Vec<[f64; NUM_ACTIONS]>,
    pub dvalues: Vec<f64>,
}

/// Per-sample contribution to the batch mean, and its gradient.
#[derive(Debug, Clone, Copy)]
struct SampleTerms {
    clip: f64,
    value: f64,
    entropy: f64,
    log_ratio: f64,
    ratio: f64,
    clipped: bool,
    dlogits: [f64; NUM_ACTIONS],
    dvalue: f64,
}

fn sample_terms(s: &Sample, advantage: f64, logits: [f64; NUM_ACTIONS], value: f64, cfg: &PpoConfig, n: usize) -> Result<SampleTerms> {
    let dist = Categorical::new(logits)?;
    let eps = cfg.clip_coef;
    let scale = 1.0 / n as f64;
    let log_ratio = dist.log_prob(s.action) - s.old_log_prob;
    let ratio = log_ratio.exp();
    let unclipped = ratio * advantage;
    let clipped_obj = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    // min() picks the unclipped branch (and passes gradient) unless the
    // clipped value is strictly smaller.
    let through = unclipped <= clipped_obj;
    let clip = unclipped.min(clipped_obj);

    let (value_loss, dvalue) = if cfg.clip_vloss {
        let v_clipped = s.old_value + (value - s.old_value).clamp(-eps, eps);
        let a = (value - s.ret).powi(2);
        let b = (v_clipped - s.ret).powi(2);
        if a >= b {
            (a, 2.0 * (value - s.ret))
        } else {
            let inside = (value - s.old_value).abs() < eps;
            (b, if inside { 2.0 * (v_clipped - s.ret) } else { 0.0 })
        }
    } else {
        ((value - s.ret).powi(2), 2.0 * (value - s.ret))
    };

    let entropy = dist.entropy();
    let dlp = dist.log_prob_grad(s.action);
    let dent = dist.entropy_grad();
    let dlogits = std::array::from_fn(|j| {
        let pg = if through { -advantage * ratio * dlp[j] } else { 0.0 };
        scale * (pg - cfg.ent_coef * dent[j])
    });
    Ok(SampleTerms {
        clip,
        value: value_loss,
        entropy,
        log_ratio,
        ratio,
        clipped: (ratio - 1.0).abs() > eps,
        dlogits,
        dvalue: scale * cfg.vf_coef * dvalue,
    })
}

fn batch_advantages(batch: &[Sample], cfg: &PpoConfig) -> Vec<f64> {
    let mut adv: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
    if cfg.norm_adv && adv.len() > 1 {
        normalize_advantages(&mut adv);
    }
    adv
}

fn combine(terms: &[SampleTerms], cfg: &PpoConfig) -> LossComponents {
    let n = terms.len() as f64;
    let mean = |f: &dyn Fn(&SampleTerms) -> f64| terms.iter().map(f).sum::<f64>() / n;
    let clip = mean(&|t| t.clip);
    let value = mean(&|t| t.value);
    let entropy = mean(&|t| t.entropy);
    LossComponents {
        total: -clip + cfg.vf_coef * value - cfg.ent_coef * entropy,
        clip,
        value,
        entropy,
        approx_kl: mean(&|t| (t.ratio - 1.0) - t.log_ratio),
        clip_fraction: mean(&|t| if t.clipped { 1.0 } else { 0.0 }),
    }
}

/// PPO loss on a minibatch given the current policy's logits and values.
pub fn ppo_loss(batch: &[Sample], logits: &[[f64; NUM_ACTIONS]], values: &[f64], cfg: &PpoConfig) -> Result<LossOutput> {
    if batch.is_empty() || logits.len() != batch.len() || values.len() != batch.len() {
        return Err(Error::config("ppo_loss needs equally sized, non-empty batch, logits and values"));
    }
    let adv = batch_advantages(batch, cfg);
    let terms = batch
        .iter()
        .zip(&adv)
        .zip(logits.iter().zip(values))
        .map(|((s, &a), (&l, &v))| sample_terms(s, a, l, v, cfg, batch.len()))
        .collect::<Result<Vec<_>>>()?;
    let components = combine(&terms, cfg);
    if !components.is_finite() {
        return Err(Error::numeric(format!("non-finite PPO loss: {components:?}")));
    }
    Ok(LossOutput {
        components,
        dlogits: terms.iter().map(|t| t.dlogits).collect(),
        dvalues: terms.iter().map(|t| t.dvalue).collect(),
    })
}

/// Samples per parallel work unit; partial gradients are summed in chunk
/// order so the result does not depend on the thread count.
const GRAD_CHUNK: usize = 16;

/// PPO loss of `agent` on `batch` and its gradient with respect to every
/// agent parameter.
pub fn loss_and_grad(agent: &Agent, params: &[f64], batch: &[Sample], cfg: &PpoConfig) -> Result<(LossComponents, Vec<f64>)> {
    agent.check(params)?;
    if batch.is_empty() {
        return Err(Error::config("empty minibatch"));
    }
    let adv = batch_advantages(batch, cfg);
    let n = batch.len();
    let partials = batch
        .par_chunks(GRAD_CHUNK)
        .zip(adv.par_chunks(GRAD_CHUNK))
        .map(|(samples, advs)| {
            let mut grad = vec![0.0; params.len()];
            let mut terms = Vec::with_capacity(samples.len());
            for (s, &a) in samples.iter().zip(advs) {
                let (t, g) = agent.sample_grad(params, &s.obs, |out| {
                    let t = sample_terms(s, a, out.logits, out.value, cfg, n)?;
                    Ok((t, t.dlogits, t.dvalue))
                })?;
                grad.iter_mut().zip(&g).for_each(|(acc, v)| *acc += v);
                terms.push(t);
            }
            Ok((terms, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; params.len()];
    let mut terms = Vec::with_capacity(n);
    for (t, g) in partials {
        grad.iter_mut().zip(&g).for_each(|(acc, v)| *acc += v);
        terms.extend(t);
    }
    let components = combine(&terms, cfg);
    if !components.is_finite() {
        return Err(Error::numeric(format!("non-finite PPO loss: {components:?}")));
    }
    Ok((components, grad))
}

/// Loss value only (no gradient), for finite-difference checks.
pub fn loss_value(agent: &Agent, params: &[f64], batch: &[Sample], cfg: &PpoConfig) -> Result<LossComponents> {
    let outputs = batch.iter().map(|s| agent.evaluate(params, &s.obs)).collect::<Result<Vec<_>>>()?;
    let logits: Vec<_> = outputs.iter().map(|o| o.logits).collect();
    let values: Vec<_> = outputs.iter().map(|o| o.value).collect();
    Ok(ppo_loss(batch, &logits, &values, cfg)?.components)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub global_step: u64,
    pub env: usize,
    pub episode_return: i32,
    pub episode_length: u64,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub global_step: u64,
    pub iteration: u64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// One line of a run log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunEvent {
    Episode(EpisodeRecord),
    Update(UpdateRecord),
}

/// ChaCha8 stream position, enough to resume the generator exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub episodes: Vec<EpisodeRecord>,
    pub updates: Vec<UpdateRecord>,
    pub params: Vec<f64>,
    pub global_step: u64,
    /// Trainer stream first, then one action-sampling stream per env.
    pub rng_states: Vec<RngState>,
}

impl RunRecord {
    pub fn returns(&self) -> Vec<i32> {
        self.episodes.iter().map(|e| e.episode_return).collect()
    }
}

/// Independent generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 0;
const STREAM_TRAINER: u64 = 1;
const STREAM_ENV_SEEDS: u64 = 2;
const STREAM_ACTIONS: u64 = 16;

pub struct TrainSetup<'a> {
    pub backbone: BackboneConfig,
    pub ppo: &'a PpoConfig,
    pub env: &'a PongConfig,
    pub seed: u64,
    /// Parameters are initialized from `seed + init_seed_offset`.
    pub init_seed_offset: u64,
}

/// Initial agent parameters for a run.
pub fn initial_params(agent: &Agent, seed: u64, init_seed_offset: u64) -> Vec<f64> {
    agent.init_params(&mut stream_rng(seed.wrapping_add(init_seed_offset), STREAM_INIT))
}

/// Trains one agent, calling `on_event` for every finished episode and every
/// update phase in order.
pub fn train(setup: &TrainSetup<'_>, mut on_event: impl FnMut(&RunEvent) -> Result<()>) -> Result<RunRecord> {
    let cfg = setup.ppo;
    cfg.validate()?;
    setup.env.validate()?;
    let agent = Agent::new(setup.backbone)?;
    let mut params = initial_params(&agent, setup.seed, setup.init_seed_offset);
    let mut adam = Adam::new(params.len(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut trainer_rng = stream_rng(setup.seed, STREAM_TRAINER);
    let mut seeder = stream_rng(setup.seed, STREAM_ENV_SEEDS);
    let mut envs = (0..cfg.num_envs)
        .map(|_| Pong::new(*setup.env, seeder.next_u64()))
        .collect::<Result<Vec<_>>>()?;
    let mut action_rngs: Vec<ChaCha8Rng> =
        (0..cfg.num_envs).map(|e| stream_rng(setup.seed, STREAM_ACTIONS + e as u64)).collect();
    let mut next_obs: Vec<Observation> = envs.iter().map(Pong::observation).collect();

    let mut episodes = Vec::new();
    let mut updates = Vec::new();
    let mut global_step = 0u64;

    for iteration in 0..cfg.num_iterations() {
        let mut buf = RolloutBuffer::with_capacity(cfg.num_envs, cfg.num_steps);
        for _ in 0..cfg.num_steps {
            let outputs = next_obs
                .par_iter()
                .map(|o| agent.evaluate(&params, o))
                .collect::<Result<Vec<_>>>()?;
            global_step += cfg.num_envs as u64;
            for (e, out) in outputs.iter().enumerate() {
                let dist = Categorical::new(out.logits)?;
                let action = dist.sample(&mut action_rngs[e]);
                let step = envs[e].step(Action::from_index(action)?)?;
                buf.obs.push(next_obs[e]);
                buf.actions.push(action);
                buf.log_probs.push(dist.log_prob(action));
                buf.values.push(out.value);
                buf.rewards.push(step.reward);
                buf.dones.push(step.done());
                next_obs[e] = step.observation;
                if let Some(info) = step.info {
                    let rec = episode_record(global_step, e, info);
                    on_event(&RunEvent::Episode(rec))?;
                    episodes.push(rec);
                    next_obs[e] = envs[e].reset_episode();
                }
            }
        }

        let bootstrap = next_obs
            .par_iter()
            .map(|o| agent.evaluate(&params, o).map(|out| out.value))
            .collect::<Result<Vec<_>>>()?;
        let est = buf.advantages(&bootstrap, cfg.gamma, cfg.gae_lambda)?;
        let samples: Vec<Sample> = (0..buf.len())
            .map(|i| Sample {
                obs: buf.obs[i],
                action: buf.actions[i],
                old_log_prob: buf.log_probs[i],
                old_value: buf.values[i],
                advantage: est.advantages[i],
                ret: est.returns[i],
            })
            .collect();

        let mut indices: Vec<usize> = (0..samples.len()).collect();
        let mut last = LossComponents::default();
        let mut grad_norm = 0.0;
        for _ in 0..cfg.update_epochs {
            indices.shuffle(&mut trainer_rng);
            for chunk in indices.chunks(cfg.minibatch_size()) {
                let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i]).collect();
                let (loss, mut grad) = loss_and_grad(&agent, &params, &batch, cfg).map_err(|e| {
                    Error::numeric(format!("iteration {iteration}, step {global_step}: {e}"))
                })?;
                grad_norm = clip_global_norm(&mut grad, cfg.max_grad_norm);
                adam.step(&mut params, &grad)?;
                if params.iter().any(|p| !p.is_finite()) {
                    return Err(Error::numeric(format!(
                        "non-finite parameters after update at iteration {iteration}, step {global_step}; \
                         last loss {loss:?}, pre-clip grad norm {grad_norm}, param norm {}",
                        l2_norm(&params)
                    )));
                }
                last = loss;
            }
        }
        let rec = UpdateRecord {
            global_step,
            iteration,
            policy_loss: -last.clip,
            value_loss: last.value,
            entropy: last.entropy,
            approx_kl: last.approx_kl,
            clip_fraction: last.clip_fraction,
            grad_norm,
        };
        on_event(&RunEvent::Update(rec))?;
        updates.push(rec);
    }

    let mut rng_states = vec![RngState::capture(&trainer_rng)];
    rng_states.extend(action_rngs.iter().map(RngState::capture));
    Ok(RunRecord { episodes, updates, params, global_step, rng_states })
}

fn episode_record(global_step: u64, env: usize, info: EpisodeInfo) -> EpisodeRecord {
    EpisodeRecord {
        global_step,
        env,
        episode_return: info.episode_return,
        episode_length: info.episode_length,
        truncated: info.truncated,
    }
}

/// Plays `episodes` full episodes with a fixed policy on a single env,
/// sampling actions (or taking the mode when `greedy`).
pub fn evaluate_policy(
    agent: &Agent,
    params: &[f64],
    env_cfg: &PongConfig,
    episodes: usize,
    seed: u64,
    greedy: bool,
) -> Result<Vec<EpisodeInfo>> {
    let mut env = Pong::new(*env_cfg, seed)?;
    let mut rng = stream_rng(seed, STREAM_ACTIONS);
    let mut out = Vec::with_capacity(episodes);
    let mut obs = env.observation();
    while out.len() < episodes {
        let dist = Categorical::new(agent.evaluate(params, &obs)?.logits)?;
        let a = if greedy { dist.mode() } else { dist.sample(&mut rng) };
        let step = env.step(Action::from_index(a)?)?;
        obs = step.observation;
        if let Some(info) = step.info {
            out.push(info);
            obs = env.reset_episode();
        }
    }
    Ok(out)
}
