//! Replay, batch sampling, the interleaved model/agent training loop,
//! evaluation and the transfer protocol.

mod buffer;
pub mod checkpoint;
mod eval;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use buffer::{Episode, EpisodeBuffer};
pub use eval::{
    evaluate, export_latents, reverse_action_cosine, rollout_error_eval, transfer_eval,
    welch_one_sided, EvalResult, LatentRow, TransferRow, WelchResult,
};

use crate::agent::{actor_critic_update, imagine, q_value, AgentConfig, AgentLosses, Policy, ValueHead};
use crate::envs::{Env, EnvSpec, Perturbation};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, LossReport};
use crate::numcore::{clip_grad_norm, seeded, Adam, Graph, Tensor};
use crate::truncation::{
    adaptive_mask_for_batch, and_masks, fixed_truncation_mask, TruncationConfig,
};
use crate::worldmodel::{
    forward_sweep, retrace_sweep, ModelConfig, SweepResult, TrajectoryBatch, WorldModel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Segments per batch (N).
    pub batch_size: usize,
    /// Transitions per segment (T).
    pub seq_len: usize,
    /// Model-loss window K; 0 means one window of length T.
    pub window_len: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Train steps per collected environment step.
    pub train_ratio: f64,
    pub warmup_episodes: usize,
    pub buffer_capacity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            seq_len: 50,
            window_len: 0,
            total_steps: 100_000,
            eval_every: 10_000,
            eval_episodes: 5,
            train_ratio: 1.0,
            warmup_episodes: 5,
            buffer_capacity: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluation seeds per transfer change set.
    pub transfer_seeds: usize,
    pub change_sets: Vec<Perturbation>,
    pub rollout_context: usize,
    pub rollout_horizon: usize,
    pub rollout_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            transfer_seeds: 15,
            change_sets: vec![
                Perturbation {
                    name: Some("R".into()),
                    reward_offset: Some(1.0),
                    ..Default::default()
                },
                Perturbation {
                    name: Some("M".into()),
                    mass: Some(0.5),
                    ..Default::default()
                },
            ],
            rollout_context: 5,
            rollout_horizon: 30,
            rollout_episodes: 8,
        }
    }
}

/// Every setting needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Experiment {
    pub seed: u64,
    pub env: EnvSpec,
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub truncation: TruncationConfig,
    pub agent: AgentConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.env.validate().map_err(|e| Error::config(e.to_string()))?;
        self.model.validate()?;
        self.losses.validate()?;
        self.agent.validate()?;
        let t = &self.trainer;
        if t.batch_size == 0 || t.seq_len == 0 {
            return Err(Error::config("trainer.batch_size and trainer.seq_len must be >= 1"));
        }
        if t.window_len > t.seq_len {
            return Err(Error::config("trainer.window_len must not exceed trainer.seq_len"));
        }
        if !(t.train_ratio > 0.0) || t.eval_every == 0 {
            return Err(Error::config("trainer.train_ratio and trainer.eval_every must be positive"));
        }
        if t.buffer_capacity < self.env.agent_steps_per_episode() {
            return Err(Error::config("trainer.buffer_capacity is smaller than one episode"));
        }
        if self.truncation.mode.adaptive() {
            self.truncation.validate(t.seq_len)?;
        } else {
            self.truncation.validate(usize::MAX)?;
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        match self.trainer.window_len {
            0 => self.trainer.seq_len,
            k => k,
        }
    }
}

/// How actions are chosen while acting in the environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Random,
    Explore,
    Greedy,
}

/// Posterior filter used while acting.
struct Filter {
    h: Tensor,
    z: Tensor,
    prev_action: Tensor,
}

impl Filter {
    fn new<R: Rng + ?Sized>(model: &WorldModel, sample: bool, rng: &mut R) -> Self {
        Self {
            h: Tensor::zeros(1, model.config.deter),
            z: if sample {
                Tensor::randn(1, model.config.stoch, rng)
            } else {
                Tensor::zeros(1, model.config.stoch)
            },
            prev_action: Tensor::zeros(1, model.action_dim),
        }
    }

    fn observe<R: Rng + ?Sized>(&mut self, model: &WorldModel, obs: &[f64], sample: bool, rng: &mut R) -> Result<()> {
        let g = Graph::inference();
        let h = model.deter_step(
            &g,
            g.constant(self.h.clone()),
            g.constant(self.z.clone()),
            g.constant(self.prev_action.clone()),
        )?;
        let e = model.embed(&g, g.constant(Tensor::row(obs)))?;
        let dist = model.posterior_dist(&g, h, e);
        self.h = g.value(h);
        self.z = if sample {
            let noise = Tensor::randn(1, model.config.stoch, rng);
            g.value(crate::numcore::reparam_sample(&g, &dist, &noise)?)
        } else {
            g.value(dist.mean)
        };
        if !(self.h.is_finite() && self.z.is_finite()) {
            return Err(Error::numeric("filter", "non-finite latent while acting"));
        }
        Ok(())
    }
}

/// Run one episode from `env.reset(seed)`, filtering observations with the
/// posterior when the policy acts.
pub fn run_episode<R: Rng + ?Sized>(
    env: &mut Env,
    model: &WorldModel,
    policy: &Policy,
    mode: ActMode,
    seed: u64,
    rng: &mut R,
) -> Result<Episode> {
    let first = env.reset(seed);
    let sample = mode == ActMode::Explore;
    let mut filter = Filter::new(model, sample, rng);
    let mut ep = Episode {
        obs: vec![first.observation],
        ..Default::default()
    };
    let action_dim = env.spec().action_dim();
    loop {
        let action = match mode {
            ActMode::Random => Tensor::uniform(1, action_dim, -1.0, 1.0, rng),
            ActMode::Explore | ActMode::Greedy => {
                filter.observe(model, ep.obs.last().expect("non-empty"), sample, rng)?;
                if sample {
                    policy.sample(&filter.z, rng).1
                } else {
                    policy.greedy(&filter.z)
                }
            }
        };
        let step = env.step_repeat(action.data())?;
        ep.actions.push(action.data().to_vec());
        ep.rewards.push(step.reward);
        ep.terminals.push(step.terminal);
        ep.flags.push(step.irreversible_flag);
        ep.obs.push(step.observation);
        filter.prev_action = action;
        if step.terminal {
            return Ok(ep);
        }
    }
}

/// Counts of masked retrace pairs split by ground-truth irreversibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MaskStats {
    pub flagged: u64,
    pub flagged_masked: u64,
    pub reversible: u64,
    pub reversible_masked: u64,
    /// Flagged pairs whose earlier latent is not yet flagged.
    pub crossings: u64,
    pub crossings_masked: u64,
}

impl MaskStats {
    pub fn flagged_rate(&self) -> f64 {
        self.flagged_masked as f64 / self.flagged.max(1) as f64
    }

    pub fn reversible_rate(&self) -> f64 {
        self.reversible_masked as f64 / self.reversible.max(1) as f64
    }

    pub fn crossing_rate(&self) -> f64 {
        self.crossings_masked as f64 / self.crossings.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: LossReport,
    pub agent: AgentLosses,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub report: StepReport,
    pub eval: Option<(f64, f64)>,
}

pub struct Trainer {
    pub exp: Experiment,
    pub env: Env,
    pub model: WorldModel,
    pub policy: Policy,
    pub value: ValueHead,
    pub model_opt: Adam,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub buffer: EpisodeBuffer,
    pub global_step: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub mask_stats: MaskStats,
    pub last_report: Option<StepReport>,
    rng: crate::numcore::Rng,
}

impl Trainer {
    pub fn new(exp: Experiment) -> Result<Self> {
        exp.validate()?;
        let env = Env::new(exp.env.clone())?;
        let (obs_dim, action_dim) = (exp.env.obs_dim(), exp.env.action_dim());
        let model = WorldModel::new(exp.model.clone(), obs_dim, action_dim, &mut seeded(exp.seed ^ 0x6d6f_64656c))?;
        let policy = Policy::new(exp.model.stoch, action_dim, &exp.agent, &mut seeded(exp.seed ^ 0x6163_746f72));
        let value = ValueHead::new(exp.model.stoch, &exp.agent, &mut seeded(exp.seed ^ 0x7661_6c7565));
        Ok(Self {
            model_opt: Adam::new(exp.model.lr, &model.store),
            actor_opt: Adam::new(exp.agent.actor_lr, &policy.store),
            critic_opt: Adam::new(exp.agent.critic_lr, &value.store),
            buffer: EpisodeBuffer::new(exp.trainer.buffer_capacity),
            rng: seeded(exp.seed),
            env,
            model,
            policy,
            value,
            exp,
            global_step: 0,
            env_steps: 0,
            episodes: 0,
            mask_stats: MaskStats::default(),
            last_report: None,
        })
    }

    /// Collect one episode into the buffer.
    pub fn collect_episode(&mut self, mode: ActMode) -> Result<usize> {
        let seed = self.rng.gen();
        let ep = run_episode(&mut self.env, &self.model, &self.policy, mode, seed, &mut self.rng)?;
        let len = ep.len();
        self.buffer.push(ep)?;
        self.env_steps += len as u64;
        self.episodes += 1;
        Ok(len)
    }

    /// Random-policy episodes until the warm-up contract holds.
    pub fn warmup(&mut self) -> Result<()> {
        let t = &self.exp.trainer;
        let need = t.batch_size * t.seq_len;
        let (episodes, seq_len) = (t.warmup_episodes, t.seq_len);
        let mut guard = 0;
        while (self.episodes as usize) < episodes || self.buffer.steps() < need || !self.buffer.ready(seq_len) {
            self.collect_episode(ActMode::Random)?;
            guard += 1;
            if guard > 100_000 {
                return Err(Error::NotReady("warm-up cannot fill the buffer".into()));
            }
        }
        Ok(())
    }

    /// Retrace masks (`N x (K-1)`) for one window.
    fn masks(&mut self, batch: &TrajectoryBatch, sweep: &SweepResult, graph: &Graph) -> Result<Vec<Vec<f64>>> {
        let n = batch.batch_size();
        let steps = batch.horizon().saturating_sub(1);
        let tc = &self.exp.truncation;
        let mut masks = vec![vec![1.0; steps]; n];
        if tc.mode.adaptive() && self.global_step >= tc.warmup && steps > 0 {
            let g = Graph::inference();
            let mut q = vec![Vec::with_capacity(steps); n];
            for i in 0..steps {
                let post = &sweep.posteriors[i];
                let h = g.constant(graph.value(post.h));
                let z = g.constant(graph.value(post.z));
                let a = g.constant(batch.actions[i + 1].clone());
                let qv = g.value(q_value(&g, &self.model, &self.value, h, z, a, self.exp.agent.gamma)?);
                for (row, qn) in q.iter_mut().enumerate() {
                    qn.push(qv.get(row, 0));
                }
            }
            masks = adaptive_mask_for_batch(&q, tc, self.global_step)?;
        }
        if tc.mode.fixed() {
            let fixed: Vec<Vec<f64>> = (0..n)
                .map(|row| {
                    let full = fixed_truncation_mask(
                        batch.episode_lens[row],
                        tc.fixed_proportion,
                        self.global_step,
                        tc.anneal,
                    );
                    (1..=steps).map(|tau| full[batch.offsets[row] + tau]).collect()
                })
                .collect();
            masks = and_masks(&masks, &fixed)?;
        }
        if tc.mode != crate::truncation::TruncationMode::Off && self.global_step >= tc.warmup {
            for (row, m) in masks.iter().enumerate() {
                for (i, &keep) in m.iter().enumerate() {
                    let masked = (keep == 0.0) as u64;
                    if batch.flags[i + 1][row] {
                        self.mask_stats.flagged += 1;
                        self.mask_stats.flagged_masked += masked;
                        if !batch.flags[i][row] {
                            self.mask_stats.crossings += 1;
                            self.mask_stats.crossings_masked += masked;
                        }
                    } else {
                        self.mask_stats.reversible += 1;
                        self.mask_stats.reversible_masked += masked;
                    }
                }
            }
        }
        Ok(masks)
    }

    /// One model update over the sampled batch followed by one actor-critic
    /// update on imagined rollouts.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let t = self.exp.trainer.seq_len;
        let batch = self.buffer.sample_batch(self.exp.trainer.batch_size, t, &mut self.rng)?;
        let k = self.exp.window_len();
        let g = Graph::new();
        let mut avg = None;
        let mut reports = Vec::new();
        let mut last_sweep = None;
        for (count, start) in (0..=t - k).enumerate() {
            let window = batch.window(start, k)?;
            let sweep = forward_sweep(&g, &self.model, &window, &mut self.rng)?;
            let masks = self.masks(&window, &sweep, &g)?;
            let retrace = retrace_sweep(&g, &self.model, &sweep, self.exp.model.retrace_stop_grad, &mut self.rng)?;
            let (loss, report) = total_loss(
                &g,
                &self.model,
                &self.policy,
                &window,
                &sweep,
                &retrace,
                &masks,
                &self.exp.losses,
            )?;
            avg = Some(running_mean(&g, avg, loss, count));
            reports.push(report);
            last_sweep = Some(sweep);
        }
        let avg = avg.expect("at least one window");
        let loss = mean_report(&reports);
        self.last_report = Some(StepReport {
            loss,
            agent: AgentLosses { actor: f64::NAN, critic: f64::NAN },
        });
        let grads = g.backward(avg)?;
        self.model.store.zero_grad();
        self.model.store.accumulate(&grads);
        clip_grad_norm(&mut self.model.store, self.exp.model.grad_clip);
        self.model_opt.step(&mut self.model.store)?;

        let sweep = last_sweep.expect("at least one window");
        let h: Vec<Tensor> = sweep.posteriors.iter().map(|p| g.value(p.h)).collect();
        let z: Vec<Tensor> = sweep.posteriors.iter().map(|p| g.value(p.z)).collect();
        drop(g);
        let (mut h, mut z) = (stack_rows(&h), stack_rows(&z));
        let starts = self.exp.agent.imagine_starts;
        if starts > 0 && starts < h.rows() {
            let mut idx = sample_indices(&mut self.rng, h.rows(), starts).into_vec();
            idx.sort_unstable();
            h = h.select_rows(&idx);
            z = z.select_rows(&idx);
        }
        let rollout = imagine(&self.model, &self.policy, &self.value, &h, &z, self.exp.agent.horizon, &mut self.rng)?;
        let agent = actor_critic_update(
            &mut self.policy,
            &mut self.value,
            &rollout,
            &self.exp.agent,
            &mut self.actor_opt,
            &mut self.critic_opt,
        )?;
        self.global_step += 1;
        let report = StepReport { loss, agent };
        self.last_report = Some(report);
        Ok(report)
    }

    /// Greedy evaluation with seeds derived from the run seed and `tag`.
    pub fn evaluate(&self, episodes: usize, tag: u64) -> Result<EvalResult> {
        evaluate(&self.exp.env, &self.model, &self.policy, episodes, self.exp.seed.wrapping_add(tag))
    }

    /// Train until `total_steps`, interleaving collection; `sink` sees every
    /// metrics row after it is produced.
    pub fn run(&mut self, sink: &mut dyn FnMut(&MetricsRow, &Trainer) -> Result<()>) -> Result<()> {
        self.warmup()?;
        let total = self.exp.trainer.total_steps;
        while self.global_step < total {
            let len = self.collect_episode(ActMode::Explore)?;
            let n = ((len as f64 * self.exp.trainer.train_ratio).round() as u64).max(1);
            for _ in 0..n {
                if self.global_step >= total {
                    break;
                }
                let report = self.train_step()?;
                let eval = if self.global_step.is_multiple_of(self.exp.trainer.eval_every) {
                    let r = self.evaluate(self.exp.trainer.eval_episodes, self.global_step)?;
                    Some((r.mean, r.sd))
                } else {
                    None
                };
                let row = MetricsRow {
                    step: self.global_step,
                    report,
                    eval,
                };
                sink(&row, self)?;
            }
        }
        Ok(())
    }
}

/// Running mean `avg_c = c/(c+1) avg_{c-1} + 1/(c+1) loss`.
fn running_mean(g: &Graph, avg: Option<crate::numcore::Var>, loss: crate::numcore::Var, count: usize) -> crate::numcore::Var {
    match avg {
        None => loss,
        Some(a) => {
            let c = count as f64;
            g.add(g.scale(a, c / (c + 1.0)), g.scale(loss, 1.0 / (c + 1.0)))
        }
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let f = |get: fn(&LossReport) -> f64| reports.iter().map(get).sum::<f64>() / n;
    LossReport {
        total: f(|r| r.total),
        elbo_term: f(|r| r.elbo_term),
        kl_term: f(|r| r.kl_term),
        recon_term: f(|r| r.recon_term),
        retrace_term: f(|r| r.retrace_term),
        masked_fraction: f(|r| r.masked_fraction),
    }
}

fn stack_rows(parts: &[Tensor]) -> Tensor {
    let cols = parts[0].cols();
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(data.len() / cols, cols, data).expect("consistent rows")
}

pub const METRICS_HEADER: [&str; 11] = [
    "step",
    "total",
    "elbo",
    "kl",
    "recon",
    "retrace",
    "masked_fraction",
    "actor_loss",
    "critic_loss",
    "eval_return_mean",
    "eval_return_sd",
];

impl MetricsRow {
    pub fn record(&self) -> Vec<String> {
        let l = &self.report.loss;
        let (em, es) = match self.eval {
            Some((m, s)) => (m.to_string(), s.to_string()),
            None => (String::new(), String::new()),
        };
        vec![
            self.step.to_string(),
            l.total.to_string(),
            l.elbo_term.to_string(),
            l.kl_term.to_string(),
            l.recon_term.to_string(),
            l.retrace_term.to_string(),
            l.masked_fraction.to_string(),
            self.report.agent.actor.to_string(),
            self.report.agent.critic.to_string(),
            em,
            es,
        ]
    }
}

#[cfg(test)]
mod tests;
