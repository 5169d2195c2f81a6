//! Actor-critic trained on imagined latent rollouts.

mod returns;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use returns::{gae_advantages, lambda_return};

use crate::error::{Error, Result};
use crate::losses::MeanPolicy;
use crate::numcore::{
    clip_grad_norm, log_prob_rows, Activation, Adam, GaussianDiag, Graph, Mlp, ParamStore, Tensor,
    Var,
};
use crate::worldmodel::WorldModel;

/// Squashed actions stay this far inside the bounds.
pub const ACTION_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// Imagination horizon.
    pub horizon: usize,
    pub gamma: f64,
    pub lambda_return: f64,
    pub lambda_gae: f64,
    pub entropy_weight: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: usize,
    pub min_std: f64,
    pub grad_clip: f64,
    /// Number of posterior latents used as imagination starts; 0 uses all.
    pub imagine_starts: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            gamma: 0.99,
            lambda_return: 0.95,
            lambda_gae: 0.95,
            entropy_weight: 1e-4,
            actor_lr: 8e-5,
            critic_lr: 8e-5,
            hidden: 128,
            min_std: 1e-4,
            grad_clip: 100.0,
            imagine_starts: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.hidden == 0 {
            return Err(Error::config("agent.horizon and agent.hidden must be >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("agent.gamma must lie in (0, 1)"));
        }
        for (name, v) in [("lambda_return", self.lambda_return), ("lambda_gae", self.lambda_gae)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("agent.{name} must lie in [0, 1]")));
            }
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.min_std > 0.0)
            || !(self.entropy_weight >= 0.0)
        {
            return Err(Error::config("agent learning rates and min_std must be positive"));
        }
        Ok(())
    }
}

fn squash(u: f64) -> f64 {
    u.tanh().clamp(-1.0 + ACTION_MARGIN, 1.0 - ACTION_MARGIN)
}

/// Gaussian policy over pre-squash actions `u`; the environment sees `tanh(u)`.
#[derive(Debug, Clone)]
pub struct Policy {
    pub store: ParamStore,
    pub net: Mlp,
    pub action_dim: usize,
    pub min_std: f64,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(
        latent: usize,
        action_dim: usize,
        config: &AgentConfig,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new();
        let h = config.hidden;
        let net = Mlp::new(
            &mut store,
            "policy",
            &[latent, h, h, 2 * action_dim],
            Activation::Elu,
            rng,
        );
        Self {
            store,
            net,
            action_dim,
            min_std: config.min_std,
        }
    }

    pub fn dist(&self, g: &Graph, z: Var) -> GaussianDiag {
        GaussianDiag::from_head(g, self.net.forward(g, &self.store, z), self.min_std)
    }

    /// Sample `(u, tanh(u))` for every row of `z`.
    pub fn sample<R: Rng + ?Sized>(&self, z: &Tensor, rng: &mut R) -> (Tensor, Tensor) {
        let g = Graph::inference();
        let d = self.dist(&g, g.constant(z.clone()));
        let (mean, std) = (g.value(d.mean), g.value(d.std));
        let noise = Tensor::randn(mean.rows(), mean.cols(), rng);
        let mut u = mean.clone();
        for ((u, s), e) in u.data_mut().iter_mut().zip(std.data()).zip(noise.data()) {
            *u += s * e;
        }
        let a = u.map(squash);
        (u, a)
    }

    /// Greedy action `tanh(mean)`, kept strictly inside the bounds.
    pub fn greedy(&self, z: &Tensor) -> Tensor {
        let g = Graph::inference();
        let d = self.dist(&g, g.constant(z.clone()));
        g.value(d.mean).map(squash)
    }
}

impl MeanPolicy for Policy {
    fn mean_action(&self, g: &Graph, z: Var) -> Result<Var> {
        Ok(g.tanh(self.dist(g, z).mean))
    }
}

/// Gaussian state-value head.
#[derive(Debug, Clone)]
pub struct ValueHead {
    pub store: ParamStore,
    pub net: Mlp,
    pub min_std: f64,
}

impl ValueHead {
    pub fn new<R: Rng + ?Sized>(latent: usize, config: &AgentConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let h = config.hidden;
        let net = Mlp::new(&mut store, "value", &[latent, h, h, 2], Activation::Elu, rng);
        Self {
            store,
            net,
            min_std: config.min_std,
        }
    }

    pub fn dist(&self, g: &Graph, z: Var) -> GaussianDiag {
        GaussianDiag::from_head(g, self.net.forward(g, &self.store, z), self.min_std)
    }
}

/// `Q(z, a) = r(z'_mean) + gamma V(z'_mean)` where `z'_mean` is the prior
/// mean one step ahead. Returns `[N, 1]`.
pub fn q_value(
    g: &Graph,
    model: &WorldModel,
    value: &ValueHead,
    h: Var,
    z: Var,
    action: Var,
    gamma: f64,
) -> Result<Var> {
    let h1 = model.deter_step(g, h, z, action)?;
    let z1 = model.prior_dist(g, h1).mean;
    let r = model.reward(g, z1).mean;
    let v = value.dist(g, z1).mean;
    Ok(g.add(r, g.scale(v, gamma)))
}

/// Latent rollout under the policy; all tensors have `M` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ImaginedRollout {
    /// Recurrent states `h_0..h_H`.
    pub h: Vec<Tensor>,
    /// Latents `z_0..z_H`.
    pub z: Vec<Tensor>,
    /// Pre-squash actions taken at `z_0..z_{H-1}`.
    pub u: Vec<Tensor>,
    pub actions: Vec<Tensor>,
    /// Reward-head means at `z_1..z_H`.
    pub rewards: Vec<Tensor>,
    /// Value means at `z_0..z_H`; the last entry is the bootstrap.
    pub values: Vec<Tensor>,
}

impl ImaginedRollout {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Iterate the prior under policy-sampled actions, without gradients.
pub fn imagine<R: Rng + ?Sized>(
    model: &WorldModel,
    policy: &Policy,
    value: &ValueHead,
    start_h: &Tensor,
    start_z: &Tensor,
    horizon: usize,
    rng: &mut R,
) -> Result<ImaginedRollout> {
    if horizon == 0 {
        return Err(Error::contract("imagination horizon must be >= 1"));
    }
    let m = start_z.rows();
    let g = Graph::inference();
    let value_at = |z: &Tensor| g.value(value.dist(&g, g.constant(z.clone())).mean);
    let mut out = ImaginedRollout {
        h: vec![start_h.clone()],
        z: vec![start_z.clone()],
        u: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        values: vec![value_at(start_z)],
    };
    for t in 0..horizon {
        let (h, z) = (out.h[t].clone(), out.z[t].clone());
        let (u, a) = policy.sample(&z, rng);
        let h1 = model.deter_step(&g, g.constant(h), g.constant(z), g.constant(a.clone()))?;
        let dist = model.prior_dist(&g, h1);
        let noise = Tensor::randn(m, model.config.stoch, rng);
        let z1 = crate::numcore::reparam_sample(&g, &dist, &noise)?;
        let (h1, z1) = (g.value(h1), g.value(z1));
        let r = g.value(model.reward(&g, g.constant(z1.clone())).mean);
        let v = value_at(&z1);
        if !(h1.is_finite() && z1.is_finite() && r.is_finite() && v.is_finite() && u.is_finite()) {
            return Err(Error::numeric("imagine", format!("non-finite value at step {t}")));
        }
        out.h.push(h1);
        out.z.push(z1);
        out.u.push(u);
        out.actions.push(a);
        out.rewards.push(r);
        out.values.push(v);
    }
    Ok(out)
}

/// Time-major `[H][M]` values.
pub type Grid = Vec<Vec<f64>>;

/// Per-row λ-return targets and GAE advantages.
pub fn rollout_targets(rollout: &ImaginedRollout, config: &AgentConfig) -> Result<(Grid, Grid)> {
    let hz = rollout.horizon();
    let m = rollout.z[0].rows();
    let mut targets = vec![vec![0.0; m]; hz];
    let mut advantages = vec![vec![0.0; m]; hz];
    for row in 0..m {
        let r: Vec<f64> = rollout.rewards.iter().map(|t| t.get(row, 0)).collect();
        let v: Vec<f64> = rollout.values.iter().map(|t| t.get(row, 0)).collect();
        let g = lambda_return(&r, &v[1..], config.gamma, config.lambda_return)?;
        let a = gae_advantages(&r, &v, config.gamma, config.lambda_gae)?;
        for t in 0..hz {
            targets[t][row] = g[t];
            advantages[t][row] = a[t];
        }
    }
    Ok((targets, advantages))
}

fn stack(parts: &[Tensor]) -> Tensor {
    let cols = parts[0].cols();
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(data.len() / cols, cols, data).expect("consistent stack")
}

fn column(values: &[Vec<f64>]) -> Tensor {
    let data: Vec<f64> = values.iter().flatten().copied().collect();
    Tensor::new(data.len(), 1, data).expect("column")
}

/// Negative log-likelihood of fixed targets under the value head.
pub fn critic_loss(g: &Graph, value: &ValueHead, rollout: &ImaginedRollout, targets: &[Vec<f64>]) -> Result<Var> {
    let z = g.constant(stack(&rollout.z[..rollout.horizon()]));
    let t = g.constant(column(targets));
    let lp = log_prob_rows(g, &value.dist(g, z), t)?;
    Ok(g.neg(g.mean(lp)))
}

/// `-mean(A log pi(u|z)) - w mean(entropy)` with fixed advantages.
pub fn actor_loss(
    g: &Graph,
    policy: &Policy,
    rollout: &ImaginedRollout,
    advantages: &[Vec<f64>],
    entropy_weight: f64,
) -> Result<Var> {
    let hz = rollout.horizon();
    let z = g.constant(stack(&rollout.z[..hz]));
    let u = g.constant(stack(&rollout.u));
    let adv = g.constant(column(advantages));
    let dist = policy.dist(g, z);
    let lp = log_prob_rows(g, &dist, u)?;
    let pg = g.neg(g.mean(g.mul(adv, lp)));
    if entropy_weight == 0.0 {
        return Ok(pg);
    }
    // Entropy of a diagonal Gaussian up to a constant: sum of log std.
    let ent = g.mean(g.sum_cols(g.log(dist.std)));
    Ok(g.sub(pg, g.scale(ent, entropy_weight)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentLosses {
    pub actor: f64,
    pub critic: f64,
}

/// One Adam step for the critic and one for the actor. World-model
/// parameters are never touched.
pub fn actor_critic_update(
    policy: &mut Policy,
    value: &mut ValueHead,
    rollout: &ImaginedRollout,
    config: &AgentConfig,
    actor_opt: &mut Adam,
    critic_opt: &mut Adam,
) -> Result<AgentLosses> {
    let (targets, advantages) = rollout_targets(rollout, config)?;

    let g = Graph::new();
    let c = critic_loss(&g, value, rollout, &targets)?;
    let critic = g.item(c);
    let grads = g.backward(c)?;
    value.store.zero_grad();
    value.store.accumulate(&grads);
    clip_grad_norm(&mut value.store, config.grad_clip);
    critic_opt.step(&mut value.store)?;

    let g = Graph::new();
    let a = actor_loss(&g, policy, rollout, &advantages, config.entropy_weight)?;
    let actor = g.item(a);
    let grads = g.backward(a)?;
    policy.store.zero_grad();
    policy.store.accumulate(&grads);
    clip_grad_norm(&mut policy.store, config.grad_clip);
    actor_opt.step(&mut policy.store)?;

    if !(actor.is_finite() && critic.is_finite()) {
        return Err(Error::numeric("actor_critic_update", format!("actor {actor}, critic {critic}")));
    }
    Ok(AgentLosses { actor, critic })
}
