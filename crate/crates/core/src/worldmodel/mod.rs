//! Recurrent latent state-space model.
//!
//! The deterministic path is a GRU over `[z, a]`; the prior head reads the
//! new recurrent state `h'`, the posterior head reads `[h', e]` where `e` is
//! the observation embedding. Decoder, reward head, policy and value all
//! read the stochastic latent `z` alone, so retraced latents (which only
//! have a `z` and the recurrent state they were sampled from) can be scored
//! by every head.

mod rollout;
mod sweep;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use rollout::{open_loop_rollout, RolloutPrediction};
pub use sweep::{forward_sweep, retrace_sweep, RetraceResult, SweepResult, TrajectoryBatch};

use crate::error::{Error, Result};
use crate::numcore::{
    gru_cell, reparam_sample, Activation, Dense, GaussianDiag, Graph, GruCell, Mlp, ParamKey,
    ParamStore, Tensor, Var,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    /// Recurrent state size.
    pub deter: usize,
    /// Stochastic latent size.
    pub stoch: usize,
    pub min_std: f64,
    /// Stop gradients at the posterior sample fed into the retrace branch.
    pub retrace_stop_grad: bool,
    pub lr: f64,
    pub grad_clip: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden: 128,
            deter: 256,
            stoch: 32,
            min_std: crate::numcore::STD_FLOOR,
            retrace_stop_grad: false,
            lr: 6e-4,
            grad_clip: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 || self.deter == 0 || self.stoch == 0 {
            return Err(Error::config("model sizes must be positive"));
        }
        if !(self.min_std > 0.0) || !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::config("min_std, lr and grad_clip must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Prior,
    Posterior,
    Retraced,
}

/// Batched latent state: recurrent `h`, sampled `z`, and the distribution
/// `z` was drawn from.
#[derive(Debug, Clone, Copy)]
pub struct LatentState {
    pub h: Var,
    pub z: Var,
    pub dist: GaussianDiag,
    pub role: Role,
}

/// Parameter groups of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    /// Observation encoder.
    Encoder,
    /// Recurrent core and prior head (shared by forward and retrace steps).
    Prior,
    /// Posterior head.
    Posterior,
    /// Decoder and reward head.
    Generative,
    /// Reverse-action approximator.
    Reverse,
}

#[derive(Debug, Clone)]
pub struct WorldModel {
    pub config: ModelConfig,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub store: ParamStore,
    pub encoder: Mlp,
    pub rnn_input: Dense,
    pub gru: GruCell,
    pub prior_head: Mlp,
    pub post_head: Mlp,
    pub decoder: Mlp,
    pub reward_head: Mlp,
    pub reverse: Mlp,
}

impl WorldModel {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        obs_dim: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            embed_dim,
            hidden,
            deter,
            stoch,
            ..
        } = config;
        let mut store = ParamStore::new();
        let encoder = Mlp::new(
            &mut store,
            "encoder",
            &[obs_dim, hidden, embed_dim],
            Activation::Relu,
            rng,
        );
        let rnn_input = Dense::new(&mut store, "rnn_input", stoch + action_dim, hidden, rng);
        let gru = GruCell::new(&mut store, "gru", hidden, deter, rng);
        let prior_head = Mlp::new(
            &mut store,
            "prior",
            &[deter, hidden, 2 * stoch],
            Activation::Relu,
            rng,
        );
        let post_head = Mlp::new(
            &mut store,
            "posterior",
            &[deter + embed_dim, hidden, 2 * stoch],
            Activation::Relu,
            rng,
        );
        let decoder = Mlp::new(
            &mut store,
            "decoder",
            &[stoch, hidden, hidden, obs_dim],
            Activation::Relu,
            rng,
        );
        let reward_head = Mlp::new(
            &mut store,
            "reward",
            &[stoch, hidden, hidden, 2],
            Activation::Relu,
            rng,
        );
        let reverse = Mlp::new(
            &mut store,
            "reverse",
            &[2 * stoch, hidden, hidden, action_dim],
            Activation::Relu,
            rng,
        );
        Ok(Self {
            config,
            obs_dim,
            action_dim,
            store,
            encoder,
            rnn_input,
            gru,
            prior_head,
            post_head,
            decoder,
            reward_head,
            reverse,
        })
    }

    pub fn keys(&self, part: Part) -> Vec<ParamKey> {
        match part {
            Part::Encoder => self.encoder.keys(),
            Part::Prior => {
                let mut k = vec![self.rnn_input.weight, self.rnn_input.bias];
                k.extend(self.gru.keys());
                k.extend(self.prior_head.keys());
                k
            }
            Part::Posterior => self.post_head.keys(),
            Part::Generative => {
                let mut k = self.decoder.keys();
                k.extend(self.reward_head.keys());
                k
            }
            Part::Reverse => self.reverse.keys(),
        }
    }

    fn check_cols(&self, g: &Graph, v: Var, cols: usize, what: &str) -> Result<()> {
        if g.shape(v)[1] != cols {
            return Err(Error::contract(format!(
                "{what}: expected {cols} columns, got {:?}",
                g.shape(v)
            )));
        }
        Ok(())
    }

    /// Context embedding `e = q_phi(O)`.
    pub fn embed(&self, g: &Graph, obs: Var) -> Result<Var> {
        self.check_cols(g, obs, self.obs_dim, "embed")?;
        Ok(self.encoder.forward(g, &self.store, obs))
    }

    /// Initial state: `h = 0`, `z ~ N(0, I)`.
    pub fn initial_state<R: Rng + ?Sized>(&self, g: &Graph, batch: usize, rng: &mut R) -> LatentState {
        let h = g.constant(Tensor::zeros(batch, self.config.deter));
        let mean = g.constant(Tensor::zeros(batch, self.config.stoch));
        let std = g.constant(Tensor::full(batch, self.config.stoch, 1.0));
        let z = g.constant(Tensor::randn(batch, self.config.stoch, rng));
        LatentState {
            h,
            z,
            dist: GaussianDiag { mean, std },
            role: Role::Prior,
        }
    }

    /// Recurrent update `h' = GRU(h, relu(W [z, a]))`.
    pub fn deter_step(&self, g: &Graph, h: Var, z: Var, action: Var) -> Result<Var> {
        self.check_cols(g, action, self.action_dim, "action")?;
        self.check_cols(g, z, self.config.stoch, "latent")?;
        let x = g.concat_cols(&[z, action]);
        let x = g.relu(self.rnn_input.forward(g, &self.store, x));
        Ok(gru_cell(g, &self.store, &self.gru, x, h))
    }

    pub fn prior_dist(&self, g: &Graph, h: Var) -> GaussianDiag {
        let out = self.prior_head.forward(g, &self.store, h);
        GaussianDiag::from_head(g, out, self.config.min_std)
    }

    pub fn posterior_dist(&self, g: &Graph, h: Var, e: Var) -> GaussianDiag {
        let x = g.concat_cols(&[h, e]);
        let out = self.post_head.forward(g, &self.store, x);
        GaussianDiag::from_head(g, out, self.config.min_std)
    }

    /// One prior transition from `state` under `action`.
    pub fn prior_step(
        &self,
        g: &Graph,
        state: &LatentState,
        action: Var,
        noise: &Tensor,
    ) -> Result<LatentState> {
        let h = self.deter_step(g, state.h, state.z, action)?;
        let dist = self.prior_dist(g, h);
        let z = reparam_sample(g, &dist, noise)?;
        g.check("prior_step")?;
        Ok(LatentState {
            h,
            z,
            dist,
            role: Role::Prior,
        })
    }

    /// Prior and posterior for the same transition; both share `h'`.
    pub fn posterior_step(
        &self,
        g: &Graph,
        state: &LatentState,
        action: Var,
        e: Var,
        prior_noise: &Tensor,
        post_noise: &Tensor,
    ) -> Result<(LatentState, LatentState)> {
        let prior = self.prior_step(g, state, action, prior_noise)?;
        self.check_cols(g, e, self.config.embed_dim, "embedding")?;
        let dist = self.posterior_dist(g, prior.h, e);
        let z = reparam_sample(g, &dist, post_noise)?;
        g.check("posterior_step")?;
        Ok((
            prior,
            LatentState {
                h: prior.h,
                z,
                dist,
                role: Role::Posterior,
            },
        ))
    }

    /// Observation model with unit variance.
    pub fn decode(&self, g: &Graph, z: Var) -> GaussianDiag {
        let mean = self.decoder.forward(g, &self.store, z);
        let [n, d] = g.shape(mean);
        let std = g.constant(Tensor::full(n, d, 1.0));
        GaussianDiag { mean, std }
    }

    /// Univariate reward distribution.
    pub fn reward(&self, g: &Graph, z: Var) -> GaussianDiag {
        let out = self.reward_head.forward(g, &self.store, z);
        GaussianDiag::from_head(g, out, self.config.min_std)
    }

    /// Approximate reversed action taking `z_next` back to `z_prev`, in `[-1, 1]`.
    pub fn reverse_action(&self, g: &Graph, z_next: Var, z_prev: Var) -> Result<Var> {
        self.check_cols(g, z_next, self.config.stoch, "reverse_action")?;
        self.check_cols(g, z_prev, self.config.stoch, "reverse_action")?;
        let x = g.concat_cols(&[z_next, z_prev]);
        Ok(g.tanh(self.reverse.forward(g, &self.store, x)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::seeded;

    fn small() -> ModelConfig {
        ModelConfig {
            embed_dim: 6,
            hidden: 8,
            deter: 10,
            stoch: 4,
            ..Default::default()
        }
    }

    #[test]
    fn default_sizes() {
        let c = ModelConfig::default();
        assert_eq!((c.deter, c.stoch, c.embed_dim, c.hidden), (256, 32, 64, 128));
        let m = WorldModel::new(c, 4, 2, &mut seeded(0)).unwrap();
        let g = Graph::new();
        let s = m.initial_state(&g, 1, &mut seeded(1));
        let a = g.constant(Tensor::zeros(1, 2));
        let p = m.prior_step(&g, &s, a, &Tensor::zeros(1, 32)).unwrap();
        assert_eq!(g.shape(p.h), [1, 256]);
    }

    #[test]
    fn embed_is_deterministic_and_sized() {
        let m = WorldModel::new(small(), 4, 2, &mut seeded(0)).unwrap();
        let g = Graph::new();
        let o = g.constant(Tensor::row(&[0.1, -0.2, 0.3, 0.0]));
        let e1 = g.value(m.embed(&g, o).unwrap());
        let e2 = g.value(m.embed(&g, o).unwrap());
        assert_eq!(e1, e2);
        assert_eq!(e1.cols(), 6);
        let bad = g.constant(Tensor::row(&[0.1]));
        assert!(m.embed(&g, bad).is_err());
    }

    #[test]
    fn zero_final_layer_embeds_to_bias() {
        let mut m = WorldModel::new(small(), 4, 2, &mut seeded(0)).unwrap();
        let last = *m.encoder.layers.last().unwrap();
        m.store.value_mut(last.weight).fill(0.0);
        let bias: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        m.store.value_mut(last.bias).data_mut().copy_from_slice(&bias);
        let g = Graph::new();
        let o = g.constant(Tensor::row(&[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(g.value(m.embed(&g, o).unwrap()).data(), &bias[..]);
    }

    #[test]
    fn prior_and_posterior_share_recurrent_state() {
        let m = WorldModel::new(small(), 4, 2, &mut seeded(0)).unwrap();
        let g = Graph::new();
        let mut rng = seeded(3);
        let s = m.initial_state(&g, 3, &mut rng);
        let a = g.constant(Tensor::uniform(3, 2, -1.0, 1.0, &mut rng));
        let o = g.constant(Tensor::randn(3, 4, &mut rng));
        let e = m.embed(&g, o).unwrap();
        let (prior, post) = m
            .posterior_step(&g, &s, a, e, &Tensor::randn(3, 4, &mut rng), &Tensor::randn(3, 4, &mut rng))
            .unwrap();
        assert_eq!(prior.h, post.h);
        assert!(g.value(prior.dist.std).data().iter().all(|&v| v > 0.0));
        assert!(g.value(post.dist.std).data().iter().all(|&v| v > 0.0));
        assert_eq!(post.role, Role::Posterior);
    }

    #[test]
    fn posterior_matches_prior_when_embedding_block_is_zero() {
        let mut m = WorldModel::new(small(), 4, 2, &mut seeded(0)).unwrap();
        // Copy prior head into the posterior head, zeroing the e-block rows.
        let (deter, hidden) = (m.config.deter, m.config.hidden);
        let pw = m.store.value(m.prior_head.layers[0].weight).clone();
        let pb = m.store.value(m.prior_head.layers[0].bias).clone();
        let qw = m.store.value_mut(m.post_head.layers[0].weight);
        qw.fill(0.0);
        for r in 0..deter {
            for c in 0..hidden {
                qw.set(r, c, pw.get(r, c));
            }
        }
        m.store.value_mut(m.post_head.layers[0].bias).clone_from(&pb);
        for (src, dst) in [
            (m.prior_head.layers[1].weight, m.post_head.layers[1].weight),
            (m.prior_head.layers[1].bias, m.post_head.layers[1].bias),
        ] {
            let v = m.store.value(src).clone();
            m.store.value_mut(dst).clone_from(&v);
        }
        let g = Graph::new();
        let mut rng = seeded(5);
        let s = m.initial_state(&g, 2, &mut rng);
        let a = g.constant(Tensor::uniform(2, 2, -1.0, 1.0, &mut rng));
        let e = g.constant(Tensor::zeros(2, 6));
        let n = Tensor::zeros(2, 4);
        let (prior, post) = m.posterior_step(&g, &s, a, e, &n, &n).unwrap();
        assert_eq!(g.value(prior.dist.mean), g.value(post.dist.mean));
    }

    #[test]
    fn heads_have_expected_dims() {
        let m = WorldModel::new(small(), 4, 2, &mut seeded(0)).unwrap();
        let g = Graph::new();
        let z = g.constant(Tensor::randn(5, 4, &mut seeded(2)));
        let d = m.decode(&g, z);
        assert_eq!(g.shape(d.mean), [5, 4]);
        let r = m.reward(&g, z);
        assert_eq!(g.shape(r.mean), [5, 1]);
        let d2 = m.decode(&g, z);
        assert_eq!(g.value(d.mean), g.value(d2.mean));
    }

    #[test]
    fn reverse_action_is_bounded() {
        let m = WorldModel::new(small(), 4, 2, &mut seeded(0)).unwrap();
        let g = Graph::new();
        let z1 = g.constant(Tensor::randn(50, 4, &mut seeded(8)).map(|v| v * 50.0));
        let z0 = g.constant(Tensor::randn(50, 4, &mut seeded(9)));
        let a = g.value(m.reverse_action(&g, z1, z0).unwrap());
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let same = m.reverse_action(&g, z0, z0).unwrap();
        assert_eq!(g.shape(same), [50, 2]);
    }

    #[test]
    fn fixed_seed_prior_step_is_reproducible() {
        let m = WorldModel::new(small(), 4, 2, &mut seeded(0)).unwrap();
        let run = || {
            let g = Graph::new();
            let mut rng = seeded(11);
            let s = m.initial_state(&g, 2, &mut rng);
            let a = g.constant(Tensor::uniform(2, 2, -1.0, 1.0, &mut rng));
            let p = m.prior_step(&g, &s, a, &Tensor::randn(2, 4, &mut rng)).unwrap();
            (g.value(p.h), g.value(p.z))
        };
        assert_eq!(run(), run());
    }
}
