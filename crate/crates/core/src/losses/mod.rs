//! Forward ELBO, retrace losses and the masked combined objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{kl_rows, log_prob_rows, w2_rows, GaussianDiag, Graph, Tensor, Var};
use crate::worldmodel::{LatentState, RetraceResult, SweepResult, TrajectoryBatch, WorldModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetraceVariant {
    Bisimulation,
    L2,
    Reconstruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// KL weight.
    pub beta: f64,
    /// Retrace weight.
    pub lambda: f64,
    /// Discount on the transition term of the bisimulation loss.
    pub gamma: f64,
    pub retrace_variant: RetraceVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda: 1.0,
            gamma: 0.99,
            retrace_variant: RetraceVariant::Bisimulation,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::config("losses.beta and losses.lambda must be >= 0"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("losses.gamma must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub elbo_term: f64,
    /// Unweighted mean KL.
    pub kl_term: f64,
    /// Mean negative log-likelihood of observations and rewards.
    pub recon_term: f64,
    /// Weighted, masked retrace contribution to `total`.
    pub retrace_term: f64,
    pub masked_fraction: f64,
}

/// Deterministic action used inside the bisimulation loss.
pub trait MeanPolicy {
    fn mean_action(&self, g: &Graph, z: Var) -> Result<Var>;
}

impl<F: Fn(&Graph, Var) -> Var> MeanPolicy for F {
    fn mean_action(&self, g: &Graph, z: Var) -> Result<Var> {
        Ok(self(g, z))
    }
}

/// Per-row ELBO pieces, each `[N, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct ElboRows {
    pub loss: Var,
    pub kl: Var,
    pub nll: Var,
}

/// Negated free energy per row. `reward` adds the reward likelihood to the
/// reconstruction term.
#[allow(clippy::too_many_arguments)]
pub fn elbo_rows(
    g: &Graph,
    obs: Var,
    prior: &GaussianDiag,
    posterior: &GaussianDiag,
    posterior_sample: Var,
    decoder: &GaussianDiag,
    reward: Option<(&GaussianDiag, Var)>,
    beta: f64,
) -> Result<ElboRows> {
    if g.shape(posterior_sample) != posterior.shape(g) {
        return Err(Error::contract("posterior sample and posterior differ in shape"));
    }
    let mut nll = g.neg(log_prob_rows(g, decoder, obs)?);
    if let Some((dist, r)) = reward {
        nll = g.sub(nll, log_prob_rows(g, dist, r)?);
    }
    let kl = kl_rows(g, posterior, prior)?;
    let loss = g.add(nll, g.scale(kl, beta));
    g.check("elbo_loss")?;
    Ok(ElboRows { loss, kl, nll })
}

/// Batch-mean negated free energy for one time step.
pub fn elbo_loss(
    g: &Graph,
    obs: Var,
    prior: &GaussianDiag,
    posterior: &GaussianDiag,
    posterior_sample: Var,
    decoder: &GaussianDiag,
    beta: f64,
) -> Result<Var> {
    let rows = elbo_rows(g, obs, prior, posterior, posterior_sample, decoder, None, beta)?;
    Ok(g.mean(rows.loss))
}

/// `(|z~ - z^|_1 - KL[R(z~) || R(z^)] - gamma W2(next(z~), next(z^)))^2` per row,
/// where `next(z)` is the prior one step ahead of `z` under the mean policy action.
pub fn retrace_bisim_rows(
    g: &Graph,
    model: &WorldModel,
    policy: &dyn MeanPolicy,
    forward: &LatentState,
    retraced: &LatentState,
    gamma: f64,
) -> Result<Var> {
    same_shape(g, forward.z, retraced.z, "retrace_loss_bisim")?;
    let l1 = g.sum_cols(g.abs(g.sub(forward.z, retraced.z)));
    let reward_kl = kl_rows(g, &model.reward(g, forward.z), &model.reward(g, retraced.z))?;
    let next = |s: &LatentState| -> Result<GaussianDiag> {
        let a = policy.mean_action(g, s.z)?;
        let h = model.deter_step(g, s.h, s.z, a)?;
        Ok(model.prior_dist(g, h))
    };
    let w = w2_rows(g, &next(forward)?, &next(retraced)?)?;
    let inner = g.sub(g.sub(l1, reward_kl), g.scale(w, gamma));
    let out = g.square(inner);
    g.check("retrace_loss_bisim")?;
    Ok(out)
}

pub fn retrace_loss_bisim(
    g: &Graph,
    model: &WorldModel,
    policy: &dyn MeanPolicy,
    forward: &LatentState,
    retraced: &LatentState,
    gamma: f64,
) -> Result<Var> {
    Ok(g.mean(retrace_bisim_rows(g, model, policy, forward, retraced, gamma)?))
}

/// Mean squared latent distance per row.
pub fn retrace_l2_rows(g: &Graph, z: Var, z_ret: Var) -> Result<Var> {
    same_shape(g, z, z_ret, "retrace_loss_l2")?;
    let d = g.shape(z)[1] as f64;
    Ok(g.scale(g.sum_cols(g.square(g.sub(z, z_ret))), 1.0 / d))
}

pub fn retrace_loss_l2(g: &Graph, z: Var, z_ret: Var) -> Result<Var> {
    Ok(g.mean(retrace_l2_rows(g, z, z_ret)?))
}

/// Negative decoder log-likelihood of the original observation under `z_ret`.
pub fn retrace_recon_rows(g: &Graph, model: &WorldModel, obs: Var, z_ret: Var) -> Result<Var> {
    let dist = model.decode(g, z_ret);
    same_shape(g, dist.mean, obs, "retrace_loss_recon")?;
    Ok(g.neg(log_prob_rows(g, &dist, obs)?))
}

pub fn retrace_loss_recon(g: &Graph, model: &WorldModel, obs: Var, z_ret: Var) -> Result<Var> {
    Ok(g.mean(retrace_recon_rows(g, model, obs, z_ret)?))
}

fn same_shape(g: &Graph, a: Var, b: Var, site: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::contract(format!(
            "{site}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Masked objective
/// `(1/NT) sum_n sum_tau [ELBO(O_tau) + lambda M_tau retrace(z~_tau, z^_tau)]`.
///
/// `masks[n]` gates the `T - 1` retraced pairs of trajectory `n`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &Graph,
    model: &WorldModel,
    policy: &dyn MeanPolicy,
    batch: &TrajectoryBatch,
    sweep: &SweepResult,
    retrace: &RetraceResult,
    masks: &[Vec<f64>],
    config: &LossConfig,
) -> Result<(Var, LossReport)> {
    let n = batch.batch_size();
    let t = batch.horizon();
    let steps = retrace.retraced.len();
    if sweep.posteriors.len() != t || steps != t.saturating_sub(1) {
        return Err(Error::contract("sweep and retrace lengths do not match the batch"));
    }
    if masks.len() != n || masks.iter().any(|m| m.len() != steps) {
        return Err(Error::contract(format!(
            "mask must be {n} x {steps}, got {} rows",
            masks.len()
        )));
    }
    if masks.iter().flatten().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::contract("mask entries must be 0 or 1"));
    }

    let mut elbo_parts = Vec::with_capacity(t);
    let mut kl_parts = Vec::with_capacity(t);
    let mut nll_parts = Vec::with_capacity(t);
    for (tau, (prior, post)) in sweep.priors.iter().zip(&sweep.posteriors).enumerate() {
        let obs = g.constant(batch.obs[tau + 1].clone());
        let reward = g.constant(batch.rewards[tau].clone());
        let decoder = model.decode(g, post.z);
        let reward_dist = model.reward(g, post.z);
        let rows = elbo_rows(
            g,
            obs,
            &prior.dist,
            &post.dist,
            post.z,
            &decoder,
            Some((&reward_dist, reward)),
            config.beta,
        )?;
        elbo_parts.push(g.sum(rows.loss));
        kl_parts.push(g.sum(rows.kl));
        nll_parts.push(g.sum(rows.nll));
    }

    let mut retrace_parts = Vec::with_capacity(steps);
    for (tau, ret) in retrace.retraced.iter().enumerate() {
        let fwd = &sweep.posteriors[tau];
        let rows = match config.retrace_variant {
            RetraceVariant::Bisimulation => {
                retrace_bisim_rows(g, model, policy, fwd, ret, config.gamma)?
            }
            RetraceVariant::L2 => retrace_l2_rows(g, fwd.z, ret.z)?,
            RetraceVariant::Reconstruction => {
                let obs = g.constant(batch.obs[tau + 1].clone());
                retrace_recon_rows(g, model, obs, ret.z)?
            }
        };
        let m = Tensor::new(n, 1, masks.iter().map(|m| m[tau]).collect())?;
        retrace_parts.push(g.sum(g.mul(rows, g.constant(m))));
    }

    let norm = 1.0 / (n * t) as f64;
    let sum_all = |parts: &[Var]| -> Var {
        parts
            .iter()
            .copied()
            .reduce(|a, b| g.add(a, b))
            .unwrap_or_else(|| g.scalar(0.0))
    };
    let elbo = g.scale(sum_all(&elbo_parts), norm);
    let retrace_term = g.scale(sum_all(&retrace_parts), norm * config.lambda);
    let total = g.add(elbo, retrace_term);
    g.check("total_loss")?;

    let mask_count = (n * steps) as f64;
    let kept: f64 = masks.iter().flatten().sum();
    let report = LossReport {
        total: g.item(total),
        elbo_term: g.item(elbo),
        kl_term: g.item(sum_all(&kl_parts)) * norm,
        recon_term: g.item(sum_all(&nll_parts)) * norm,
        retrace_term: g.item(retrace_term),
        masked_fraction: if mask_count > 0.0 { 1.0 - kept / mask_count } else { 0.0 },
    };
    if !report.total.is_finite() {
        return Err(Error::numeric("total_loss", format!("{report:?}")));
    }
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{seeded, Dense};
    use crate::worldmodel::{forward_sweep, retrace_sweep, ModelConfig, Part, Role};
    use std::f64::consts::PI;

    fn model(seed: u64) -> WorldModel {
        let cfg = ModelConfig {
            embed_dim: 5,
            hidden: 6,
            deter: 7,
            stoch: 3,
            ..Default::default()
        };
        WorldModel::new(cfg, 4, 2, &mut seeded(seed)).unwrap()
    }

    fn zero_policy(g: &Graph, z: Var) -> Var {
        let n = g.shape(z)[0];
        g.constant(Tensor::zeros(n, 2))
    }

    fn batch(n: usize, t: usize, seed: u64) -> TrajectoryBatch {
        let mut rng = seeded(seed);
        TrajectoryBatch {
            obs: (0..=t).map(|_| Tensor::randn(n, 4, &mut rng)).collect(),
            actions: (0..t).map(|_| Tensor::uniform(n, 2, -1.0, 1.0, &mut rng)).collect(),
            rewards: (0..t).map(|_| Tensor::randn(n, 1, &mut rng)).collect(),
            terminals: vec![vec![false; n]; t],
            flags: vec![vec![false; n]; t],
            offsets: vec![0; n],
            episode_lens: vec![t; n],
        }
    }

    #[test]
    fn elbo_at_perfect_fit_is_gaussian_constant() {
        let g = Graph::new();
        let o = Tensor::row(&[0.3, -1.2, 2.0]);
        let p = GaussianDiag::constant(&g, Tensor::row(&[0.1, 0.2]), Tensor::row(&[0.5, 2.0])).unwrap();
        let dec = GaussianDiag::constant(&g, o.clone(), Tensor::full(1, 3, 1.0)).unwrap();
        let obs = g.constant(o);
        let l = elbo_loss(&g, obs, &p, &p, p.mean, &dec, 1.0).unwrap();
        assert!((g.item(l) - 1.5 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn beta_scales_kl_linearly() {
        let g = Graph::new();
        let prior = GaussianDiag::constant(&g, Tensor::row(&[0.0]), Tensor::row(&[1.0])).unwrap();
        let post = GaussianDiag::constant(&g, Tensor::row(&[1.0]), Tensor::row(&[0.5])).unwrap();
        let dec = GaussianDiag::constant(&g, Tensor::row(&[0.0]), Tensor::row(&[1.0])).unwrap();
        let obs = g.constant(Tensor::row(&[0.7]));
        let at = |b| g.item(elbo_loss(&g, obs, &prior, &post, post.mean, &dec, b).unwrap());
        let (l0, l1, l2) = (at(0.0), at(1.0), at(2.0));
        assert!((l0 - (0.5 * (2.0 * PI).ln() + 0.245)).abs() < 1e-12);
        assert!(((l2 - l0) - 2.0 * (l1 - l0)).abs() < 1e-12);
    }

    #[test]
    fn bisim_identity_is_zero() {
        let m = model(1);
        let g = Graph::new();
        let mut rng = seeded(2);
        let h = g.constant(Tensor::randn(4, 7, &mut rng));
        let z = g.constant(Tensor::randn(4, 3, &mut rng));
        let dist = m.prior_dist(&g, h);
        let s = LatentState { h, z, dist, role: Role::Posterior };
        let l = retrace_loss_bisim(&g, &m, &zero_policy, &s, &s, 0.99).unwrap();
        assert_eq!(g.item(l), 0.0);
    }

    /// Hand-built heads with two units: reward head maps z to (mean, raw std)
    /// through a single linear layer, prior head is linear in h.
    #[test]
    fn bisim_matches_hand_evaluation() {
        let cfg = ModelConfig {
            embed_dim: 2,
            hidden: 2,
            deter: 2,
            stoch: 2,
            ..Default::default()
        };
        let mut m = WorldModel::new(cfg, 2, 1, &mut seeded(0)).unwrap();
        // Reward head: single layer, mean = z0, raw std = 0 -> std = softplus(0) + floor.
        let layer = Dense::new(&mut m.store, "hand_reward", 2, 2, &mut seeded(0));
        m.store.value_mut(layer.weight).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        m.store.value_mut(layer.bias).fill(0.0);
        m.reward_head.layers = vec![layer];
        // Prior head: single layer, mean = h, raw std = 0.
        let prior = Dense::new(&mut m.store, "hand_prior", 2, 4, &mut seeded(0));
        let w = m.store.value_mut(prior.weight);
        w.fill(0.0);
        w.set(0, 0, 1.0);
        w.set(1, 1, 1.0);
        m.store.value_mut(prior.bias).fill(0.0);
        m.prior_head.layers = vec![prior];
        for k in [m.rnn_input.weight, m.rnn_input.bias].into_iter().chain(m.gru.keys()) {
            m.store.value_mut(k).fill(0.0);
        }
        let one_dim_policy = |g: &Graph, z: Var| g.constant(Tensor::zeros(g.shape(z)[0], 1));

        let g = Graph::new();
        let zf = Tensor::row(&[0.5, -1.0]);
        let zr = Tensor::row(&[0.2, 0.3]);
        let hf = Tensor::row(&[0.1, 0.2]);
        let hr = Tensor::row(&[-0.3, 0.4]);
        let mk = |h: &Tensor, z: &Tensor| {
            let h = g.constant(h.clone());
            LatentState { h, z: g.constant(z.clone()), dist: m.prior_dist(&g, h), role: Role::Posterior }
        };
        let (f, r) = (mk(&hf, &zf), mk(&hr, &zr));
        let gamma = 0.9;
        let got = g.item(retrace_loss_bisim(&g, &m, &one_dim_policy, &f, &r, gamma).unwrap());

        // Independent evaluation with plain arithmetic.
        let l1 = (0.5f64 - 0.2).abs() + (-1.0f64 - 0.3).abs();
        let sd = 2f64.ln() + 1e-4;
        let kl = (0.5f64 - 0.2).powi(2) / (2.0 * sd * sd);
        // With zero recurrent weights every GRU gate is 0.5 and the candidate is 0,
        // so the next recurrent state (and the next prior mean) is h / 2.
        let next = |h: &Tensor| -> Vec<f64> { h.data().iter().map(|v| 0.5 * v).collect() };
        let (nf, nr) = (next(&hf), next(&hr));
        let w2: f64 = nf.iter().zip(&nr).map(|(a, b)| (a - b).powi(2)).sum();
        let want = (l1 - kl - gamma * w2).powi(2);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");

        let g0 = g.item(retrace_loss_bisim(&g, &m, &one_dim_policy, &f, &r, 0.0).unwrap());
        assert!((g0 - (l1 - kl).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn l2_and_recon_variants() {
        let m = model(1);
        let g = Graph::new();
        let z = g.constant(Tensor::randn(5, 3, &mut seeded(4)));
        assert_eq!(g.item(retrace_loss_l2(&g, z, z).unwrap()), 0.0);
        let a = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]).unwrap();
        let b = Tensor::zeros(2, 3);
        let l = g.item(retrace_loss_l2(&g, g.constant(a.clone()), g.constant(b.clone())).unwrap());
        assert!((l - (1.0 / 3.0 + 4.0 / 3.0) / 2.0).abs() < 1e-15);
        let swapped = a.select_rows(&[1, 0]);
        let l_sw = g.item(retrace_loss_l2(&g, g.constant(swapped), g.constant(b)).unwrap());
        assert_eq!(l, l_sw);
        assert!(retrace_loss_l2(&g, z, g.constant(Tensor::zeros(5, 2))).is_err());

        let obs = g.value(m.decode(&g, z).mean);
        let r = retrace_loss_recon(&g, &m, g.constant(obs), z).unwrap();
        assert!((g.item(r) - 2.0 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    fn run_total(m: &WorldModel, b: &TrajectoryBatch, masks: &[Vec<f64>], cfg: &LossConfig) -> (Graph, Var, LossReport) {
        let g = Graph::new();
        let mut rng = seeded(7);
        let s = forward_sweep(&g, m, b, &mut rng).unwrap();
        let r = retrace_sweep(&g, m, &s, false, &mut rng).unwrap();
        let (v, rep) = total_loss(&g, m, &zero_policy, b, &s, &r, masks, cfg).unwrap();
        (g, v, rep)
    }

    #[test]
    fn degeneracies() {
        let m = model(3);
        let b = batch(3, 5, 8);
        let ones = vec![vec![1.0; 4]; 3];
        let zeros = vec![vec![0.0; 4]; 3];
        let cfg0 = LossConfig { lambda: 0.0, ..Default::default() };
        let (_, _, rep) = run_total(&m, &b, &ones, &cfg0);
        assert_eq!(rep.retrace_term, 0.0);
        assert!((rep.total - rep.elbo_term).abs() <= 1e-12);
        assert!((rep.elbo_term - (rep.recon_term + rep.kl_term)).abs() < 1e-9);

        let cfg = LossConfig::default();
        let (g, v, rep) = run_total(&m, &b, &zeros, &cfg);
        assert_eq!(rep.retrace_term, 0.0);
        assert_eq!(rep.masked_fraction, 1.0);
        let grads = g.backward(v).unwrap();
        for k in m.keys(Part::Reverse) {
            assert!(grads.get(k).unwrap().data().iter().all(|&x| x == 0.0));
        }
        let (g, v, rep1) = run_total(&m, &b, &ones, &cfg);
        assert!(rep1.retrace_term > 0.0);
        let grads = g.backward(v).unwrap();
        assert!(m.keys(Part::Reverse).iter().any(|k| grads.get(*k).unwrap().sq_norm() > 0.0));
    }

    #[test]
    fn single_step_sum() {
        let m = model(3);
        let b = batch(1, 2, 8);
        let cfg = LossConfig::default();
        let (_, _, rep) = run_total(&m, &b, &[vec![1.0]], &cfg);
        assert!((rep.total - (rep.elbo_term + rep.retrace_term)).abs() < 1e-12);
    }

    #[test]
    fn mask_contract() {
        let m = model(3);
        let b = batch(2, 4, 8);
        let g = Graph::new();
        let mut rng = seeded(7);
        let s = forward_sweep(&g, &m, &b, &mut rng).unwrap();
        let r = retrace_sweep(&g, &m, &s, false, &mut rng).unwrap();
        let cfg = LossConfig::default();
        let bad = vec![vec![1.0; 4]; 2];
        assert!(total_loss(&g, &m, &zero_policy, &b, &s, &r, &bad, &cfg).is_err());
        let half = vec![vec![0.5; 3]; 2];
        assert!(total_loss(&g, &m, &zero_policy, &b, &s, &r, &half, &cfg).is_err());
    }

    #[test]
    fn total_is_monotone_in_lambda() {
        let m = model(5);
        let b = batch(2, 4, 9);
        let ones = vec![vec![1.0; 3]; 2];
        let mut last = f64::NEG_INFINITY;
        for lambda in [0.0, 0.5, 1.0, 2.0] {
            let cfg = LossConfig { lambda, ..Default::default() };
            let (_, _, rep) = run_total(&m, &b, &ones, &cfg);
            assert!(rep.total >= last);
            last = rep.total;
        }
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let m = model(11);
        let b = batch(2, 3, 12);
        let masks = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        for variant in [RetraceVariant::Bisimulation, RetraceVariant::L2, RetraceVariant::Reconstruction] {
            let cfg = LossConfig { retrace_variant: variant, ..Default::default() };
            let (g, v, _) = run_total(&m, &b, &masks, &cfg);
            let grads = g.backward(v).unwrap();
            let mut checked = 0;
            for (i, key) in m.store.keys().enumerate() {
                if i % 3 != 0 {
                    continue;
                }
                let analytic = grads.get(key).map_or(0.0, |t| t.data()[0]);
                let h = 1e-5;
                let mut mp = m.clone();
                mp.store.value_mut(key).data_mut()[0] += h;
                let mut mm = m.clone();
                mm.store.value_mut(key).data_mut()[0] -= h;
                let fp = run_total(&mp, &b, &masks, &cfg).2.total;
                let fm = run_total(&mm, &b, &masks, &cfg).2.total;
                let numeric = (fp - fm) / (2.0 * h);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(err < 1e-3, "{variant:?} {}: {analytic} vs {numeric}", m.store.name(key));
                checked += 1;
            }
            assert!(checked > 5);
        }
    }
}
