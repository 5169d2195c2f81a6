use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{run_episode, ActMode, Episode};
use crate::agent::Policy;
use crate::envs::{Env, EnvSpec, Perturbation};
use crate::error::{Error, Result};
use crate::numcore::{seeded, Graph, Tensor};
use crate::worldmodel::{forward_sweep, open_loop_rollout, retrace_sweep, TrajectoryBatch, WorldModel};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single episode.
    pub sd: f64,
    pub returns: Vec<f64>,
}

impl EvalResult {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let sd = if returns.len() > 1 {
            (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd, returns }
    }
}

/// Greedy episodes; episode `i` resets with seed `seed + i`.
pub fn evaluate(
    spec: &EnvSpec,
    model: &WorldModel,
    policy: &Policy,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::contract("evaluate needs at least one episode"));
    }
    let mut env = Env::new(spec.clone())?;
    let mut rng = seeded(seed);
    let returns = (0..episodes as u64)
        .map(|i| Ok(run_episode(&mut env, model, policy, ActMode::Greedy, seed.wrapping_add(i), &mut rng)?.total_reward()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_returns(returns))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// `P(T >= t)`: evidence that the first sample has the larger mean.
    pub p: f64,
}

/// One-sided Welch t-test of `mean(a) > mean(b)`.
pub fn welch_one_sided(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::contract("Welch test needs at least two samples per group"));
    }
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let df = na + nb - 2.0;
        return Ok(match ma.partial_cmp(&mb) {
            Some(std::cmp::Ordering::Equal) => WelchResult { t: 0.0, df, p: 0.5 },
            Some(std::cmp::Ordering::Greater) => WelchResult { t: f64::INFINITY, df, p: 0.0 },
            _ => WelchResult { t: f64::NEG_INFINITY, df, p: 1.0 },
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::numeric("welch", e.to_string()))?;
    Ok(WelchResult { t, df, p: dist.sf(t) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRow {
    pub change_set: String,
    pub mean: f64,
    pub sd: f64,
    pub p_value: Option<f64>,
}

/// Zero-shot evaluation on each perturbed spec. With a comparison agent the
/// p-value tests whether the primary agent's mean return is larger.
pub fn transfer_eval(
    model: &WorldModel,
    policy: &Policy,
    base: &EnvSpec,
    change_sets: &[Perturbation],
    seeds: usize,
    seed: u64,
    comparison: Option<(&WorldModel, &Policy)>,
) -> Result<Vec<TransferRow>> {
    change_sets
        .iter()
        .map(|c| {
            let spec = base.perturb(c)?;
            let primary = evaluate(&spec, model, policy, seeds, seed)?;
            let p_value = match comparison {
                Some((m, p)) => {
                    let other = evaluate(&spec, m, p, seeds, seed)?;
                    Some(welch_one_sided(&primary.returns, &other.returns)?.p)
                }
                None => None,
            };
            Ok(TransferRow {
                change_set: c.label(),
                mean: primary.mean,
                sd: primary.sd,
                p_value,
            })
        })
        .collect()
}

fn batch_from_episodes(episodes: &[Episode], len: usize) -> Result<TrajectoryBatch> {
    let n = episodes.len();
    let col = |f: &dyn Fn(&Episode) -> Vec<f64>| -> Result<Tensor> {
        let data: Vec<f64> = episodes.iter().flat_map(f).collect();
        let cols = data.len() / n;
        Tensor::new(n, cols, data)
    };
    Ok(TrajectoryBatch {
        obs: (0..=len).map(|t| col(&|e| e.obs[t].clone())).collect::<Result<_>>()?,
        actions: (0..len).map(|t| col(&|e| e.actions[t].clone())).collect::<Result<_>>()?,
        rewards: (0..len).map(|t| col(&|e| vec![e.rewards[t]])).collect::<Result<_>>()?,
        terminals: (0..len).map(|t| episodes.iter().map(|e| e.terminals[t]).collect()).collect(),
        flags: (0..len).map(|t| episodes.iter().map(|e| e.flags[t]).collect()).collect(),
        offsets: vec![0; n],
        episode_lens: episodes.iter().map(Episode::len).collect(),
    })
}

/// Random-policy episodes long enough for `len` transitions.
fn held_out_episodes(spec: &EnvSpec, model: &WorldModel, policy: &Policy, count: usize, len: usize, seed: u64) -> Result<Vec<Episode>> {
    let mut env = Env::new(spec.clone())?;
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempt = 0u64;
    while out.len() < count {
        let ep = run_episode(&mut env, model, policy, ActMode::Random, seed.wrapping_add(attempt), &mut rng)?;
        attempt += 1;
        if ep.len() >= len {
            out.push(ep);
        }
        if attempt > 1000 + 100 * count as u64 {
            return Err(Error::NotReady(format!("episodes shorter than {len} steps")));
        }
    }
    Ok(out)
}

/// Per-horizon open-loop observation MSE (horizons `1..=horizon`) over
/// random-policy episodes.
pub fn rollout_error_eval(
    model: &WorldModel,
    policy: &Policy,
    spec: &EnvSpec,
    context: usize,
    horizon: usize,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if horizon == 0 || episodes == 0 {
        return Err(Error::contract("rollout_error_eval needs horizon >= 1 and episodes >= 1"));
    }
    let len = context + horizon;
    let eps = held_out_episodes(spec, model, policy, episodes, len, seed)?;
    let batch = batch_from_episodes(&eps, len)?;
    Ok(open_loop_rollout(model, &batch, context, horizon, &mut seeded(seed))?.mse)
}

/// Mean cosine similarity between `rho(z_{t+1}, z_t)` and `-a_t` over
/// `transitions` held-out random-policy transitions.
pub fn reverse_action_cosine(
    model: &WorldModel,
    policy: &Policy,
    spec: &EnvSpec,
    transitions: usize,
    seed: u64,
) -> Result<f64> {
    let len = spec.agent_steps_per_episode().min(50);
    let count = transitions.div_ceil(len.saturating_sub(1).max(1));
    let eps = held_out_episodes(spec, model, policy, count, len, seed)?;
    let batch = batch_from_episodes(&eps, len)?;
    let g = Graph::inference();
    let sweep = forward_sweep(&g, model, &batch, &mut seeded(seed))?;
    let mut total = 0.0;
    let mut used = 0usize;
    'outer: for i in 0..len - 1 {
        // Pair (z_{tau+1}, z_tau) with tau = i + 1 reverses action a_tau.
        let rev = g.value(model.reverse_action(&g, sweep.posteriors[i + 1].z, sweep.posteriors[i].z)?);
        let act = &batch.actions[i + 1];
        for row in 0..batch.batch_size() {
            let (r, a) = (rev.row_slice(row), act.row_slice(row));
            let dot: f64 = r.iter().zip(a).map(|(x, y)| -x * y).sum();
            let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            total += if nr > 0.0 && na > 0.0 { dot / (nr * na) } else { 0.0 };
            used += 1;
            if used == transitions {
                break 'outer;
            }
        }
    }
    Ok(total / used as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub step: usize,
    pub posterior: Vec<f64>,
    pub retraced: Vec<f64>,
}

/// Posterior and retraced latents along one episode.
pub fn export_latents(model: &WorldModel, episode: &Episode, seed: u64) -> Result<Vec<LatentRow>> {
    let batch = batch_from_episodes(std::slice::from_ref(episode), episode.len())?;
    let g = Graph::inference();
    let mut rng = seeded(seed);
    let sweep = forward_sweep(&g, model, &batch, &mut rng)?;
    let retrace = retrace_sweep(&g, model, &sweep, false, &mut rng)?;
    Ok(retrace
        .retraced
        .iter()
        .enumerate()
        .map(|(i, r)| LatentRow {
            step: i + 1,
            posterior: g.value(sweep.posteriors[i].z).into_data(),
            retraced: g.value(r.z).into_data(),
        })
        .collect())
}
