use rand::Rng;

use super::{LatentState, Role, TrajectoryBatch, WorldModel};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutPrediction {
    /// Decoded means for `tau = context+1 ..= context+horizon`, each `[N, obs_dim]`.
    pub predicted: Vec<Tensor>,
    /// Mean squared error against the recorded observations, per horizon step.
    pub mse: Vec<f64>,
}

/// Filter `context` observations with the posterior, then predict `horizon`
/// further observations open-loop from the prior under the recorded actions.
/// Latents follow distribution means, so the only randomness is the initial `z`.
pub fn open_loop_rollout<R: Rng + ?Sized>(
    model: &WorldModel,
    batch: &TrajectoryBatch,
    context: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<RolloutPrediction> {
    batch.validate(model.obs_dim, model.action_dim)?;
    if context == 0 || horizon == 0 || context + horizon > batch.horizon() {
        return Err(Error::contract(format!(
            "rollout needs 0 < context ({context}) and context + horizon ({horizon}) <= {}",
            batch.horizon()
        )));
    }
    let g = Graph::inference();
    let mut state = model.initial_state(&g, batch.batch_size(), rng);
    for tau in 1..=context {
        let a = g.constant(batch.actions[tau - 1].clone());
        let e = model.embed(&g, g.constant(batch.obs[tau].clone()))?;
        let h = model.deter_step(&g, state.h, state.z, a)?;
        let dist = model.posterior_dist(&g, h, e);
        state = LatentState {
            h,
            z: dist.mean,
            dist,
            role: Role::Posterior,
        };
    }
    let mut predicted = Vec::with_capacity(horizon);
    let mut mse = Vec::with_capacity(horizon);
    for tau in context + 1..=context + horizon {
        let a = g.constant(batch.actions[tau - 1].clone());
        let h = model.deter_step(&g, state.h, state.z, a)?;
        let dist = model.prior_dist(&g, h);
        state = LatentState {
            h,
            z: dist.mean,
            dist,
            role: Role::Prior,
        };
        let pred = g.value(model.decode(&g, state.z).mean);
        let truth = &batch.obs[tau];
        let err = pred
            .data()
            .iter()
            .zip(truth.data())
            .map(|(p, o)| (p - o).powi(2))
            .sum::<f64>()
            / pred.len() as f64;
        if !err.is_finite() {
            return Err(Error::numeric("open_loop_rollout", "non-finite prediction"));
        }
        predicted.push(pred);
        mse.push(err);
    }
    Ok(RolloutPrediction { predicted, mse })
}
