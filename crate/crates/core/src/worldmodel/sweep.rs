use rand::Rng;

use super::{LatentState, Role, WorldModel};
use crate::error::{Error, Result};
use crate::numcore::{reparam_sample, Graph, Tensor, Var};

/// Time-major batch of `N` trajectory segments of length `T`.
///
/// `obs` holds `O_0..O_T`; `actions[t]` is taken at `O_t` and `rewards[t]`
/// is the reward of that transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub obs: Vec<Tensor>,
    pub actions: Vec<Tensor>,
    pub rewards: Vec<Tensor>,
    pub terminals: Vec<Vec<bool>>,
    /// Ground-truth irreversibility flags, for diagnostics only.
    pub flags: Vec<Vec<bool>>,
    /// Offset of each segment inside its episode.
    pub offsets: Vec<usize>,
    pub episode_lens: Vec<usize>,
}

impl TrajectoryBatch {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn batch_size(&self) -> usize {
        self.offsets.len()
    }

    pub fn validate(&self, obs_dim: usize, action_dim: usize) -> Result<()> {
        let t = self.horizon();
        let n = self.batch_size();
        if t == 0 || n == 0 {
            return Err(Error::contract("empty trajectory batch"));
        }
        let ok = self.obs.len() == t + 1
            && self.rewards.len() == t
            && self.terminals.len() == t
            && self.flags.len() == t
            && self.episode_lens.len() == n
            && self.obs.iter().all(|o| o.shape() == [n, obs_dim])
            && self.actions.iter().all(|a| a.shape() == [n, action_dim])
            && self.rewards.iter().all(|r| r.shape() == [n, 1])
            && self.terminals.iter().chain(&self.flags).all(|v| v.len() == n);
        if ok {
            Ok(())
        } else {
            Err(Error::contract("trajectory batch shapes are inconsistent"))
        }
    }

    /// Sub-segment covering transitions `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.horizon() {
            return Err(Error::contract(format!(
                "window {start}+{len} exceeds horizon {}",
                self.horizon()
            )));
        }
        Ok(Self {
            obs: self.obs[start..=start + len].to_vec(),
            actions: self.actions[start..start + len].to_vec(),
            rewards: self.rewards[start..start + len].to_vec(),
            terminals: self.terminals[start..start + len].to_vec(),
            flags: self.flags[start..start + len].to_vec(),
            offsets: self.offsets.iter().map(|o| o + start).collect(),
            episode_lens: self.episode_lens.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub initial: LatentState,
    /// Priors for `tau = 1..T`.
    pub priors: Vec<LatentState>,
    /// Posteriors for `tau = 1..T`.
    pub posteriors: Vec<LatentState>,
}

/// Filter the batch with the posterior, starting from `h = 0, z ~ N(0, I)`.
pub fn forward_sweep<R: Rng + ?Sized>(
    g: &Graph,
    model: &WorldModel,
    batch: &TrajectoryBatch,
    rng: &mut R,
) -> Result<SweepResult> {
    batch.validate(model.obs_dim, model.action_dim)?;
    let n = batch.batch_size();
    let d = model.config.stoch;
    let initial = model.initial_state(g, n, rng);
    let mut state = initial;
    let mut priors = Vec::with_capacity(batch.horizon());
    let mut posteriors = Vec::with_capacity(batch.horizon());
    for tau in 1..=batch.horizon() {
        let a = g.constant(batch.actions[tau - 1].clone());
        let o = g.constant(batch.obs[tau].clone());
        let e = model.embed(g, o)?;
        let prior_noise = Tensor::randn(n, d, rng);
        let post_noise = Tensor::randn(n, d, rng);
        let (prior, post) = model.posterior_step(g, &state, a, e, &prior_noise, &post_noise)?;
        priors.push(prior);
        posteriors.push(post);
        state = post;
    }
    Ok(SweepResult {
        initial,
        priors,
        posteriors,
    })
}

#[derive(Debug, Clone)]
pub struct RetraceResult {
    /// Reverse actions for `tau = 1..T-1`, each taking `z_{tau+1}` back to `z_tau`.
    pub actions: Vec<Var>,
    /// Retraced latents for `tau = 1..T-1`.
    pub retraced: Vec<LatentState>,
}

/// Step backwards from every posterior `z_{tau+1}` under the approximate
/// reverse action and sample the retraced latent from the shared prior head.
pub fn retrace_sweep<R: Rng + ?Sized>(
    g: &Graph,
    model: &WorldModel,
    sweep: &SweepResult,
    stop_grad: bool,
    rng: &mut R,
) -> Result<RetraceResult> {
    let post = &sweep.posteriors;
    let steps = post.len().saturating_sub(1);
    let mut actions = Vec::with_capacity(steps);
    let mut retraced = Vec::with_capacity(steps);
    for i in 0..steps {
        let (mut h_next, mut z_next, mut z_prev) = (post[i + 1].h, post[i + 1].z, post[i].z);
        if stop_grad {
            h_next = g.detach(h_next);
            z_next = g.detach(z_next);
            z_prev = g.detach(z_prev);
        }
        let a = model.reverse_action(g, z_next, z_prev)?;
        let h = model.deter_step(g, h_next, z_next, a)?;
        let dist = model.prior_dist(g, h);
        let [n, d] = g.shape(z_next);
        let z = reparam_sample(g, &dist, &Tensor::randn(n, d, rng))?;
        actions.push(a);
        retraced.push(LatentState {
            h,
            z,
            dist,
            role: Role::Retraced,
        });
    }
    g.check("retrace_sweep")?;
    Ok(RetraceResult { actions, retraced })
}
