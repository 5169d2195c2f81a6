//! Diagonal Gaussians on the tape.
//!
//! Row-wise functions (`*_rows`) treat each row of a batch as an independent
//! distribution and return an `n x 1` column; the unsuffixed versions sum
//! that column to a scalar.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower bound added after the softplus positivity map.
pub const STD_FLOOR: f64 = 1e-4;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

/// Mean and standard deviation of a diagonal Gaussian, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct GaussianDiag {
    pub mean: Var,
    pub std: Var,
}

impl GaussianDiag {
    /// `std = softplus(raw) + floor`.
    pub fn from_raw(g: &Graph, mean: Var, raw_std: Var, floor: f64) -> Self {
        let sp = g.softplus(raw_std);
        Self {
            mean,
            std: g.add_scalar(sp, floor),
        }
    }

    /// Split an `n x 2d` head output into mean (first half) and raw stddev.
    pub fn from_head(g: &Graph, out: Var, floor: f64) -> Self {
        let d = g.shape(out)[1] / 2;
        let mean = g.slice_cols(out, 0, d);
        let raw = g.slice_cols(out, d, d);
        Self::from_raw(g, mean, raw, floor)
    }

    /// Constant distribution from explicit parameters.
    pub fn constant(g: &Graph, mean: Tensor, std: Tensor) -> Result<Self> {
        if mean.shape() != std.shape() {
            return Err(Error::contract("mean and stddev shapes differ"));
        }
        if std.data().iter().any(|&s| s <= 0.0) {
            return Err(Error::contract("stddev must be strictly positive"));
        }
        Ok(Self {
            mean: g.constant(mean),
            std: g.constant(std),
        })
    }

    pub fn shape(&self, g: &Graph) -> [usize; 2] {
        g.shape(self.mean)
    }

    pub fn detach(&self, g: &Graph) -> Self {
        Self {
            mean: g.detach(self.mean),
            std: g.detach(self.std),
        }
    }
}

fn check_same(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::contract(format!(
            "{what}: shape {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Per-row `sum_d [-0.5 log 2pi - log s_d - (x_d - m_d)^2 / (2 s_d^2)]`.
pub fn log_prob_rows(g: &Graph, dist: &GaussianDiag, x: Var) -> Result<Var> {
    check_same(g, dist.mean, x, "gaussian_log_prob")?;
    let z = g.div(g.sub(x, dist.mean), dist.std);
    let quad = g.scale(g.square(z), -0.5);
    let t = g.sub(quad, g.log(dist.std));
    let t = g.add_scalar(t, -HALF_LOG_2PI);
    Ok(g.sum_cols(t))
}

pub fn log_prob(g: &Graph, dist: &GaussianDiag, x: Var) -> Result<Var> {
    let rows = log_prob_rows(g, dist, x)?;
    Ok(g.sum(rows))
}

/// Per-row `KL(p || q)` between diagonal Gaussians.
pub fn kl_rows(g: &Graph, p: &GaussianDiag, q: &GaussianDiag) -> Result<Var> {
    check_same(g, p.mean, q.mean, "kl_diag")?;
    check_same(g, p.std, q.std, "kl_diag")?;
    // log(sq/sp) + (sp^2 + (mp - mq)^2) / (2 sq^2) - 1/2
    let log_ratio = g.sub(g.log(q.std), g.log(p.std));
    let num = g.add(g.square(p.std), g.square(g.sub(p.mean, q.mean)));
    let den = g.scale(g.square(q.std), 2.0);
    let t = g.add(log_ratio, g.div(num, den));
    let t = g.add_scalar(t, -0.5);
    Ok(g.sum_cols(t))
}

pub fn kl(g: &Graph, p: &GaussianDiag, q: &GaussianDiag) -> Result<Var> {
    let rows = kl_rows(g, p, q)?;
    Ok(g.sum(rows))
}

/// Per-row `||m_p - m_q||^2 + ||s_p - s_q||^2`: the squared 2-Wasserstein
/// distance between diagonal Gaussians (no square root taken).
pub fn w2_rows(g: &Graph, p: &GaussianDiag, q: &GaussianDiag) -> Result<Var> {
    check_same(g, p.mean, q.mean, "w2_diag")?;
    check_same(g, p.std, q.std, "w2_diag")?;
    let dm = g.square(g.sub(p.mean, q.mean));
    let ds = g.square(g.sub(p.std, q.std));
    Ok(g.sum_cols(g.add(dm, ds)))
}

pub fn w2(g: &Graph, p: &GaussianDiag, q: &GaussianDiag) -> Result<Var> {
    let rows = w2_rows(g, p, q)?;
    Ok(g.sum(rows))
}

/// Pathwise sample `mean + std * noise`.
pub fn reparam_sample(g: &Graph, dist: &GaussianDiag, noise: &Tensor) -> Result<Var> {
    if g.shape(dist.mean) != noise.shape() {
        return Err(Error::contract(format!(
            "reparam_sample: noise shape {:?} vs {:?}",
            noise.shape(),
            g.shape(dist.mean)
        )));
    }
    let n = g.constant(noise.clone());
    Ok(g.add(dist.mean, g.mul(dist.std, n)))
}
