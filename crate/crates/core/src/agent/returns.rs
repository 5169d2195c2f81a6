use crate::error::{Error, Result};

/// λ-return targets. `values[t]` is the value of the state reached by
/// transition `t`; the last entry bootstraps the horizon:
/// `G_t = r_t + gamma ((1 - lambda) v_t + lambda G_{t+1})`, `G_{H-1} = r_{H-1} + gamma v_{H-1}`.
pub fn lambda_return(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::contract(format!(
            "lambda_return: {} rewards vs {} values",
            rewards.len(),
            values.len()
        )));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut next: Option<f64> = None;
    for t in (0..rewards.len()).rev() {
        let tail = match next {
            Some(g) => (1.0 - lambda) * values[t] + lambda * g,
            None => values[t],
        };
        out[t] = rewards[t] + gamma * tail;
        next = Some(out[t]);
    }
    Ok(out)
}

/// GAE over `H` rewards and `H + 1` state values (the last is the bootstrap).
pub fn gae_advantages(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::contract(format!(
            "gae_advantages: {} rewards need {} values, got {}",
            rewards.len(),
            rewards.len() + 1,
            values.len()
        )));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        out[t] = acc;
    }
    Ok(out)
}
