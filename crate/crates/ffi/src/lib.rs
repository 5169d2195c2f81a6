//! C ABI over `retrace-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! and released by the matching `*_free`. Every fallible call returns a
//! [`RetraceStatus`]; on failure [`retrace_last_error`] copies a message
//! describing the most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use retrace_core::cli::RunConfig;
use retrace_core::envs::{Env, EnvSpec};
use retrace_core::numcore::{kl_rows, w2_rows, GaussianDiag, Graph, Tensor};
use retrace_core::trainer::{checkpoint, welch_one_sided, Trainer};
use retrace_core::truncation::{adaptive_trace, MaskReading, TruncationConfig, TruncationMode};
use retrace_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetraceStatus {
    Ok = 0,
    NullPointer = 1,
    Contract = 2,
    Numeric = 3,
    NotReady = 4,
    Config = 5,
    Io = 6,
    Panic = 7,
}

/// Opaque environment handle.
pub struct RetraceEnv(Env);

/// Opaque trainer handle.
pub struct RetraceTrainer(Trainer);

/// Outcome of one environment step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RetraceStep {
    pub reward: f64,
    pub terminal: bool,
    pub irreversible: bool,
}

/// Loss components of one training step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RetraceStepReport {
    pub total: f64,
    pub elbo: f64,
    pub kl: f64,
    pub recon: f64,
    pub retrace: f64,
    pub masked_fraction: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> RetraceStatus {
    match err {
        Error::Contract(_) => RetraceStatus::Contract,
        Error::Numeric { .. } => RetraceStatus::Numeric,
        Error::NotReady(_) => RetraceStatus::NotReady,
        Error::Config { .. } => RetraceStatus::Config,
        Error::Io(_) | Error::Csv(_) => RetraceStatus::Io,
    }
}

struct Fail(RetraceStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(RetraceStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RetraceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RetraceStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RetraceStatus::Panic
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Fail(RetraceStatus::Contract, format!("{what} is not UTF-8")))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or_else(|| null(what))
}

fn copy_into(dst: &mut [f64], src: &[f64]) -> Result<(), Fail> {
    if dst.len() != src.len() {
        return Err(Fail(
            RetraceStatus::Contract,
            format!("buffer holds {} values, need {}", dst.len(), src.len()),
        ));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Copy the last error message (NUL-terminated, truncated to `len`) into
/// `buf`. Returns the full message length in bytes, excluding the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn retrace_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Create an environment from an `[env]`-style TOML table (empty for the
/// PointMaze defaults).
///
/// # Safety
/// `spec_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn retrace_env_new(spec_toml: *const c_char, out_env: *mut *mut RetraceEnv) -> RetraceStatus {
    guard(|| {
        let spec: EnvSpec = toml::from_str(text(spec_toml, "spec_toml")?)
            .map_err(|e| Fail(RetraceStatus::Config, e.to_string()))?;
        let slot = out(out_env, "out_env")?;
        *slot = Box::into_raw(Box::new(RetraceEnv(Env::new(spec)?)));
        Ok(())
    })
}

/// # Safety
/// `env` must be null or a handle from [`retrace_env_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn retrace_env_free(env: *mut RetraceEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Observation dimension, or 0 for a null handle.
///
/// # Safety
/// `env` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn retrace_env_obs_dim(env: *const RetraceEnv) -> usize {
    env.as_ref().map_or(0, |e| e.0.spec().obs_dim())
}

/// Action dimension, or 0 for a null handle.
///
/// # Safety
/// `env` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn retrace_env_action_dim(env: *const RetraceEnv) -> usize {
    env.as_ref().map_or(0, |e| e.0.spec().action_dim())
}

/// Reset and write the first observation (`obs_len` must equal the
/// observation dimension).
///
/// # Safety
/// `env` must be a live handle; `obs` valid for `obs_len` values.
#[no_mangle]
pub unsafe extern "C" fn retrace_env_reset(env: *mut RetraceEnv, seed: u64, obs: *mut f64, obs_len: usize) -> RetraceStatus {
    guard(|| {
        let env = out(env, "env")?;
        let first = env.0.reset(seed);
        copy_into(slice_mut(obs, obs_len, "obs")?, &first.observation)
    })
}

/// Apply one action with action repeat; rewards are summed over repeats.
///
/// # Safety
/// `env` must be a live handle; `action` valid for `action_len` values,
/// `obs` for `obs_len` values; `step` writable.
#[no_mangle]
pub unsafe extern "C" fn retrace_env_step(
    env: *mut RetraceEnv,
    action: *const f64,
    action_len: usize,
    obs: *mut f64,
    obs_len: usize,
    step: *mut RetraceStep,
) -> RetraceStatus {
    guard(|| {
        let env = out(env, "env")?;
        let r = env.0.step_repeat(slice(action, action_len, "action")?)?;
        copy_into(slice_mut(obs, obs_len, "obs")?, &r.observation)?;
        *out(step, "step")? = RetraceStep {
            reward: r.reward,
            terminal: r.terminal,
            irreversible: r.irreversible_flag,
        };
        Ok(())
    })
}

/// Build a trainer from run-config TOML (the same format the CLI reads).
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out_trainer` writable.
#[no_mangle]
pub unsafe extern "C" fn retrace_trainer_new(config_toml: *const c_char, out_trainer: *mut *mut RetraceTrainer) -> RetraceStatus {
    guard(|| {
        let cfg = RunConfig::from_toml_str(text(config_toml, "config_toml")?)?;
        let slot = out(out_trainer, "out_trainer")?;
        *slot = Box::into_raw(Box::new(RetraceTrainer(Trainer::new(cfg.experiment())?)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out_trainer` writable.
#[no_mangle]
pub unsafe extern "C" fn retrace_trainer_load(path: *const c_char, out_trainer: *mut *mut RetraceTrainer) -> RetraceStatus {
    guard(|| {
        let t = checkpoint::load(Path::new(text(path, "path")?))?;
        *out(out_trainer, "out_trainer")? = Box::into_raw(Box::new(RetraceTrainer(t)));
        Ok(())
    })
}

/// # Safety
/// `trainer` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn retrace_trainer_save(trainer: *const RetraceTrainer, path: *const c_char) -> RetraceStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or_else(|| null("trainer"))?;
        checkpoint::save(&t.0, Path::new(text(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `trainer` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn retrace_trainer_free(trainer: *mut RetraceTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Collect random-policy episodes until a batch can be sampled.
///
/// # Safety
/// `trainer` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn retrace_trainer_warmup(trainer: *mut RetraceTrainer) -> RetraceStatus {
    guard(|| Ok(out(trainer, "trainer")?.0.warmup()?))
}

/// One model update plus one actor-critic update.
///
/// # Safety
/// `trainer` must be a live handle; `report` null or writable.
#[no_mangle]
pub unsafe extern "C" fn retrace_trainer_step(trainer: *mut RetraceTrainer, report: *mut RetraceStepReport) -> RetraceStatus {
    guard(|| {
        let r = out(trainer, "trainer")?.0.train_step()?;
        if let Some(slot) = report.as_mut() {
            *slot = RetraceStepReport {
                total: r.loss.total,
                elbo: r.loss.elbo_term,
                kl: r.loss.kl_term,
                recon: r.loss.recon_term,
                retrace: r.loss.retrace_term,
                masked_fraction: r.loss.masked_fraction,
                actor_loss: r.agent.actor,
                critic_loss: r.agent.critic,
            };
        }
        Ok(())
    })
}

/// Number of completed train steps, or 0 for a null handle.
///
/// # Safety
/// `trainer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn retrace_trainer_global_step(trainer: *const RetraceTrainer) -> u64 {
    trainer.as_ref().map_or(0, |t| t.0.global_step)
}

/// Greedy evaluation; `sd` is the sample standard deviation.
///
/// # Safety
/// `trainer` must be a live handle; `mean` and `sd` writable.
#[no_mangle]
pub unsafe extern "C" fn retrace_trainer_evaluate(
    trainer: *const RetraceTrainer,
    episodes: usize,
    seed: u64,
    mean: *mut f64,
    sd: *mut f64,
) -> RetraceStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or_else(|| null("trainer"))?;
        let r = retrace_core::trainer::evaluate(&t.0.exp.env, &t.0.model, &t.0.policy, episodes, seed)?;
        *out(mean, "mean")? = r.mean;
        *out(sd, "sd")? = r.sd;
        Ok(())
    })
}

unsafe fn gaussian_pair(
    mu_p: *const f64,
    sd_p: *const f64,
    mu_q: *const f64,
    sd_q: *const f64,
    dim: usize,
    f: fn(&Graph, &GaussianDiag, &GaussianDiag) -> retrace_core::Result<retrace_core::numcore::Var>,
) -> Result<f64, Fail> {
    if dim == 0 {
        return Err(Fail(RetraceStatus::Contract, "dim must be >= 1".into()));
    }
    let g = Graph::inference();
    let row = |p, what| -> Result<Tensor, Fail> { Ok(Tensor::row(slice(p, dim, what)?)) };
    let p = GaussianDiag::constant(&g, row(mu_p, "mu_p")?, row(sd_p, "sd_p")?)?;
    let q = GaussianDiag::constant(&g, row(mu_q, "mu_q")?, row(sd_q, "sd_q")?)?;
    Ok(g.item(f(&g, &p, &q)?))
}

/// Squared 2-Wasserstein distance between two diagonal Gaussians.
///
/// # Safety
/// All four arrays must hold `dim` values; `result` writable.
#[no_mangle]
pub unsafe extern "C" fn retrace_w2_diag(
    mu_p: *const f64,
    sd_p: *const f64,
    mu_q: *const f64,
    sd_q: *const f64,
    dim: usize,
    result: *mut f64,
) -> RetraceStatus {
    guard(|| {
        *out(result, "result")? = gaussian_pair(mu_p, sd_p, mu_q, sd_q, dim, w2_rows)?;
        Ok(())
    })
}

/// `KL(p || q)` between two diagonal Gaussians.
///
/// # Safety
/// All four arrays must hold `dim` values; `result` writable.
#[no_mangle]
pub unsafe extern "C" fn retrace_kl_diag(
    mu_p: *const f64,
    sd_p: *const f64,
    mu_q: *const f64,
    sd_q: *const f64,
    dim: usize,
    result: *mut f64,
) -> RetraceStatus {
    guard(|| {
        *out(result, "result")? = gaussian_pair(mu_p, sd_p, mu_q, sd_q, dim, kl_rows)?;
        Ok(())
    })
}

/// Adaptive truncation mask for one Q-value sequence, written to `mask`
/// (same length as `q`).
///
/// # Safety
/// `q` and `mask` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn retrace_truncation_mask(
    q: *const f64,
    len: usize,
    window: usize,
    eta: f64,
    tau_back: usize,
    disjunctive: bool,
    mask: *mut f64,
) -> RetraceStatus {
    guard(|| {
        let cfg = TruncationConfig {
            eta,
            window,
            tau_back,
            warmup: 0,
            mode: TruncationMode::Adaptive,
            reading: if disjunctive { MaskReading::Disjunctive } else { MaskReading::Conjunctive },
            ..Default::default()
        };
        cfg.validate(usize::MAX)?;
        let trace = adaptive_trace(slice(q, len, "q")?, &cfg)?;
        copy_into(slice_mut(mask, len, "mask")?, &trace.mask)
    })
}

/// One-sided Welch t-test of `mean(a) > mean(b)`.
///
/// # Safety
/// `a` holds `na` values, `b` holds `nb`; `t`, `df`, `p` writable.
#[no_mangle]
pub unsafe extern "C" fn retrace_welch_one_sided(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    t: *mut f64,
    df: *mut f64,
    p: *mut f64,
) -> RetraceStatus {
    guard(|| {
        let w = welch_one_sided(slice(a, na, "a")?, slice(b, nb, "b")?)?;
        *out(t, "t")? = w.t;
        *out(df, "df")? = w.df;
        *out(p, "p")? = w.p;
        Ok(())
    })
}
