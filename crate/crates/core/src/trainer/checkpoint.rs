//! Binary checkpoints: magic, version, the experiment as TOML, counters,
//! named parameter blocks (f64 little-endian) and Adam moments.

use std::io::{Read, Write};
use std::path::Path;

use super::{Experiment, Trainer};
use crate::error::{Error, Result};
use crate::numcore::{Adam, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"RTRCKPT\0";
const VERSION: u32 = 1;

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u64(w, s.len() as u64);
    w.extend_from_slice(s.as_bytes());
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor) {
    put_u32(w, t.rows() as u32);
    put_u32(w, t.cols() as u32);
    for v in t.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::contract("checkpoint is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::contract("checkpoint string is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let data = (0..rows * cols).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(rows, cols, data)
    }
}

fn put_store(w: &mut Vec<u8>, store: &ParamStore) {
    put_u32(w, store.len() as u32);
    for (name, value) in store.names().iter().zip(store.values()) {
        put_str(w, name);
        put_tensor(w, value);
    }
}

fn read_store(r: &mut Reader, store: &mut ParamStore) -> Result<()> {
    let n = r.u32()? as usize;
    if n != store.len() {
        return Err(Error::contract(format!("checkpoint has {n} tensors, model has {}", store.len())));
    }
    for _ in 0..n {
        let name = r.string()?;
        let t = r.tensor()?;
        let slot = store
            .by_name_mut(&name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name} in checkpoint")))?;
        if slot.shape() != t.shape() {
            return Err(Error::contract(format!("parameter {name} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        *slot = t;
    }
    Ok(())
}

fn put_adam(w: &mut Vec<u8>, opt: &Adam) {
    w.extend_from_slice(&opt.lr.to_le_bytes());
    put_u64(w, opt.steps());
    let (first, second) = opt.moments();
    put_u32(w, first.len() as u32);
    for t in first.iter().chain(second) {
        put_tensor(w, t);
    }
}

fn read_adam(r: &mut Reader) -> Result<Adam> {
    let lr = r.f64()?;
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let first = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let second = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    Ok(Adam::from_parts(lr, step, first, second))
}

pub fn to_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    let config = toml::to_string(&trainer.exp).map_err(|e| Error::config(e.to_string()))?;
    let mut w = Vec::new();
    w.extend_from_slice(MAGIC);
    put_u32(&mut w, VERSION);
    put_str(&mut w, &config);
    put_u64(&mut w, trainer.global_step);
    put_u64(&mut w, trainer.env_steps);
    put_u64(&mut w, trainer.episodes);
    for store in [&trainer.model.store, &trainer.policy.store, &trainer.value.store] {
        put_store(&mut w, store);
    }
    for opt in [&trainer.model_opt, &trainer.actor_opt, &trainer.critic_opt] {
        put_adam(&mut w, opt);
    }
    Ok(w)
}

/// Rebuild a trainer from checkpoint bytes. The replay buffer is not stored.
pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::contract("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::contract(format!("unsupported checkpoint version {version}")));
    }
    let exp: Experiment = toml::from_str(&r.string()?).map_err(|e| Error::config(e.to_string()))?;
    let mut trainer = Trainer::new(exp)?;
    trainer.global_step = r.u64()?;
    trainer.env_steps = r.u64()?;
    trainer.episodes = r.u64()?;
    read_store(&mut r, &mut trainer.model.store)?;
    read_store(&mut r, &mut trainer.policy.store)?;
    read_store(&mut r, &mut trainer.value.store)?;
    trainer.model_opt = read_adam(&mut r)?;
    trainer.actor_opt = read_adam(&mut r)?;
    trainer.critic_opt = read_adam(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::contract("trailing bytes after checkpoint"));
    }
    Ok(trainer)
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = to_bytes(trainer)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
