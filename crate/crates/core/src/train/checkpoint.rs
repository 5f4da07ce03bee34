//! Versioned binary checkpoints: tagged sections after a fixed header.
//!
//! Layout: `ACKP`, u32 version, then the sections `CONF TENS OPTM SCHD NORM
//! REPT` in that order, each a 4-byte tag, a u64 payload length and the
//! payload. All numbers are little-endian.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::datapipe::{FeatureStats, Normalizer};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::metrics::CccReport;
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

use super::optim::{Adam, AdamConfig, Moments};
use super::scheduler::{Scheduler, SchedulerConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACKP";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const SECTIONS: [&[u8; 4]; 6] = [b"CONF", b"TENS", b"OPTM", b"SCHD", b"NORM", b"REPT"];

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: Option<Group>,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// The run configuration in its `key = value` form.
    pub config_text: String,
    pub fold: usize,
    pub seed: u64,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: Adam,
    pub scheduler: Scheduler,
    pub normalizer: Normalizer,
    pub best: Option<CccReport>,
}

impl Checkpoint {
    pub fn tensors_from(store: &ParamStore<f32>) -> Vec<NamedTensor> {
        store
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect()
    }

    /// Copies tensor values into a store with exactly the same parameters.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model has {} parameters",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            let id = store
                .find(&t.name)
                .ok_or_else(|| Error::Data(format!("model has no parameter `{}`", t.name)))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape.as_slice() || p.group != t.group {
                return Err(Error::Data(format!(
                    "parameter `{}`: checkpoint shape {:?} group {:?}, model {:?} group {:?}",
                    t.name,
                    t.shape,
                    t.group,
                    p.value.shape(),
                    p.group
                )));
            }
            p.value = Tensor::new(t.shape.clone(), t.data.clone())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Writer::default();
        out.bytes(CHECKPOINT_MAGIC);
        out.u32(CHECKPOINT_VERSION);
        let bodies = [
            self.config_text.as_bytes().to_vec(),
            encode_tensors(&self.tensors),
            encode_optimizer(&self.optimizer),
            encode_scheduler(&self.scheduler),
            encode_normalizer(&self.normalizer),
            encode_report(self),
        ];
        for (tag, body) in SECTIONS.iter().zip(bodies) {
            out.bytes(*tag);
            out.u64(body.len() as u64);
            out.bytes(&body);
        }
        out.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("checkpoint", bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut bodies = Vec::with_capacity(SECTIONS.len());
        for tag in SECTIONS {
            let name = String::from_utf8_lossy(tag);
            if r.remaining() == 0 {
                return Err(r.error(format!("missing section {name}")));
            }
            let got = r.take(4.min(r.remaining()), &format!("section {name} tag"))?;
            if got != tag {
                return Err(Error::Decode {
                    what: "checkpoint",
                    offset: r.offset() - got.len(),
                    msg: format!("expected section {name}, found {:?}", String::from_utf8_lossy(got)),
                });
            }
            let len = r.len(&format!("section {name} length"))?;
            if r.remaining() < len {
                return Err(r.error(format!(
                    "section {name} truncated: declares {len} bytes, {} present",
                    r.remaining()
                )));
            }
            let start = r.offset();
            bodies.push((name.into_owned(), r.take(len, "section")?, start));
        }
        r.finish()?;
        let section = |i: usize| Reader::with_base("checkpoint", bodies[i].1, bodies[i].2);
        let config_text = String::from_utf8(bodies[0].1.to_vec()).map_err(|_| Error::Decode {
            what: "checkpoint",
            offset: bodies[0].2,
            msg: "section CONF is not valid UTF-8".into(),
        })?;
        let tensors = decode_tensors(section(1))?;
        let optimizer = decode_optimizer(section(2))?;
        let scheduler = decode_scheduler(section(3))?;
        let normalizer = decode_normalizer(section(4))?;
        let (fold, seed, best) = decode_report(section(5))?;
        Ok(Checkpoint {
            config_text,
            fold,
            seed,
            tensors,
            optimizer,
            scheduler,
            normalizer,
            best,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn flag(r: &mut Reader, field: &str) -> Result<bool> {
    match r.u8(field)? {
        0 => Ok(false),
        1 => Ok(true),
        b => Err(r.error(format!("{field} flag byte {b} is not 0 or 1"))),
    }
}

fn encode_tensors(ts: &[NamedTensor]) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(ts.len() as u32);
    for t in ts {
        w.string(&t.name);
        w.u8(u8::from(t.group.is_some()));
        w.u8(t.group.unwrap_or(0));
        w.u32(t.shape.len() as u32);
        for &d in &t.shape {
            w.u64(d as u64);
        }
        w.f32s(&t.data);
    }
    w.buf
}

fn decode_tensors(mut r: Reader) -> Result<Vec<NamedTensor>> {
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let has_group = flag(&mut r, "group")?;
        let g = r.u8("group")?;
        let group = has_group.then_some(g);
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(r.error(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.len("dimension")?;
            numel = numel
                .checked_mul(d)
                .filter(|_| d > 0)
                .ok_or_else(|| r.error(format!("tensor `{name}` has a zero or overflowing shape")))?;
            shape.push(d);
        }
        let data = r.f32s(numel, &format!("tensor `{name}` data"))?;
        out.push(NamedTensor {
            name,
            group,
            shape,
            data,
        });
    }
    r.finish()?;
    Ok(out)
}

fn encode_optimizer(a: &Adam) -> Vec<u8> {
    let mut w = Writer::default();
    let c = a.config;
    for v in [c.beta1, c.beta2, c.eps, c.weight_decay] {
        w.f64(v);
    }
    w.u32(a.state.len() as u32);
    for (name, m) in &a.state {
        w.string(name);
        w.u64(m.step);
        w.u64(m.m.len() as u64);
        w.f32s(&m.m);
        w.f32s(&m.v);
    }
    w.buf
}

fn decode_optimizer(mut r: Reader) -> Result<Adam> {
    let config = AdamConfig {
        beta1: r.f64("beta1")?,
        beta2: r.f64("beta2")?,
        eps: r.f64("eps")?,
        weight_decay: r.f64("weight_decay")?,
    };
    let mut adam = Adam::new(config);
    let count = r.u32("moment count")?;
    for _ in 0..count {
        let name = r.string("moment name")?;
        let step = r.u64("step")?;
        let n = r.len("moment length")?;
        let m = r.f32s(n, "first moment")?;
        let v = r.f32s(n, "second moment")?;
        adam.state.insert(name, Moments { step, m, v });
    }
    r.finish()?;
    Ok(adam)
}

fn encode_scheduler(s: &Scheduler) -> Vec<u8> {
    let mut w = Writer::default();
    let c = s.config;
    w.f64(c.lr);
    w.f64(c.min_lr);
    w.u32(c.patience);
    w.f64(c.factor);
    w.u32(c.warmup_epochs);
    w.u32(c.early_stop);
    w.u32(c.max_epoch);
    w.u8(c.groups);
    w.u32(s.epoch);
    w.u32(s.warmup_remaining);
    w.f64(s.lr);
    w.u8(s.current_group);
    w.f64(s.best);
    w.u8(u8::from(s.best_epoch.is_some()));
    w.u32(s.best_epoch.unwrap_or(0));
    w.u32(s.counter);
    w.u32(s.early_stop_counter);
    w.u8(u8::from(s.exhausted));
    w.u8(u8::from(s.stopped));
    w.buf
}

fn decode_scheduler(mut r: Reader) -> Result<Scheduler> {
    let config = SchedulerConfig {
        lr: r.f64("lr")?,
        min_lr: r.f64("min_lr")?,
        patience: r.u32("patience")?,
        factor: r.f64("factor")?,
        warmup_epochs: r.u32("warmup_epochs")?,
        early_stop: r.u32("early_stop")?,
        max_epoch: r.u32("max_epoch")?,
        groups: r.u8("groups")?,
    };
    config.validate().map_err(|e| r.error(e.to_string()))?;
    let epoch = r.u32("epoch")?;
    let warmup_remaining = r.u32("warmup_remaining")?;
    let lr = r.f64("current lr")?;
    let current_group = r.u8("current_group")?;
    if current_group == 0 || current_group > config.groups {
        return Err(r.error(format!("current group {current_group} out of range")));
    }
    let best = r.f64("best")?;
    let has_best = flag(&mut r, "best epoch")?;
    let be = r.u32("best epoch")?;
    let s = Scheduler {
        config,
        epoch,
        warmup_remaining,
        lr,
        current_group,
        best,
        best_epoch: has_best.then_some(be),
        counter: r.u32("counter")?,
        early_stop_counter: r.u32("early_stop_counter")?,
        exhausted: flag(&mut r, "exhausted")?,
        stopped: flag(&mut r, "stopped")?,
    };
    r.finish()?;
    Ok(s)
}

fn encode_stats(w: &mut Writer, s: &FeatureStats) {
    w.u64(s.mean.len() as u64);
    for v in s.mean.iter().chain(&s.std) {
        w.f64(*v);
    }
}

fn decode_stats(r: &mut Reader, field: &str) -> Result<FeatureStats> {
    let dim = r.len(field)?;
    if dim == 0 || dim.checked_mul(16).map_or(true, |b| b > r.remaining()) {
        return Err(r.error(format!("{field} dimension {dim} does not fit the section")));
    }
    let mut read = |n| (0..n).map(|_| r.f64(field)).collect::<Result<Vec<_>>>();
    let mean = read(dim)?;
    let std = read(dim)?;
    Ok(FeatureStats { mean, std })
}

fn encode_normalizer(n: &Normalizer) -> Vec<u8> {
    let mut w = Writer::default();
    encode_stats(&mut w, &n.logmel);
    encode_stats(&mut w, &n.linguistic);
    w.buf
}

fn decode_normalizer(mut r: Reader) -> Result<Normalizer> {
    let logmel = decode_stats(&mut r, "logmel statistics")?;
    let linguistic = decode_stats(&mut r, "linguistic statistics")?;
    r.finish()?;
    Ok(Normalizer { logmel, linguistic })
}

fn encode_report(c: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(c.fold as u64);
    w.u64(c.seed);
    w.u8(u8::from(c.best.is_some()));
    let b = c.best.unwrap_or(CccReport::new(0.0, 0.0));
    w.f64(b.ccc_valence);
    w.f64(b.ccc_arousal);
    w.buf
}

fn decode_report(mut r: Reader) -> Result<(usize, u64, Option<CccReport>)> {
    let fold = r.len("fold")?;
    let seed = r.u64("seed")?;
    let has = flag(&mut r, "best report")?;
    let v = r.f64("valence")?;
    let a = r.f64("arousal")?;
    r.finish()?;
    Ok((fold, seed, has.then(|| CccReport::new(v, a))))
}
