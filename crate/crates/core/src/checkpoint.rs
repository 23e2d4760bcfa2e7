//! Binary checkpoint format.
//!
//! Layout (little endian): `PDCK`, u32 version, u32-length manifest JSON,
//! 32-byte SHA-256 of the manifest, parameters in store order (name, rank,
//! dims, f32 data), the switch registry, normalization statistics sorted by
//! canonical switch string, optional optimizer momentum buffers and free-form
//! `key=value` metadata. Encoding is canonical, so save -> load -> save is
//! byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::Architecture;
use crate::error::{Error, Result};
use crate::model::ElasticModel;
use crate::norm::{LayerStats, SwitchStats, SwitchableStats};
use crate::optim::Sgd;
use crate::switch::SwitchSpec;
use crate::tensor::Tensor;
use crate::trainer::{TrainState, TrainerConfig};

pub const MAGIC: &[u8; 4] = b"PDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub arch: Architecture,
    pub wide_width: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ElasticModel<f32>,
    pub momentum: Option<Vec<Tensor<f32>>>,
    pub metadata: BTreeMap<String, String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the weight tensors (names, shapes and values). Identifies a
/// checkpoint without shipping it.
pub fn weights_hash(model: &ElasticModel<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.params().iter() {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u32).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u8(t.rank() as u8);
        for &d in t.shape() {
            self.u32(d);
        }
        self.floats(t.data());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u8()? as usize;
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().product();
        Tensor::new(dims, self.floats(n)?)
    }
}

impl Checkpoint {
    pub fn new(model: ElasticModel<f32>) -> Self {
        Self {
            model,
            momentum: None,
            metadata: BTreeMap::new(),
        }
    }

    /// Snapshot including optimizer state and iteration counters.
    pub fn with_training_state(model: ElasticModel<f32>, config: &TrainerConfig, state: &TrainState) -> Self {
        let mut metadata: BTreeMap<String, String> = config.to_pairs().into_iter().collect();
        metadata.insert("iteration".into(), state.iteration.to_string());
        metadata.insert("epoch".into(), state.epoch.to_string());
        Self {
            model,
            momentum: Some(state.optimizer.momentum_buffers().to_vec()),
            metadata,
        }
    }

    /// Restores the trainer state saved by [`Checkpoint::with_training_state`].
    pub fn train_state(&self, config: &TrainerConfig) -> Result<TrainState> {
        let momentum = self
            .momentum
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let counter = |k: &str| -> Result<usize> {
            self.metadata
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks {k}")))
        };
        Ok(TrainState {
            iteration: counter("iteration")?,
            epoch: counter("epoch")?,
            running_loss: BTreeMap::new(),
            optimizer: Sgd::with_state(config.optimizer, momentum, self.model.params())?,
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            arch: self.model.arch().clone(),
            wide_width: self.model.wide_width(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        let manifest = serde_json::to_vec(&self.manifest()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.bytes(&manifest);
        w.0.extend_from_slice(&Sha256::digest(&manifest));

        let params = self.model.params();
        w.u32(params.len());
        for (name, t) in params.iter() {
            w.bytes(name.as_bytes());
            w.tensor(t);
        }

        w.u32(self.model.registry().len());
        for s in self.model.registry() {
            w.bytes(s.canonical().as_bytes());
        }

        let stats: Vec<_> = self.model.stats().switches().collect();
        w.u32(stats.len());
        for (name, s) in stats {
            w.bytes(name.as_bytes());
            w.u64(s.samples);
            w.u32(s.entries.len());
            for (&(pos, layer), ls) in &s.entries {
                w.u32(pos);
                w.u32(layer);
                w.u32(ls.mean.len());
                w.floats(&ls.mean);
                w.floats(&ls.var);
            }
        }

        match &self.momentum {
            Some(bufs) => {
                w.u8(1);
                w.u32(bufs.len());
                for b in bufs {
                    w.tensor(b);
                }
            }
            None => w.u8(0),
        }

        let meta: String = self.metadata.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        w.bytes(meta.as_bytes());
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let manifest_bytes = r.bytes()?;
        let digest = r.take(32)?;
        if Sha256::digest(manifest_bytes).as_slice() != digest {
            return Err(Error::Checkpoint("manifest hash mismatch".into()));
        }
        let manifest: Manifest =
            serde_json::from_slice(manifest_bytes).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;

        let n = r.u32()?;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            tensors.push((name, r.tensor()?));
        }

        let n = r.u32()?;
        let mut registry = Vec::with_capacity(n);
        for _ in 0..n {
            registry.push(r.string()?.parse::<SwitchSpec>()?);
        }

        let mut stats = SwitchableStats::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let samples = r.u64()?;
            let mut entries = BTreeMap::new();
            for _ in 0..r.u32()? {
                let pos = r.u32()?;
                let layer = r.u32()?;
                let len = r.u32()?;
                let mean = r.floats(len)?;
                let var = r.floats(len)?;
                entries.insert((pos, layer), LayerStats { mean, var });
            }
            stats.insert_switch(name, SwitchStats { entries, samples });
        }

        let momentum = match r.u8()? {
            0 => None,
            1 => {
                let n = r.u32()?;
                Some((0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?)
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };

        let meta = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("invalid metadata".into()))?;
        let metadata = meta
            .lines()
            .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
            .collect();
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }

        let model = ElasticModel::from_parts(manifest.arch, manifest.wide_width, tensors, registry, stats)?;
        Ok(Self {
            model,
            momentum,
            metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
