//! Versioned little-endian checkpoint container.
//!
//! Layout: magic, version, config hash, training counters, RNG state, then
//! named f32 blobs for parameters and both Adam moments, then the loss
//! history. Every blob is `name len (u32), name, rank (u32), dims (u64 each),
//! payload (f32)`.

use std::fs;
use std::path::Path;

use super::PlateauState;
use crate::error::{Error, Result};
use crate::numerics::{AdamState, ParameterStore, Tensor};

pub const MAGIC: &[u8; 8] = b"LVNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    pub plateau: PlateauState,
    pub rng: RngState,
    pub params: ParameterStore<f32>,
    pub adam: AdamState<f32>,
    pub history: Vec<EpochLog>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn blob(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.bytes(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        // every counted item takes at least one byte
        if n as usize > self.buf.len() {
            return Err(Error::format(self.path, format!("implausible count {n}")));
        }
        Ok(n as usize)
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(self.path, "name is not UTF-8"))
    }
    fn blob(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n.saturating_mul(4) <= self.buf.len() - self.pos);
        let n = n.ok_or_else(|| Error::format(self.path, format!("blob {name} is larger than the file")))?;
        let data = self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::format(self.path, format!("blob {name}: {e}")))?;
        Ok((name, t))
    }
    fn blobs(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let n = self.len()?;
        (0..n).map(|_| self.blob()).collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.bytes(self.config_hash.as_bytes());
        w.u64(self.epoch as u64);
        let p = &self.plateau;
        w.f64(p.lr);
        w.f64(p.best);
        w.u64(p.bad_epochs as u64);
        w.u64(p.floor_epochs as u64);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.params.len() as u64);
        for (k, t) in self.params.iter() {
            w.blob(k, t.shape(), t.data());
        }
        w.u64(self.adam.t);
        // moments are stored flat, as rank-1 blobs
        for m in [&self.adam.m, &self.adam.v] {
            w.u64(m.len() as u64);
            for (k, v) in m {
                w.blob(k, &[v.len()], v);
            }
        }
        w.u64(self.history.len() as u64);
        for h in &self.history {
            w.u64(h.epoch as u64);
            w.f64(h.mean_loss);
            w.f64(h.lr);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.string()?;
        let epoch = r.u64()? as usize;
        let plateau = PlateauState {
            lr: r.f64()?,
            best: r.f64()?,
            bad_epochs: r.u64()? as usize,
            floor_epochs: r.u64()? as usize,
        };
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array()?),
        };
        let mut params = ParameterStore::new();
        for (name, t) in r.blobs()? {
            params
                .insert(name.clone(), t)
                .map_err(|_| Error::format(path, format!("duplicate parameter {name}")))?;
        }
        let mut adam = AdamState::new();
        adam.t = r.u64()?;
        for target in [&mut adam.m, &mut adam.v] {
            for (name, t) in r.blobs()? {
                target.insert(name, t.into_data());
            }
        }
        let n = r.len()?;
        let history = (0..n)
            .map(|_| {
                Ok(EpochLog {
                    epoch: r.u64()? as usize,
                    mean_loss: r.f64()?,
                    lr: r.f64()?,
                })
            })
            .collect::<Result<_>>()?;
        if r.pos != buf.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            config_hash,
            epoch,
            plateau,
            rng,
            params,
            adam,
            history,
        })
    }

    /// Writes atomically: a temporary file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}
