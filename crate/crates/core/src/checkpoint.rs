//! Versioned little-endian checkpoint files.
//!
//! Layout: magic, version, training config JSON, model-config hash, epoch,
//! step, then name-keyed parameter blobs and optional Adam moments.

use std::path::Path;

use fan_autograd::{ParamGroup, ParamStore, Tensor};

use crate::config::TrainConfig;
use crate::error::{FanError, Result};
use crate::model::FanModel;
use crate::train::Adam;

pub const MAGIC: &[u8; 8] = b"FANCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
    pub epoch: usize,
    pub step: usize,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, params: ParamStore, optimizer: Option<Adam>, epoch: usize, step: usize) -> Self {
        let config_hash = config.model.hash();
        Self { config, config_hash, params, optimizer, epoch, step }
    }

    pub fn model(&self) -> Result<FanModel> {
        FanModel::with_params(&self.config.model, self.params.clone())
    }

    /// Fails unless the checkpoint was trained with this architecture.
    pub fn expect_config(&self, config: &crate::config::ModelConfig) -> Result<()> {
        let want = config.hash();
        if want != self.config_hash {
            return Err(FanError::Compatibility(format!(
                "checkpoint config hash {} does not match {want}",
                self.config_hash
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.bytes(serde_json::to_string(&self.config).expect("config serializes").as_bytes());
        w.bytes(self.config_hash.as_bytes());
        w.u64(self.epoch as u64);
        w.u64(self.step as u64);
        w.u64(self.params.len() as u64);
        for e in self.params.entries() {
            w.bytes(e.name.as_bytes());
            w.0.push(match e.group {
                ParamGroup::Default => 0,
                ParamGroup::Backbone => 1,
            });
            w.tensor(&e.tensor);
        }
        match &self.optimizer {
            None => w.0.push(0),
            Some(a) => {
                w.0.push(1);
                w.f64(a.beta1);
                w.f64(a.beta2);
                w.f64(a.eps);
                w.u64(a.t);
                for (m, v) in a.m.iter().zip(&a.v) {
                    w.tensor(m);
                    w.tensor(v);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(FanError::Data("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FanError::Compatibility(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let json = r.string()?;
        let config: TrainConfig =
            serde_json::from_str(&json).map_err(|e| FanError::Data(format!("checkpoint config: {e}")))?;
        let config_hash = r.string()?;
        if config_hash != config.model.hash() {
            return Err(FanError::Compatibility("checkpoint config hash does not match its stored config".into()));
        }
        let epoch = r.u64()? as usize;
        let step = r.u64()? as usize;
        let n = r.u64()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let group = match r.take(1)?[0] {
                0 => ParamGroup::Default,
                1 => ParamGroup::Backbone,
                g => return Err(FanError::Data(format!("unknown parameter group {g}"))),
            };
            let t = r.tensor()?;
            params.add(name, t, group)?;
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let (beta1, beta2, eps, t) = (r.f64()?, r.f64()?, r.f64()?, r.u64()?);
                let mut m = Vec::with_capacity(n);
                let mut v = Vec::with_capacity(n);
                for e in params.entries() {
                    let (mt, vt) = (r.tensor()?, r.tensor()?);
                    if mt.shape() != e.tensor.shape() || vt.shape() != e.tensor.shape() {
                        return Err(FanError::Data(format!("optimizer moments of {} have the wrong shape", e.name)));
                    }
                    m.push(mt);
                    v.push(vt);
                }
                Some(Adam { beta1, beta2, eps, t, m, v })
            }
            f => return Err(FanError::Data(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(FanError::Data(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { config, config_hash, params, optimizer, epoch, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| FanError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| FanError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| FanError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            FanError::Data(m) => FanError::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }
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
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| FanError::Data("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| FanError::Data("checkpoint string is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let nd = self.u32()? as usize;
        if nd == 0 || nd > 8 {
            return Err(FanError::Data(format!("implausible tensor rank {nd}")));
        }
        let shape = (0..nd).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos));
        let n = n.ok_or_else(|| FanError::Data("checkpoint is truncated".into()))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::new(shape, data)?)
    }
}
