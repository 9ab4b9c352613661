//! Binary checkpoints: little-endian, length-prefixed strings, f32 data.
//!
//! ```text
//! "USDF" u32:version
//! u32:len config-text
//! u32:T f64:beta_start f64:beta_end
//! u32:len strategy u32:K K x u32:step
//! u64:training-step
//! u32:count, then per tensor: u32:len name u32:rank rank x u32:dim f32 x numel
//! ```

use std::path::Path;

use ctxdiff::model::DenoiserModel;
use ctxdiff::schedule::{StepPlan, Strategy};
use ctxdiff::{Rng, Tensor};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"USDF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub schedule_t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub plan: StepPlan,
    pub step: u64,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(cfg: &RunConfig, plan: &StepPlan, step: u64, model: &DenoiserModel<f32>) -> Self {
        Self {
            config_text: cfg.to_text(),
            schedule_t: cfg.schedule_t,
            beta_start: cfg.beta_start,
            beta_end: cfg.beta_end,
            plan: plan.clone(),
            step,
            params: model.params.names().iter().cloned().zip(model.params.values().iter().cloned()).collect(),
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_text(&self.config_text).map_err(|e| CliError::Checkpoint(format!("stored config: {e}")))
    }

    /// Rebuilds the model described by the stored config and loads every
    /// tensor into it by name.
    pub fn model(&self) -> Result<DenoiserModel<f32>> {
        let cfg = self.config()?;
        let mut model = DenoiserModel::new(cfg.model, &mut Rng::new(0))?;
        if model.params.len() != self.params.len() {
            return Err(CliError::Checkpoint(format!(
                "{} tensors stored, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in &self.params {
            model.params.set(name, t.clone()).map_err(|e| CliError::Checkpoint(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        put_u32(&mut b, VERSION);
        put_str(&mut b, &self.config_text);
        put_u32(&mut b, self.schedule_t as u32);
        b.extend_from_slice(&self.beta_start.to_le_bytes());
        b.extend_from_slice(&self.beta_end.to_le_bytes());
        put_str(&mut b, &self.plan.strategy().to_string());
        put_u32(&mut b, self.plan.k() as u32);
        for &s in self.plan.steps() {
            put_u32(&mut b, s as u32);
        }
        b.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut b, self.params.len() as u32);
        for (name, t) in &self.params {
            put_str(&mut b, name);
            put_u32(&mut b, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut b, d as u32);
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CliError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let config_text = r.string()?;
        let schedule_t = r.u32()? as usize;
        let beta_start = r.f64()?;
        let beta_end = r.f64()?;
        let strategy: Strategy = r.string()?.parse().map_err(|e| CliError::Checkpoint(format!("plan: {e}")))?;
        let k = r.u32()? as usize;
        let steps = (0..k).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let plan = StepPlan::from_steps(steps, strategy, schedule_t).map_err(|e| CliError::Checkpoint(e.to_string()))?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| CliError::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| CliError::Checkpoint("size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| CliError::Checkpoint(format!("{name}: {e}")))?;
            params.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CliError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config_text, schedule_t, beta_start, beta_end, plan, step, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CliError::Checkpoint("invalid UTF-8 string".into()))
    }
}
