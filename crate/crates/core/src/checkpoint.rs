//! The `BSFK` checkpoint container: a JSON header with the run
//! configuration, then named tensors.
//!
//! Layout (little endian): magic `BSFK`, `u16` version, `u64` header length,
//! header JSON, `u32` entry count, then per entry a `u16` name length, the
//! UTF-8 name and a `BSFT` tensor record.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, CKLER_PREFIX};
use crate::optim::Adam;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BSFK";
const VERSION: u16 = 1;

const PARAM: &str = "param.";
const BUFFER: &str = "buffer.";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    step: usize,
    adam_t: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Training steps completed.
    pub step: usize,
    pub entries: Vec<(String, Tensor)>,
    pub adam_t: Option<u64>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, model: &Model, adam: Option<&Adam>, step: usize) -> Self {
        let s = &model.store;
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        for (n, v) in s.names().iter().zip(s.values()) {
            entries.push((format!("{PARAM}{n}"), v.clone()));
        }
        for (n, v) in s.buffer_names().iter().zip(s.buffers()) {
            entries.push((format!("{BUFFER}{n}"), v.clone()));
        }
        if let Some(a) = adam {
            for (n, m) in s.names().iter().zip(&a.m) {
                entries.push((format!("{ADAM_M}{n}"), m.clone()));
            }
            for (n, v) in s.names().iter().zip(&a.v) {
                entries.push((format!("{ADAM_V}{n}"), v.clone()));
            }
        }
        Self {
            config: config.clone(),
            step,
            entries,
            adam_t: adam.map(|a| a.t),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            step: self.step,
            adam_t: self.adam_t,
        })?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| Error::InvalidArgument(format!("name too long: {name}")))?;
            out.write_all(&len.to_le_bytes())?;
            out.write_all(bytes)?;
            t.write_bsft(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::MalformedHeader("not a BSFK checkpoint".into()));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != VERSION {
            return Err(Error::MalformedHeader(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        if len > bytes.len() {
            return Err(Error::MalformedHeader("header length exceeds file".into()));
        }
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            r.read_exact(&mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::MalformedHeader("entry name is not UTF-8".into()))?;
            entries.push((name, Tensor::read_bsft(&mut r)?));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            entries,
            adam_t: header.adam_t,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Names of stored parameters, without the entry prefix.
    pub fn param_names(&self) -> Vec<&str> {
        self.entries.iter().filter_map(|(n, _)| n.strip_prefix(PARAM)).collect()
    }

    /// Rebuilds the model described by the stored configuration and loads
    /// every parameter and buffer.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config.model, self.config.seed)?;
        self.load_into(&mut model, |_| true)?;
        Ok(model)
    }

    /// Loads the entries accepted by `filter` (applied to parameter names)
    /// into `model`; every accepted parameter must be present.
    pub fn load_into(&self, model: &mut Model, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let names: Vec<String> = model.store.names().to_vec();
        let buffers: Vec<String> = model.store.buffer_names().to_vec();
        let mut loaded = 0;
        for (prefix, list) in [(PARAM, names), (BUFFER, buffers)] {
            for n in list.iter().filter(|n| filter(n)) {
                let t = self
                    .get(&format!("{prefix}{n}"))
                    .ok_or_else(|| Error::Config(format!("checkpoint is missing {n}")))?;
                model.store.set(n, t.clone())?;
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    /// Loads only the knowledge learner's parameters.
    pub fn load_ckler(&self, model: &mut Model) -> Result<usize> {
        self.load_into(model, |n| n.starts_with(CKLER_PREFIX))
    }

    /// Optimizer state matching `model`'s parameter order, if saved.
    pub fn adam(&self, model: &Model) -> Result<Option<Adam>> {
        let Some(t) = self.adam_t else { return Ok(None) };
        let mut adam = Adam::new(&model.store);
        adam.t = t;
        for (i, n) in model.store.names().iter().enumerate() {
            let m = self.get(&format!("{ADAM_M}{n}"));
            let v = self.get(&format!("{ADAM_V}{n}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    adam.m[i] = m.clone();
                    adam.v[i] = v.clone();
                }
                _ => return Err(Error::Config(format!("checkpoint is missing optimizer state for {n}"))),
            }
        }
        Ok(Some(adam))
    }
}
