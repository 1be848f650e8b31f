//! Binary named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "AGCK" | u32 version | u64 step
//! u32 meta_len | meta bytes (UTF-8, usually JSON)
//! u32 n_sections
//!   u32 name_len | name | u32 n_tensors
//!     u32 name_len | name | u32 ndim | u64 dims[ndim] | f64 values[prod(dims)]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::AutodiffError;
use crate::optim::OptimizerState;
use crate::params::ModelParams;

pub const MAGIC: &[u8; 4] = b"AGCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub step: u64,
    pub meta: String,
    pub sections: Vec<Section>,
}

fn err(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn push_params(&mut self, name: &str, params: &ModelParams) {
        self.sections.push(Section {
            name: name.to_string(),
            tensors: params
                .names()
                .iter()
                .zip(params.tensors())
                .map(|(n, t)| NamedTensor {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        });
    }

    /// Live values under `name`, plus the EMA shadow under `name.ema` when
    /// one exists.
    pub fn push_model(&mut self, name: &str, params: &ModelParams) {
        self.push_params(name, params);
        if let Some(ema) = params.ema() {
            self.sections.push(Section {
                name: format!("{name}.ema"),
                tensors: params
                    .names()
                    .iter()
                    .zip(ema.tensors())
                    .map(|(n, t)| NamedTensor {
                        name: n.clone(),
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    })
                    .chain(std::iter::once(NamedTensor {
                        name: "__decay".into(),
                        shape: vec![],
                        data: vec![ema.decay()],
                    }))
                    .collect(),
            });
        }
    }

    pub fn push_optimizer(&mut self, name: &str, params: &ModelParams, state: &OptimizerState) {
        let mut tensors = vec![NamedTensor {
            name: "__step".into(),
            shape: vec![],
            data: vec![state.step as f64],
        }];
        for (i, n) in params.names().iter().enumerate() {
            let shape = params.tensors()[i].shape().to_vec();
            tensors.push(NamedTensor {
                name: format!("{n}.m"),
                shape: shape.clone(),
                data: state.m[i].clone(),
            });
            tensors.push(NamedTensor {
                name: format!("{n}.v"),
                shape,
                data: state.v[i].clone(),
            });
        }
        self.sections.push(Section {
            name: name.to_string(),
            tensors,
        });
    }

    /// Loads section `name` (and `name.ema` if present) into `params`,
    /// matching tensors by name and shape.
    pub fn load_model(&self, name: &str, params: &mut ModelParams) -> Result<(), AutodiffError> {
        let sec = self
            .section(name)
            .ok_or_else(|| err(format!("missing section `{name}`")))?;
        let values = Self::match_values(sec, params)?;
        params.load_values(&values)?;
        if let Some(ema) = self.section(&format!("{name}.ema")) {
            let decay = ema
                .tensors
                .iter()
                .find(|t| t.name == "__decay")
                .map(|t| t.data[0])
                .ok_or_else(|| err("EMA section without decay"))?;
            let values = Self::match_values(ema, params)?;
            params.set_ema_values(decay, &values)?;
        }
        Ok(())
    }

    pub fn load_optimizer(&self, name: &str, params: &ModelParams) -> Result<OptimizerState, AutodiffError> {
        let sec = self
            .section(name)
            .ok_or_else(|| err(format!("missing section `{name}`")))?;
        let find = |n: &str| {
            sec.tensors
                .iter()
                .find(|t| t.name == n)
                .ok_or_else(|| err(format!("optimizer tensor `{n}` missing")))
        };
        let step = find("__step")?.data[0] as u64;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for n in params.names() {
            m.push(find(&format!("{n}.m"))?.data.clone());
            v.push(find(&format!("{n}.v"))?.data.clone());
        }
        Ok(OptimizerState { step, m, v })
    }

    fn match_values(sec: &Section, params: &ModelParams) -> Result<Vec<Vec<f64>>, AutodiffError> {
        params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| {
                let found = sec
                    .tensors
                    .iter()
                    .find(|nt| &nt.name == n)
                    .ok_or_else(|| err(format!("tensor `{n}` missing from `{}`", sec.name)))?;
                if found.shape != t.shape() {
                    return Err(err(format!(
                        "tensor `{n}` has shape {:?}, model expects {:?}",
                        found.shape,
                        t.shape()
                    )));
                }
                Ok(found.data.clone())
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &self.meta);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            put_str(&mut out, &s.name);
            out.extend_from_slice(&(s.tensors.len() as u32).to_le_bytes());
            for t in &s.tensors {
                put_str(&mut out, &t.name);
                out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
                for &d in &t.shape {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AutodiffError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(err("bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(err(format!("unsupported checkpoint version {version}")));
        }
        let step = r.u64()?;
        let meta = r.string()?;
        let n_sections = r.u32()?;
        let mut sections = Vec::with_capacity(n_sections as usize);
        for _ in 0..n_sections {
            let name = r.string()?;
            let n = r.u32()?;
            let mut tensors = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let tname = r.string()?;
                let ndim = r.u32()? as usize;
                let shape = (0..ndim)
                    .map(|_| r.u64().map(|d| d as usize))
                    .collect::<Result<Vec<_>, _>>()?;
                let count: usize = shape.iter().product();
                let raw = r.take(count * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                tensors.push(NamedTensor {
                    name: tname,
                    shape,
                    data,
                });
            }
            sections.push(Section { name, tensors });
        }
        if r.pos != bytes.len() {
            return Err(err("trailing bytes after last section"));
        }
        Ok(Self {
            step,
            meta,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), AutodiffError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AutodiffError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AutodiffError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| err("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, AutodiffError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, AutodiffError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, AutodiffError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| err("invalid UTF-8 in name"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{Adam, AdamConfig};
    use crate::tensor::Tensor;

    #[test]
    fn model_and_optimizer_roundtrip() {
        let mut p = ModelParams::new();
        p.add("a", &[2, 2], vec![1.0, -2.0, 3.5, 1e-300]);
        p.add("b", &[3], vec![0.25, 0.5, f64::MIN_POSITIVE]);
        p.init_ema(0.999).unwrap();
        let mut opt = Adam::new(AdamConfig::adam(0.1, 0.5, 0.9), &p).unwrap();
        let grads = vec![Tensor::ones(&[2, 2]), Tensor::ones(&[3])];
        opt.step(&mut p, &grads).unwrap();
        p.ema_update();

        let mut ck = Checkpoint {
            step: 7,
            meta: "{\"kind\":\"test\"}".into(),
            sections: vec![],
        };
        ck.push_model("net", &p);
        ck.push_optimizer("net.adam", &p, &opt.state);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);

        let mut q = ModelParams::new();
        q.add("a", &[2, 2], vec![0.0; 4]);
        q.add("b", &[3], vec![0.0; 3]);
        back.load_model("net", &mut q).unwrap();
        assert_eq!(q.values(), p.values());
        assert_eq!(q.ema().unwrap().tensors()[1].data(), p.ema().unwrap().tensors()[1].data());
        assert_eq!(back.load_optimizer("net.adam", &q).unwrap(), opt.state);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let ck = Checkpoint::default();
        let mut bytes = ck.to_bytes();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn shape_mismatch_on_load() {
        let mut p = ModelParams::new();
        p.add("a", &[2], vec![1.0, 2.0]);
        let mut ck = Checkpoint::default();
        ck.push_model("net", &p);
        let mut q = ModelParams::new();
        q.add("a", &[3], vec![0.0; 3]);
        assert!(ck.load_model("net", &mut q).is_err());
    }
}
