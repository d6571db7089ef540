//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `RBCK`, `u32` format version, `u32` length
//! of a JSON metadata block, the block itself, then two record sections
//! (model vars, optimizer state). Each section is a `u32` count followed by
//! records: `u32` name length, name bytes, `u32` rank, `u32` dims, `f32`
//! values.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::blocks::Module;
use crate::error::{Error, Result};
use crate::network::{Form, Model, ModelConfig};
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 4] = b"RBCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub form: Form,
    /// Every model var (parameters and BN buffers) in visit order.
    pub params: Vec<Record>,
    /// Optimizer slots keyed by parameter name.
    pub optimizer: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: Option<TrainConfig>,
    epoch: usize,
    form: Form,
}

/// Names and shapes that differ between two record lists, as text.
fn name_diff(expected: &[(String, Vec<usize>)], found: &[(String, Vec<usize>)]) -> String {
    let e: BTreeSet<&String> = expected.iter().map(|(n, _)| n).collect();
    let f: BTreeSet<&String> = found.iter().map(|(n, _)| n).collect();
    let mut lines = Vec::new();
    for n in e.difference(&f) {
        lines.push(format!("missing: {n}"));
    }
    for n in f.difference(&e) {
        lines.push(format!("unexpected: {n}"));
    }
    for (n, s) in expected {
        if let Some((_, fs)) = found.iter().find(|(m, _)| m == n) {
            if fs != s {
                lines.push(format!("shape: {n} expected {s:?}, found {fs:?}"));
            }
        }
    }
    lines.join("\n")
}

pub fn model_layout<T: Scalar>(model: &Model<T>) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    model.visit("", &mut |n, var| v.push((n.to_string(), var.shape())));
    v
}

/// Errors with the name diff unless both models have identical var names
/// and shapes.
pub fn check_same_layout<T: Scalar>(expected: &Model<T>, found: &Model<T>) -> Result<()> {
    let (e, f) = (model_layout(expected), model_layout(found));
    if e != f {
        return Err(Error::Mismatch(format!(
            "architectures differ:\n{}",
            name_diff(&e, &f)
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, epoch: usize) -> Self {
        let mut params = Vec::new();
        model.visit("", &mut |name, var| {
            params.push(Record {
                name: name.to_string(),
                shape: var.shape(),
                data: var.to_vec().iter().map(|v| v.as_f64() as f32).collect(),
            })
        });
        Self {
            version: FORMAT_VERSION,
            model_config: model.config.clone(),
            train_config: None,
            epoch,
            form: model.form(),
            params,
            optimizer: Vec::new(),
        }
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|r| (r.name.clone(), r.shape.clone()))
            .collect()
    }

    /// Copies the stored values into `model`, which must have exactly the
    /// stored names and shapes.
    pub fn load_into<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        let expected = model_layout(model);
        let found = self.layout();
        if expected != found {
            return Err(Error::Mismatch(format!(
                "checkpoint does not fit the model:\n{}",
                name_diff(&expected, &found)
            )));
        }
        let mut i = 0;
        let mut result = Ok(());
        model.visit("", &mut |_, var| {
            if result.is_ok() {
                let data = self.params[i].data.iter().map(|v| T::lit(*v as f64)).collect();
                result = var.set_data(data);
            }
            i += 1;
        });
        result
    }

    /// Builds a model of the stored config and form and loads the values.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let model = Model::skeleton(&self.model_config, self.form)?;
        self.load_into(&model)?;
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.params
            .iter()
            .filter(|r| !is_buffer(&r.name))
            .map(|r| r.data.len())
            .sum()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let meta = Meta {
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            epoch: self.epoch,
            form: self.form,
        };
        let meta = serde_json::to_vec(&meta)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        for section in [&self.params, &self.optimizer] {
            w.write_all(&(section.len() as u32).to_le_bytes())?;
            for r in section.iter() {
                w.write_all(&(r.name.len() as u32).to_le_bytes())?;
                w.write_all(r.name.as_bytes())?;
                w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
                for &d in &r.shape {
                    w.write_all(&(d as u32).to_le_bytes())?;
                }
                for v in &r.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("file too short for a checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(truncated)?;
        let meta: Meta = serde_json::from_slice(&meta)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let params = read_section(&mut r)?;
        let optimizer = read_section(&mut r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            version,
            model_config: meta.model,
            train_config: meta.train,
            epoch: meta.epoch,
            form: meta.form,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(fs::File::open(path)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var") || name.ends_with("num_batches_tracked")
}

fn truncated(_: std::io::Error) -> Error {
    Error::Format("truncated checkpoint".into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_section<R: Read>(r: &mut R) -> Result<Vec<Record>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("non-UTF-8 record name".into()))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(Record { name, shape, data });
    }
    Ok(out)
}
