//! Binary checkpoints.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! "SCFM" version count
//! count × { name_len name(utf-8) rank dims[rank] payload(f64 le, product(dims)) }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use scfm_core::data::Normalization;
use scfm_core::distill::EmaState;
use scfm_core::net::{Dense, EffectiveDelta, LoraDelta, LoraLayer, NetConfig, Theta};
use scfm_core::optim::{AdamWConfig, OptimState};
use scfm_core::tensor::Tensor;

use crate::error::{ExperimentError, Result};

pub const MAGIC: &[u8; 4] = b"SCFM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        NamedArray {
            name: name.into(),
            dims,
            data,
        }
    }

    fn from_tensor(name: impl Into<String>, t: &Tensor<f64>) -> Self {
        NamedArray::new(name, t.shape().to_vec(), t.data().to_vec())
    }

    fn tensor(&self) -> Result<Tensor<f64>> {
        Ok(Tensor::new(self.dims.clone(), self.data.clone())?)
    }
}

fn format_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Format(msg.into())
}

fn u32_of(n: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| format_err(format!("{what} {n} exceeds u32")))
}

pub fn encode(arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(arrays.len(), "array count")?);
    for a in arrays {
        out.extend_from_slice(&u32_of(a.name.len(), "name length")?);
        out.extend_from_slice(a.name.as_bytes());
        out.extend_from_slice(&u32_of(a.dims.len(), "rank")?);
        for &d in &a.dims {
            out.extend_from_slice(&u32_of(d, "dimension")?);
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format_err(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(format_err(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32()?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| format_err("array name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_err(format!("array {name} is too large")))?;
        let payload = r.take(n.checked_mul(8).ok_or_else(|| format_err("payload too large"))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push(NamedArray { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(arrays)
}

/// Everything needed to resume or evaluate a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    /// Frozen base weights; the teacher itself for a teacher checkpoint.
    pub theta: Theta<f64>,
    pub delta: Option<LoraDelta<f64>>,
    pub ema: Option<EmaState<f64>>,
    pub optim: OptimState<f64>,
    pub normalization: Normalization,
}

impl ModelCheckpoint {
    pub fn net(&self) -> &NetConfig {
        self.theta.config()
    }

    /// Base weights with the trainable adapter merged in.
    pub fn student(&self) -> Result<Theta<f64>> {
        Ok(match &self.delta {
            Some(d) => scfm_core::net::merge_params(&self.theta, d)?,
            None => self.theta.clone(),
        })
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let c = self.net();
        let mut out = vec![NamedArray::new(
            "meta.net",
            vec![7],
            [
                c.input_dim,
                c.hidden_dim,
                c.num_hidden_layers,
                c.time_embed_dim,
                c.class_count,
                c.class_embed_dim,
                c.step_embed_dim,
            ]
            .iter()
            .map(|&v| v as f64)
            .collect(),
        )];
        for (name, t) in self.theta.param_names().into_iter().zip(self.theta.tensors()) {
            out.push(NamedArray::from_tensor(format!("theta.{name}"), t));
        }
        if let Some(d) = &self.delta {
            out.push(NamedArray::new("meta.lora", vec![2], vec![d.rank() as f64, d.alpha()]));
            for (i, l) in d.layers().iter().enumerate() {
                out.push(NamedArray::from_tensor(format!("lora.layer{i}.a"), &l.a));
                out.push(NamedArray::from_tensor(format!("lora.layer{i}.b"), &l.b));
            }
        }
        if let Some(e) = &self.ema {
            out.push(NamedArray::new("meta.ema", vec![1], vec![e.iteration as f64]));
            for (i, t) in e.slow.layers.iter().enumerate() {
                out.push(NamedArray::from_tensor(format!("ema.slow.layer{i}"), t));
            }
            if let Some(fast) = &e.fast {
                for (i, t) in fast.layers.iter().enumerate() {
                    out.push(NamedArray::from_tensor(format!("ema.fast.layer{i}"), t));
                }
            }
        }
        let o = &self.optim;
        out.push(NamedArray::new(
            "meta.optim",
            vec![6],
            vec![
                o.config.lr,
                o.config.beta1,
                o.config.beta2,
                o.config.weight_decay,
                o.config.eps,
                o.step() as f64,
            ],
        ));
        for (i, (m, v)) in o.first_moments().iter().zip(o.second_moments()).enumerate() {
            out.push(NamedArray::from_tensor(format!("optim.m{i}"), m));
            out.push(NamedArray::from_tensor(format!("optim.v{i}"), v));
        }
        let n = &self.normalization;
        out.push(NamedArray::new("norm.mean", vec![2], n.mean.to_vec()));
        out.push(NamedArray::new("norm.std", vec![2], n.std.to_vec()));
        out
    }

    /// Rebuilds a checkpoint; with `expected` the stored weights must fit
    /// that network, otherwise the stored network description is used.
    pub fn from_arrays(arrays: Vec<NamedArray>, expected: Option<&NetConfig>) -> Result<Self> {
        let mut map = Arrays(BTreeMap::new());
        for a in arrays {
            let name = a.name.clone();
            if map.0.insert(name.clone(), a).is_some() {
                return Err(format_err(format!("duplicate array {name}")));
            }
        }
        let meta = map.take("meta.net")?;
        if meta.data.len() != 7 {
            return Err(format_err("meta.net must hold 7 values"));
        }
        let m: Vec<usize> = meta.data.iter().map(|&v| v as usize).collect();
        let stored = NetConfig {
            input_dim: m[0],
            hidden_dim: m[1],
            num_hidden_layers: m[2],
            time_embed_dim: m[3],
            class_count: m[4],
            class_embed_dim: m[5],
            step_embed_dim: m[6],
        };
        let net = expected.copied().unwrap_or(stored);
        let layer_count = stored.num_hidden_layers + 1;
        let mut layers = Vec::with_capacity(layer_count);
        for i in 0..layer_count {
            layers.push(Dense {
                weight: map.tensor(&format!("theta.layer{i}.weight"))?,
                bias: map.tensor(&format!("theta.layer{i}.bias"))?,
            });
        }
        let class_table = if map.has("theta.class_table") {
            Some(map.tensor("theta.class_table")?)
        } else {
            None
        };
        let theta = Theta::from_parts(net, layers, class_table)?;

        let delta = if map.has("meta.lora") {
            let meta = map.take("meta.lora")?;
            if meta.data.len() != 2 {
                return Err(format_err("meta.lora must hold 2 values"));
            }
            let ls = (0..layer_count)
                .map(|i| {
                    Ok(LoraLayer {
                        a: map.tensor(&format!("lora.layer{i}.a"))?,
                        b: map.tensor(&format!("lora.layer{i}.b"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let d = LoraDelta::from_parts(meta.data[0] as usize, meta.data[1], ls)?;
            // adapter factors must fit their base layers
            scfm_core::net::merge_params(&theta, &d)?;
            Some(d)
        } else {
            None
        };

        let ema = if map.has("meta.ema") {
            let iteration = map.take("meta.ema")?.data.first().copied().unwrap_or(0.0) as u64;
            let slow = map.stack("ema.slow", layer_count)?;
            let fast = if map.has("ema.fast.layer0") {
                Some(map.stack("ema.fast", layer_count)?)
            } else {
                None
            };
            for (name, set) in [("ema.slow", Some(&slow)), ("ema.fast", fast.as_ref())] {
                for (i, t) in set.into_iter().flatten().enumerate() {
                    let want = theta.layers()[i].weight.shape();
                    if t.shape() != want {
                        return Err(format_err(format!(
                            "{name}.layer{i} is {:?}, expected {want:?}",
                            t.shape()
                        )));
                    }
                }
            }
            Some(EmaState {
                slow: EffectiveDelta { layers: slow },
                fast: fast.map(|layers| EffectiveDelta { layers }),
                iteration,
            })
        } else {
            None
        };

        let meta = map.take("meta.optim")?;
        if meta.data.len() != 6 {
            return Err(format_err("meta.optim must hold 6 values"));
        }
        let config = AdamWConfig {
            lr: meta.data[0],
            beta1: meta.data[1],
            beta2: meta.data[2],
            weight_decay: meta.data[3],
            eps: meta.data[4],
        };
        let mut first = Vec::new();
        let mut second = Vec::new();
        while map.has(&format!("optim.m{}", first.len())) {
            let i = first.len();
            first.push(map.tensor(&format!("optim.m{i}"))?);
            second.push(map.tensor(&format!("optim.v{i}"))?);
        }
        let optim = OptimState::from_parts(config, meta.data[5] as u64, first, second)?;

        let mean = map.take("norm.mean")?;
        let std = map.take("norm.std")?;
        if mean.data.len() != 2 || std.data.len() != 2 {
            return Err(format_err("normalization arrays must hold 2 values"));
        }
        let normalization = Normalization {
            mean: [mean.data[0], mean.data[1]],
            std: [std.data[0], std.data[1]],
        };
        if let Some(extra) = map.0.keys().next() {
            return Err(format_err(format!("unexpected array {extra}")));
        }
        Ok(ModelCheckpoint {
            theta,
            delta,
            ema,
            optim,
            normalization,
        })
    }
}

struct Arrays(BTreeMap<String, NamedArray>);

impl Arrays {
    fn has(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    fn take(&mut self, name: &str) -> Result<NamedArray> {
        self.0
            .remove(name)
            .ok_or_else(|| format_err(format!("missing array {name}")))
    }

    fn tensor(&mut self, name: &str) -> Result<Tensor<f64>> {
        self.take(name)?.tensor()
    }

    fn stack(&mut self, prefix: &str, n: usize) -> Result<Vec<Tensor<f64>>> {
        (0..n).map(|i| self.tensor(&format!("{prefix}.layer{i}"))).collect()
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    let bytes = encode(&ckpt.to_arrays())?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| ExperimentError::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&NetConfig>) -> Result<ModelCheckpoint> {
    if !path.exists() {
        return Err(ExperimentError::Prerequisite(format!("checkpoint {} not found", path.display())));
    }
    let bytes = std::fs::read(path).map_err(|e| ExperimentError::io(path, e))?;
    ModelCheckpoint::from_arrays(decode(&bytes)?, expected)
}
