//! Parameter checkpoint container.
//!
//! All integers and floats little-endian:
//!
//! ```text
//! magic            8 bytes  "VNCK0001"
//! stages           u32
//! base_channels    u32
//! convs_per_stage  u32
//! kernel_size      u32
//! dropout_rate     f64
//! input_patch_size u32
//! tensor_count     u32
//! per tensor:      name_len u32, name (UTF-8), ndim u32, dims u32×ndim, values f32×Πdims
//! has_optimizer    u8 (0 or 1)
//! if 1:            lr f64, beta1 f64, beta2 f64, eps f64, rule u8 (0 = running max, 1 = current),
//!                  step_count u64, then for each tensor in order: m, v, v_hat as f32×len
//! ```

use std::fs;
use std::path::Path;

use super::{NamedParam, NetworkConfig, NetworkParameters};
use crate::diffcore::DiffTensor;
use crate::error::{Error, Result};
use crate::optim::{AmsgradConfig, Moments, OptimizerState, SecondMoment};

const MAGIC: &[u8; 8] = b"VNCK0001";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParameters<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let c = ckpt.params.config();
    for v in [c.stages, c.base_channels, c.convs_per_stage, c.kernel_size] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.dropout_rate.to_le_bytes());
    out.extend_from_slice(&(c.input_patch_size as u32).to_le_bytes());
    let params = ckpt.params.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, p.tensor.values());
    }
    match &ckpt.optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            let oc = opt.config;
            for v in [oc.learning_rate, oc.beta1, oc.beta2, oc.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(match opt.rule {
                SecondMoment::RunningMax => 0,
                SecondMoment::Current => 1,
            });
            out.extend_from_slice(&opt.step_count.to_le_bytes());
            // Moments are allocated on the first step; before that they are all zero.
            for (i, p) in params.iter().enumerate() {
                match opt.moments.get(i) {
                    Some(m) => {
                        put_f32s(&mut out, &m.m);
                        put_f32s(&mut out, &m.v);
                        put_f32s(&mut out, &m.v_hat);
                    }
                    None => put_f32s(&mut out, &vec![0.0; 3 * p.tensor.len()]),
                }
            }
        }
    }
    out
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                what: "checkpoint",
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| malformed("tensor size overflows"))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Malformed {
        what: "checkpoint",
        detail: detail.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8).map_err(|_| Error::BadMagic {
        what: "checkpoint",
        expected: String::from_utf8_lossy(MAGIC).into(),
        found: String::from_utf8_lossy(bytes).into(),
    })?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            expected: String::from_utf8_lossy(MAGIC).into(),
            found: String::from_utf8_lossy(magic).into(),
        });
    }
    let (stages, base_channels, convs_per_stage, kernel_size) =
        (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let dropout_rate = r.f64()?;
    let input_patch_size = r.u32()?;
    let config = NetworkConfig {
        stages,
        base_channels,
        convs_per_stage,
        kernel_size,
        dropout_rate,
        input_patch_size,
    };
    config.validate()?;
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| malformed("parameter name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| malformed(format!("shape of {name} overflows")))?;
        let values = r.f32s(len)?;
        params.push(NamedParam {
            name,
            tensor: DiffTensor::new(shape, values)?.with_grad(),
        });
    }
    let params = NetworkParameters::from_parts(config, params)?;
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let config = AmsgradConfig {
                learning_rate: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let rule = match r.u8()? {
                0 => SecondMoment::RunningMax,
                1 => SecondMoment::Current,
                other => return Err(malformed(format!("unknown second-moment rule {other}"))),
            };
            let step_count = r.u64()?;
            let mut moments = Vec::with_capacity(params.params().len());
            for p in params.params() {
                let n = p.tensor.len();
                moments.push(Moments {
                    m: r.f32s(n)?,
                    v: r.f32s(n)?,
                    v_hat: r.f32s(n)?,
                });
            }
            let mut state = OptimizerState::new(config)?.with_rule(rule);
            state.step_count = step_count;
            state.moments = moments;
            Some(state)
        }
        other => {
            return Err(malformed(format!(
                "optimizer flag must be 0 or 1, got {other}"
            )))
        }
    };
    if r.pos != bytes.len() {
        return Err(malformed(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { params, optimizer })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
