//! Binary checkpoints.
//!
//! Layout (little-endian): magic `ANET1`; header with the config digest
//! (`u32` length + ASCII hex), record count, moment record count, epoch (`u32`),
//! optimizer step (`u64`), RNG seed (`u64`) and RNG word position (`u128`);
//! then records of `u32` name length, UTF-8 name, `u32` rank, `u32` dims and
//! `f32` payload. Parameters come first under their own names (the first name
//! segment is the partition), running statistics under `buffer/`, and the
//! optimizer moments under `m/`, `v/` and `vmax/`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::amsgrad::{Amsgrad, Moments};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 5] = b"ANET1";

/// Hex SHA-256 of a resolved configuration text.
pub fn config_digest(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: String,
    pub epoch: u32,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub records: Vec<(String, Tensor<f32>)>,
    pub moments: Vec<(String, Tensor<f32>)>,
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

impl Checkpoint {
    /// Snapshot a model and optimizer.
    pub fn capture(
        state: &ModelState,
        opt: &Amsgrad,
        digest: &str,
        epoch: u32,
        rng_seed: u64,
        rng_word_pos: u128,
    ) -> Self {
        let mut records: Vec<(String, Tensor<f32>)> = state
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        records.extend(
            state
                .buffers
                .iter()
                .map(|b| (format!("buffer/{}", b.name), b.value.clone())),
        );
        let mut moments = Vec::new();
        for (p, mo) in state.params.iter().zip(&opt.moments) {
            if let Some(mo) = mo {
                moments.push((format!("m/{}", p.name), mo.m.clone()));
                moments.push((format!("v/{}", p.name), mo.v.clone()));
                moments.push((format!("vmax/{}", p.name), mo.vmax.clone()));
            }
        }
        Checkpoint {
            digest: digest.to_string(),
            epoch,
            step: opt.step,
            rng_seed,
            rng_word_pos,
            records,
            moments,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend((self.digest.len() as u32).to_le_bytes());
        out.extend(self.digest.as_bytes());
        out.extend((self.records.len() as u32).to_le_bytes());
        out.extend((self.moments.len() as u32).to_le_bytes());
        out.extend(self.epoch.to_le_bytes());
        out.extend(self.step.to_le_bytes());
        out.extend(self.rng_seed.to_le_bytes());
        out.extend(self.rng_word_pos.to_le_bytes());
        for (n, t) in self.records.iter().chain(&self.moments) {
            put_record(&mut out, n, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 5];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        let dlen = read_u32(&mut r)? as usize;
        let digest = read_string(&mut r, dlen)?;
        let n_records = read_u32(&mut r)? as usize;
        let n_moments = read_u32(&mut r)? as usize;
        let epoch = read_u32(&mut r)?;
        let step = u64::from_le_bytes(read_array(&mut r)?);
        let rng_seed = u64::from_le_bytes(read_array(&mut r)?);
        let rng_word_pos = u128::from_le_bytes(read_array(&mut r)?);
        let mut read_records = |count: usize| -> Result<Vec<(String, Tensor<f32>)>> {
            (0..count).map(|_| read_record(&mut r)).collect()
        };
        let records = read_records(n_records)?;
        let moments = read_records(n_moments)?;
        if r.position() as usize != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.position() as usize
            )));
        }
        Ok(Checkpoint {
            digest,
            epoch,
            step,
            rng_seed,
            rng_word_pos,
            records,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn check_digest(&self, expected: &str) -> Result<()> {
        if self.digest != expected {
            return Err(Error::DigestMismatch {
                expected: expected.to_string(),
                found: self.digest.clone(),
            });
        }
        Ok(())
    }

    /// Copy parameters and buffers into `state` (and moments into `opt`).
    /// Everything is validated first, so a mismatch leaves both untouched.
    pub fn restore(&self, state: &mut ModelState, opt: Option<&mut Amsgrad>) -> Result<()> {
        let find = |name: &str| self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let expected: Vec<(String, &[usize])> = state
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape()))
            .chain(
                state
                    .buffers
                    .iter()
                    .map(|b| (format!("buffer/{}", b.name), b.value.shape())),
            )
            .collect();
        for (name, shape) in &expected {
            match find(name) {
                None => {
                    return Err(Error::CheckpointMismatch {
                        name: name.clone(),
                        detail: "missing from checkpoint".into(),
                    })
                }
                Some(t) if t.shape() != *shape => {
                    return Err(Error::CheckpointMismatch {
                        name: name.clone(),
                        detail: format!("shape {:?} in checkpoint, {:?} in model", t.shape(), shape),
                    })
                }
                _ => {}
            }
        }
        if self.records.len() != expected.len() {
            let extra = self
                .records
                .iter()
                .find(|(n, _)| !expected.iter().any(|(e, _)| e == n))
                .map(|(n, _)| n.clone())
                .unwrap_or_default();
            return Err(Error::CheckpointMismatch {
                name: extra,
                detail: "not present in the model".into(),
            });
        }
        let mut new_moments = Vec::with_capacity(state.params.len());
        for p in &state.params {
            let get = |k: &str| {
                self.moments
                    .iter()
                    .find(|(n, _)| *n == format!("{k}/{}", p.name))
                    .map(|(_, t)| t.clone())
            };
            new_moments.push(match (get("m"), get("v"), get("vmax")) {
                (Some(m), Some(v), Some(vmax)) => {
                    if m.shape() != p.value.shape() || v.shape() != m.shape() || vmax.shape() != m.shape() {
                        return Err(Error::CheckpointMismatch {
                            name: format!("m/{}", p.name),
                            detail: "moment shape differs from parameter".into(),
                        });
                    }
                    Some(Moments { m, v, vmax })
                }
                (None, None, None) => None,
                _ => {
                    return Err(Error::CorruptCheckpoint(format!(
                        "incomplete optimizer moments for {}",
                        p.name
                    )))
                }
            });
        }
        for p in state.params.iter_mut() {
            p.value = find(&p.name).expect("validated").clone();
        }
        let names: Vec<String> = state.buffers.iter().map(|b| b.name.clone()).collect();
        for name in names {
            let t = find(&format!("buffer/{name}")).expect("validated").clone();
            state.buffer_mut(&name).expect("own buffer").value = t;
        }
        if let Some(opt) = opt {
            opt.moments = new_moments;
            opt.step = self.step;
        }
        Ok(())
    }
}

fn truncated() -> Error {
    Error::CorruptCheckpoint("file is truncated".into())
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| truncated())
}

fn read_array<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn remaining(r: &Cursor<&[u8]>) -> usize {
    r.get_ref().len().saturating_sub(r.position() as usize)
}

fn read_string(r: &mut Cursor<&[u8]>, len: usize) -> Result<String> {
    if len > remaining(r) {
        return Err(truncated());
    }
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::CorruptCheckpoint("record name is not UTF-8".into()))
}

fn read_record(r: &mut Cursor<&[u8]>) -> Result<(String, Tensor<f32>)> {
    let nlen = read_u32(r)? as usize;
    let name = read_string(r, nlen)?;
    let rank = read_u32(r)? as usize;
    if rank * 4 > remaining(r) {
        return Err(truncated());
    }
    let shape: Vec<usize> = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&c| c.checked_mul(4).is_some_and(|b| b <= remaining(r)))
        .ok_or_else(truncated)?;
    let data = (0..count)
        .map(|_| read_array(r).map(f32::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    Ok((name, Tensor::new(&shape, data)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneConfig, ModelConfig, Variant};

    fn model(width: usize) -> ModelState {
        let cfg = ModelConfig {
            variant: Variant::Van,
            image_size: 8,
            backbone: BackboneConfig {
                stem_channels: 4,
                stage_channels: vec![4, width],
                blocks_per_stage: 1,
                ibn: true,
            },
            s_f: 4,
            s_a: 2,
            id_classes: 3,
            attr_classes: vec![3, 2],
            ..Default::default()
        };
        ModelState::init(&cfg, 3).unwrap()
    }

    fn with_moments(s: &ModelState) -> Amsgrad {
        let mut opt = Amsgrad::new(s.params.len());
        let grads: Vec<_> = s.params.iter().map(|p| Some(p.value.map(|v| v * 0.5))).collect();
        let mut ps = s.params.clone();
        opt.step(&mut ps, &grads, 1e-3);
        opt
    }

    #[test]
    fn bytes_round_trip() {
        let s = model(8);
        let opt = with_moments(&s);
        let ck = Checkpoint::capture(&s, &opt, &config_digest("x"), 7, 11, 12345);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut fresh = model(8);
        for p in fresh.params.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let mut o2 = Amsgrad::new(fresh.params.len());
        back.restore(&mut fresh, Some(&mut o2)).unwrap();
        assert_eq!(fresh, s);
        assert_eq!(o2, opt);
    }

    #[test]
    fn truncation_is_a_clean_error() {
        let s = model(8);
        let bytes = Checkpoint::capture(&s, &Amsgrad::new(s.params.len()), "d", 0, 0, 0).to_bytes();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::CorruptCheckpoint(_))
            ));
        }
    }

    #[test]
    fn shape_mismatch_names_parameter_and_leaves_state() {
        let ck = Checkpoint::capture(&model(8), &Amsgrad::new(0), "d", 0, 0, 0);
        let mut other = model(6);
        let before = other.clone();
        match ck.restore(&mut other, None).unwrap_err() {
            Error::CheckpointMismatch { name, .. } => assert_eq!(name, "backbone.s1.b0.conv1.w"),
            e => panic!("unexpected {e}"),
        }
        assert_eq!(other, before);
    }

    #[test]
    fn digest_mismatch_prints_both() {
        let ck = Checkpoint::capture(&model(8), &Amsgrad::new(0), &config_digest("a"), 0, 0, 0);
        let err = ck.check_digest(&config_digest("b")).unwrap_err().to_string();
        assert!(err.contains(&config_digest("a")) && err.contains(&config_digest("b")));
    }
}
