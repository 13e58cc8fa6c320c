//! Binary checkpoint format.
//!
//! ```text
//! "VFIQ" | version u8
//! config:     u32 length | UTF-8 key = value text
//! parameters: u32 count  | records
//! optimizer:  u64 t | u64 seed | u64 step | u32 count | records (m/…, v/…)
//! u64 FNV-1a of everything above
//! record:     u32 name length | name | u8 rank | u64 extents… | u8 width | LE payload
//! ```

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use super::optim::OptimState;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"VFIQ";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Run configuration with `model.classes` resolved.
    pub config: RunConfig,
    pub params: ModelParams<T>,
    pub optim: OptimState<T>,
    pub step: u64,
    pub seed: u64,
}

fn put_record<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.push(T::WIDTH);
    for &v in t.data() {
        v.write_le(out);
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());

        let named = self.params.named();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in &named {
            put_record(&mut out, name, t);
        }

        out.extend_from_slice(&self.optim.t.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let count = self.optim.m.len() + self.optim.v.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in &self.optim.m {
            put_record(&mut out, &format!("m/{name}"), t);
        }
        for (name, t) in &self.optim.v {
            put_record(&mut out, &format!("v/{name}"), t);
        }

        let mut h = FnvHasher::default();
        h.write(&out);
        out.extend_from_slice(&h.finish().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format("bad magic, not a checkpoint"));
        }
        let version = r.u8("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "checkpoint version {version} is not the supported version {FORMAT_VERSION}"
            )));
        }
        if bytes.len() < 13 {
            return Err(Error::format("truncated checkpoint"));
        }
        let body = bytes.len() - 8;
        let mut h = FnvHasher::default();
        h.write(&bytes[..body]);
        let stored = u64::from_le_bytes(bytes[body..].try_into().expect("8 bytes"));
        let r_end = body;
        let mut r = Reader {
            bytes: &bytes[..r_end],
            pos: r.pos,
        };

        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(len, "config block")?)
            .map_err(|_| Error::format("config block is not UTF-8"))?;
        let config = RunConfig::parse(text)?;

        let n = r.u32("parameter count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let (name, t) = r.record::<T>()?;
            tensors.insert(name, t);
        }
        let t = r.u64("optimizer step")?;
        let seed = r.u64("seed")?;
        let step = r.u64("step")?;
        let n = r.u32("optimizer record count")?;
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for _ in 0..n {
            let (name, t) = r.record::<T>()?;
            match name.split_once('/') {
                Some(("m", p)) => m.insert(p.to_string(), t),
                Some(("v", p)) => v.insert(p.to_string(), t),
                _ => return Err(Error::format(format!("unexpected optimizer record {name}"))),
            };
        }
        if r.pos != r_end {
            return Err(Error::format(format!(
                "{} trailing bytes before checksum",
                r_end - r.pos
            )));
        }
        if h.finish() != stored {
            return Err(Error::format("checksum mismatch"));
        }
        let model = config.model_config(0);
        let params = ModelParams::from_named(model, tensors)?;
        Ok(Checkpoint {
            config,
            params,
            optim: OptimState { t, m, v },
            step,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(format!(
                "truncated checkpoint: {what} needs {n} bytes at offset {}",
                self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn record<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let len = self.u32("record name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "record name")?)
            .map_err(|_| Error::format("record name is not UTF-8"))?
            .to_string();
        let rank = self.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("extent")? as usize);
        }
        let width = self.u8("element width")?;
        if width != T::WIDTH {
            return Err(Error::format(format!(
                "{name}: stored with {width}-byte elements, expected {}",
                T::WIDTH
            )));
        }
        let count = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let bytes = count
            .and_then(|c| c.checked_mul(width as usize))
            .ok_or_else(|| Error::format(format!("{name}: extents overflow")))?;
        let payload = self.take(bytes, &name)?;
        let data = payload
            .chunks_exact(width as usize)
            .map(T::read_le)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ViTConfig;

    fn sample() -> Checkpoint<f32> {
        let mut config = RunConfig::toy();
        config.classes = 4;
        let params = ModelParams::init(config.model_config(0), 3).unwrap();
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let mut optim = OptimState::new(&params, &names);
        optim.t = 7;
        optim.m.values_mut().for_each(|t| t.data_mut().fill(0.25));
        Checkpoint {
            config,
            params,
            optim,
            step: 7,
            seed: 3,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config.vit, ViTConfig::toy());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bytes)
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }

    #[test]
    fn version_mismatch_names_both() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        let msg = Checkpoint::<f32>::from_bytes(&bytes)
            .unwrap_err()
            .to_string();
        assert!(msg.contains('9') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn truncation_and_corruption_rejected() {
        let bytes = sample().to_bytes();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::<f32>::from_bytes(&bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
        let mut flipped = bytes.clone();
        let i = flipped.len() - 20;
        flipped[i] ^= 1;
        assert!(Checkpoint::<f32>::from_bytes(&flipped)
            .unwrap_err()
            .to_string()
            .contains("checksum"));
    }

    #[test]
    fn precision_mismatch_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    }
}
