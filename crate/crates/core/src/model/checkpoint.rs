//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "RNDC"  u32 version
//! u32 block_size  u32 input_channels  u32 stem_channels  u32 encoder_channels[4]
//! u64 fingerprint
//! u32 tensor_count
//! per tensor: u32 name_len, name (utf-8), u8 dtype (1 = f32), u32 rank, u32 dims[rank], values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RNDC";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(4 * params.tensors().values().map(|t| t.len()).sum::<usize>() + 4096);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, cfg.block_size as u32);
    put_u32(&mut out, cfg.input_channels as u32);
    put_u32(&mut out, cfg.stem_channels as u32);
    for &c in &cfg.encoder_channels {
        put_u32(&mut out, c as u32);
    }
    out.extend_from_slice(&cfg.fingerprint().to_le_bytes());
    put_u32(&mut out, params.tensors().len() as u32);
    for (name, t) in params.tensors() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let block_size = r.u32()? as usize;
    let input_channels = r.u32()? as usize;
    let stem_channels = r.u32()? as usize;
    let mut encoder_channels = [0usize; 4];
    for c in &mut encoder_channels {
        *c = r.u32()? as usize;
    }
    let config = ModelConfig {
        block_size,
        stem_channels,
        encoder_channels,
        input_channels,
    };
    let stored = r.u64()?;
    let computed = config.fingerprint();
    if stored != computed {
        return Err(Error::FingerprintMismatch {
            expected: computed,
            found: stored,
        });
    }
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("header describes an invalid model: {e}")))?;

    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not valid UTF-8".into()))?
            .to_owned();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has unknown dtype tag {dtype}"
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' is too large")))?;
        let raw = r.take(len.checked_mul(4).ok_or(Error::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    ModelParams::from_tensors(config, tensors)
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless it was built for `expected`.
pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ModelParams> {
    let params = load(path)?;
    if params.fingerprint() != expected.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: expected.fingerprint(),
            found: params.fingerprint(),
        });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams::build(ModelConfig::default(), 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let back = from_bytes(&to_bytes(&p)).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&params());
        assert_eq!(&bytes[..4], b"RNDC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 32);
        let fp = u64::from_le_bytes(bytes[36..44].try_into().unwrap());
        assert_eq!(fp, ModelConfig::default().fingerprint());
    }

    #[test]
    fn default_checkpoint_fits_in_one_megabyte() {
        assert!(to_bytes(&params()).len() < 1_048_576);
    }

    #[test]
    fn distinct_errors_for_each_corruption() {
        let good = to_bytes(&params());

        let mut bad = good.clone();
        bad[0] ^= 0xff;
        assert!(matches!(from_bytes(&bad), Err(Error::BadMagic)));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(from_bytes(&bad), Err(Error::UnsupportedVersion(9))));

        let mut bad = good.clone();
        bad[40] ^= 0x01;
        assert!(matches!(from_bytes(&bad), Err(Error::FingerprintMismatch { .. })));

        assert!(matches!(from_bytes(&good[..good.len() - 3]), Err(Error::Truncated)));
        assert!(matches!(from_bytes(&good[..2]), Err(Error::BadMagic)));
    }

    #[test]
    fn every_header_byte_is_validated() {
        let good = to_bytes(&params());
        for i in 0..44 {
            let mut bad = good.clone();
            bad[i] = bad[i].wrapping_add(1);
            assert!(from_bytes(&bad).is_err(), "corrupting header byte {i} was accepted");
        }
    }

    #[test]
    fn load_expecting_rejects_other_architectures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rndc");
        save(&params(), &path).unwrap();
        assert!(load_expecting(&path, &ModelConfig::default()).is_ok());
        let err = load_expecting(&path, &ModelConfig::with_block_size(64)).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch { .. }));
    }
}
