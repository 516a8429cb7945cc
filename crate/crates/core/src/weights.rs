//! Named tensor blobs.
//!
//! `PTW1` layout, all little-endian:
//!
//! ```text
//! "PTW1" | u32 count | count × { u16 name_len | name (UTF-8) | u8 rank | rank × u32 dim | f32 data… }
//! ```
//!
//! Checkpoints reuse the entry layout with `f64` payloads so that resumed
//! runs continue from exactly the same values.

use std::path::Path;

use crate::backbone::{BackboneState, ViTConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PTW1_MAGIC: &[u8; 4] = b"PTW1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

pub fn encode_entries(out: &mut Vec<u8>, tensors: &[(String, &Tensor)], precision: Precision) -> Result<()> {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::invalid("rank exceeds 255"))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match precision {
            Precision::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            Precision::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(())
}

/// Bounds-checked little-endian reader that reports byte offsets.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.fail(format!("truncated: need {n} bytes, {} left", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4)?;
        if got != expect {
            return Err(Error::Parse {
                offset: at,
                detail: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expect)
                ),
            });
        }
        Ok(())
    }
}

pub fn decode_entries(r: &mut Reader<'_>, precision: Precision) -> Result<Vec<(String, Tensor)>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name_at = r.position();
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Parse {
                offset: name_at,
                detail: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u8()? as usize;
        if rank == 0 {
            return Err(r.fail(format!("tensor {name} has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            n = n
                .checked_mul(d)
                .ok_or_else(|| r.fail(format!("tensor {name}: dimension overflow")))?;
            shape.push(d);
        }
        let width = match precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let bytes = n
            .checked_mul(width)
            .ok_or_else(|| r.fail(format!("tensor {name}: dimension overflow")))?;
        let raw = r.take(bytes)?;
        let data = match precision {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn encode_ptw1(tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = PTW1_MAGIC.to_vec();
    encode_entries(&mut out, tensors, Precision::F32)?;
    Ok(out)
}

pub fn decode_ptw1(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes);
    r.magic(PTW1_MAGIC)?;
    let entries = decode_entries(&mut r, Precision::F32)?;
    if r.remaining() != 0 {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    Ok(entries)
}

/// Rounds every weight to `f32` so the in-memory state equals what a
/// `PTW1` file will hold.
pub fn quantize_to_f32(state: &mut BackboneState) {
    for t in state.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

pub fn save_backbone(state: &BackboneState, path: &Path) -> Result<()> {
    let bytes = encode_ptw1(&state.named_tensors())?;
    crate::io::write_atomic(path, &bytes)
}

/// Loads a backbone; the result is always frozen.
pub fn load_backbone(config: &ViTConfig, path: &Path) -> Result<BackboneState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = decode_ptw1(&bytes)?;
    BackboneState::from_named(config, entries, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ptw1_round_trip_is_bitwise_after_quantisation() {
        let cfg = ViTConfig::default();
        let mut state = BackboneState::random(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        quantize_to_f32(&mut state);
        state.freeze();
        let bytes = encode_ptw1(&state.named_tensors()).unwrap();
        let back = BackboneState::from_named(&cfg, decode_ptw1(&bytes).unwrap(), true).unwrap();
        assert_eq!(back, state);
        assert_eq!(encode_ptw1(&back.named_tensors()).unwrap(), bytes);
    }

    #[test]
    fn ptw1_errors_carry_offsets() {
        let t = Tensor::vector(vec![1.0, 2.0]);
        let bytes = encode_ptw1(&[("a".into(), &t)]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_ptw1(&bad), Err(Error::Parse { offset: 0, .. })));
        let cut = &bytes[..bytes.len() - 3];
        match decode_ptw1(cut) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4 + 4 + 2 + 1 + 1 + 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn canonical_names() {
        let cfg = ViTConfig::default();
        let state = BackboneState::random(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let names: Vec<String> = state.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"blocks.0.attn.w_q".to_string()));
        assert!(names.contains(&"blocks.1.mlp.b2".to_string()));
        assert_eq!(names.first().unwrap(), "patch_embed");
        assert_eq!(names.last().unwrap(), "final_ln.beta");
    }
}
