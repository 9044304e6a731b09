//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "DAMPCKPT"
//! version          u32      currently 1
//! arch tag         u32 len + utf8
//! input_channels   u32
//! class_count      u32
//! tensor count     u32
//! per tensor:      name (u32 len + utf8), dtype code u8 (1 = f64),
//!                  ndim u8, dims u32 each, payload f64 little-endian
//! checksum         32 bytes, SHA-256 over everything before it
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{DampError, Result};
use crate::nn::{build_model, Arch, StageModel, TensorRef};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DAMPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    push_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn tensor_section(model: &StageModel) -> Vec<u8> {
    let tensors = model.named_tensors();
    let mut buf = Vec::new();
    push_u32(&mut buf, tensors.len() as u32);
    for (name, t) in &tensors {
        push_str(&mut buf, name);
        buf.push(DTYPE_F64);
        let shape = t.shape();
        buf.push(shape.len() as u8);
        for &d in &shape {
            push_u32(&mut buf, d as u32);
        }
        for &v in t.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Serialize a model into checkpoint bytes.
pub fn checkpoint_bytes(model: &StageModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    push_str(&mut buf, model.arch.tag());
    push_u32(&mut buf, model.input_channels as u32);
    push_u32(&mut buf, model.class_count as u32);
    buf.extend_from_slice(&tensor_section(model));
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn save_checkpoint<P: AsRef<Path>>(model: &StageModel, path: P) -> Result<()> {
    fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let slice = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| DampError::Format(format!("checkpoint truncated while reading {what}")))?;
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let s = self.take(len, what)?;
        String::from_utf8(s.to_vec())
            .map_err(|_| DampError::Format(format!("{what} is not valid utf-8")))
    }
}

/// Parse checkpoint bytes back into a model, verifying the checksum first.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<StageModel> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 {
        return Err(DampError::Format("checkpoint too short".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(DampError::Format("bad checkpoint magic".into()));
    }
    let body = &bytes[..bytes.len() - 32];
    let stored = &bytes[bytes.len() - 32..];
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(DampError::Corruption(
            "checkpoint checksum mismatch".into(),
        ));
    }
    let mut r = Reader {
        bytes: body,
        pos: 8,
    };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(DampError::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let arch = Arch::parse(&r.str("arch tag")?)?;
    let input_channels = r.u32("input channels")? as usize;
    let class_count = r.u32("class count")? as usize;
    let mut model = build_model(arch, input_channels, class_count, 0)?;
    let tensor_count = r.u32("tensor count")? as usize;
    let expected: Vec<String> = model
        .named_tensors()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    if tensor_count != expected.len() {
        return Err(DampError::Format(format!(
            "checkpoint holds {tensor_count} tensors, architecture needs {}",
            expected.len()
        )));
    }
    for name in expected {
        let got = r.str("tensor name")?;
        if got != name {
            return Err(DampError::Format(format!(
                "tensor order mismatch: expected {name}, found {got}"
            )));
        }
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(DampError::Format(format!("unsupported dtype code {dtype}")));
        }
        let ndim = r.take(1, "ndim")?[0] as usize;
        let mut len = 1usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = r.u32("dim")? as usize;
            dims.push(d);
            len *= d;
        }
        let payload = r.take(len * 8, "payload")?;
        // Find the live tensor and overwrite it in place.
        let mut params = model.named_params_mut();
        let slot = params.iter_mut().find(|(n, _)| *n == name);
        if let Some((_, t)) = slot {
            let dst = t.as_slice_mut();
            check_dims(&name, &dims, dst.len())?;
            fill_f64(dst, payload);
        } else {
            drop(params);
            write_buffer(&mut model, &name, &dims, payload)?;
        }
    }
    Ok(model)
}

fn check_dims(name: &str, dims: &[usize], expected_len: usize) -> Result<()> {
    let len: usize = dims.iter().product();
    if len != expected_len {
        return Err(DampError::Format(format!(
            "tensor {name} has {len} entries, architecture expects {expected_len}"
        )));
    }
    Ok(())
}

fn fill_f64(dst: &mut [f64], payload: &[u8]) {
    for (i, v) in dst.iter_mut().enumerate() {
        let b = &payload[i * 8..i * 8 + 8];
        *v = f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]);
    }
}

fn write_buffer(model: &mut StageModel, name: &str, dims: &[usize], payload: &[u8]) -> Result<()> {
    for (i, stage) in model.stages.iter_mut().enumerate() {
        if let Some(bn) = &mut stage.norm {
            let s = i + 1;
            if name == format!("stage{s}.bn.running_mean") {
                check_dims(name, dims, bn.running_mean.len())?;
                fill_f64(bn.running_mean.as_slice_mut().unwrap(), payload);
                return Ok(());
            }
            if name == format!("stage{s}.bn.running_var") {
                check_dims(name, dims, bn.running_var.len())?;
                fill_f64(bn.running_var.as_slice_mut().unwrap(), payload);
                return Ok(());
            }
        }
    }
    Err(DampError::Format(format!("unknown tensor {name}")))
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<StageModel> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

/// Hex SHA-256 over the serialized tensor section: a stable identity for a
/// set of weights.
pub fn fingerprint(model: &StageModel) -> String {
    let digest = Sha256::digest(tensor_section(model));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Convenience for checks that only care about learnable tensors staying
/// bit-identical.
pub fn tensors_equal(a: &StageModel, b: &StageModel) -> bool {
    let ta = a.named_tensors();
    let tb = b.named_tensors();
    ta.len() == tb.len()
        && ta
            .iter()
            .zip(tb.iter())
            .all(|((na, va), (nb, vb))| na == nb && slice_eq(va, vb))
}

fn slice_eq(a: &TensorRef, b: &TensorRef) -> bool {
    let (a, b) = (a.as_slice(), b.as_slice());
    a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, Arch};

    #[test]
    fn roundtrip_is_bit_exact_for_both_architectures() {
        for arch in [Arch::Cnn5Mini, Arch::Mlp5] {
            let model = build_model(arch, if arch == Arch::Mlp5 { 16 } else { 1 }, 7, 99).unwrap();
            let bytes = checkpoint_bytes(&model);
            let loaded = checkpoint_from_bytes(&bytes).unwrap();
            assert!(tensors_equal(&model, &loaded));
            assert_eq!(fingerprint(&model), fingerprint(&loaded));
        }
    }

    #[test]
    fn flipped_payload_byte_is_corruption() {
        let model = build_model(Arch::Mlp5, 8, 3, 1).unwrap();
        let mut bytes = checkpoint_bytes(&model);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(DampError::Corruption(_))
        ));
    }

    #[test]
    fn synthetic_future_version_is_a_version_error() {
        let model = build_model(Arch::Mlp5, 8, 3, 1).unwrap();
        let mut bytes = checkpoint_bytes(&model);
        bytes.truncate(bytes.len() - 32);
        bytes[8..12].copy_from_slice(&999u32.to_le_bytes());
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(DampError::Version { found: 999, .. })
        ));
    }

    #[test]
    fn save_and_load_via_files() {
        let model = build_model(Arch::Cnn5Mini, 1, 5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dampckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(tensors_equal(&model, &loaded));
    }

    #[test]
    fn fingerprint_changes_with_any_weight() {
        let mut model = build_model(Arch::Mlp5, 8, 3, 1).unwrap();
        let before = fingerprint(&model);
        model.head.weight[[0, 0]] += 1e-12;
        assert_ne!(before, fingerprint(&model));
    }
}
