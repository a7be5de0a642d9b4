//! Named parameter sets: binding to a tape, SGD updates and checkpoint files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const MAGIC: &[u8; 5] = b"PGNN1";

/// A set of named trainable tensors with a fixed order.
pub trait Parameters {
    fn named(&self) -> Vec<(String, &Tensor)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// Registers every tensor as a trainable leaf, in `named()` order.
    fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.named().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect()
    }

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

/// Plain gradient descent step: `p -= lr * grad` for every leaf that got a gradient.
pub fn sgd_step<P: Parameters + ?Sized>(params: &mut P, tape: &Tape, leaves: &[Var], lr: f64) {
    for ((_, p), &v) in params.named_mut().into_iter().zip(leaves) {
        if let Some(g) = tape.grad(v) {
            for (a, d) in p.data_mut().iter_mut().zip(g.data()) {
                *a -= lr * d;
            }
        }
    }
}

/// Serializes named tensors: magic, entry count, manifest (name, payload offset), payload.
pub fn encode_checkpoint(entries: &[(String, &Tensor)]) -> Vec<u8> {
    let payloads: Vec<Vec<u8>> = entries.iter().map(|(_, t)| t.to_bytes()).collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for ((name, _), p) in entries.iter().zip(&payloads) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        offset += p.len() as u64;
    }
    for p in payloads {
        out.extend_from_slice(&p);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let bad = |msg: &str| Error::Format {
        path: "<checkpoint>".into(),
        msg: msg.into(),
    };
    if bytes.len() < 9 || &bytes[..5] != MAGIC {
        return Err(bad("missing PGNN1 header"));
    }
    let u32_at = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| bad("truncated manifest"))
    };
    let count = u32_at(5)?;
    let mut at = 9;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(at)?;
        at += 4;
        let name = bytes
            .get(at..at + len)
            .ok_or_else(|| bad("truncated name"))
            .and_then(|b| String::from_utf8(b.to_vec()).map_err(|_| bad("name is not utf-8")))?;
        at += len;
        let off = bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| bad("truncated offset"))?;
        at += 8;
        manifest.push((name, off));
    }
    let payload = &bytes[at..];
    manifest
        .into_iter()
        .map(|(name, off)| {
            let slice = payload.get(off..).ok_or_else(|| bad("offset past end"))?;
            Ok((name, Tensor::from_bytes(slice)?.0))
        })
        .collect()
}

pub fn save_checkpoint<P: Parameters + ?Sized>(params: &P, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(&params.named());
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads tensors into `params`, matching by name and shape.
pub fn load_checkpoint<P: Parameters + ?Sized>(params: &mut P, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format { msg, .. } => Error::Format {
            path: path.display().to_string(),
            msg,
        },
        other => other,
    })?;
    for (name, slot) in params.named_mut() {
        let (_, t) = entries.iter().find(|(n, _)| *n == name).ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            msg: format!("missing tensor {name}"),
        })?;
        if t.shape() != slot.shape() {
            return Err(Error::shape("load_checkpoint", slot.shape(), t.shape()));
        }
        *slot = t.clone();
    }
    Ok(())
}
