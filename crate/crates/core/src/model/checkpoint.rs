//! Ensemble checkpoint format (little-endian throughout):
//!
//! ```text
//! magic        "BALPMCKPT1"          10 bytes
//! members      u32                   K >= 1
//! n_sizes      u32                   number of layer sizes, >= 2
//! sizes        n_sizes × u32         [input, hidden.., 1]
//! params       K × P × f32           each member's flat parameters
//! ```
//!
//! Parameters are narrowed to `f32` on save.

use std::path::Path;

use super::{AdapterNet, Ensemble, ModelError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"BALPMCKPT1";

// Bounds a hostile header can request before any allocation happens.
const MAX_LAYERS: usize = 64;

pub fn encode_checkpoint(ens: &Ensemble) -> Vec<u8> {
    let sizes = ens.members()[0].shape();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(ens.size() as u32).to_le_bytes());
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for &s in sizes {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for m in ens.members() {
        for &p in m.params() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let s = bytes
        .get(*pos..*pos + 4)
        .ok_or_else(|| bad(format!("truncated at byte {pos}")))?;
    *pos += 4;
    Ok(u32::from_le_bytes(s.try_into().unwrap()))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Ensemble> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut pos = CHECKPOINT_MAGIC.len();
    let k = read_u32(bytes, &mut pos)? as usize;
    let n_sizes = read_u32(bytes, &mut pos)? as usize;
    if k == 0 {
        return Err(bad("zero members"));
    }
    if !(2..=MAX_LAYERS).contains(&n_sizes) {
        return Err(bad(format!("{n_sizes} layer sizes")));
    }
    let sizes = (0..n_sizes)
        .map(|_| read_u32(bytes, &mut pos).map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    let per_member = sizes
        .windows(2)
        .try_fold(0usize, |acc, w| {
            w[0].checked_mul(w[1])?.checked_add(w[1])?.checked_add(acc)
        })
        .ok_or_else(|| bad("parameter count overflows"))?;
    let expected = per_member
        .checked_mul(k)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("parameter count overflows"))?;
    if bytes.len() - pos != expected {
        return Err(bad(format!(
            "{} parameter bytes, expected {expected}",
            bytes.len() - pos
        )));
    }
    let members = bytes[pos..]
        .chunks_exact(4 * per_member.max(1))
        .take(k)
        .map(|chunk| {
            let params = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            AdapterNet::from_parts(sizes.clone(), params)
        })
        .collect::<Result<Vec<_>>>()?;
    if members.len() != k {
        return Err(bad("member count mismatch"));
    }
    Ensemble::from_members(members)
}

pub fn save_checkpoint(ens: &Ensemble, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ens))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Ensemble> {
    decode_checkpoint(&std::fs::read(path)?)
}
