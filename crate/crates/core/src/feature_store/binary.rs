//! Fixed-record binary dataset format.
//!
//! ```text
//! magic   "BALPM1\0\0"                      8 bytes
//! d_p     u32 LE
//! d_c     u32 LE
//! count   u32 LE
//! count × record:
//!   id hash      u64 LE
//!   prompt hash  u64 LE
//!   prompt_vec   d_p × f32 LE
//!   pair1_vec    d_c × f32 LE
//!   pair2_vec    d_c × f32 LE
//!   label flag   u8 (0 = unlabeled, 1 = labeled)
//!   label        u8 (1 = completion 1 preferred)
//! ```
//!
//! Ids are stored as 64-bit hashes. An id that is already 16 lowercase hex
//! digits hashes to its own value, so such ids survive a round trip; other
//! ids come back as the hex rendering of their FNV-1a hash.

use super::{FeatureDataset, FeatureStoreError, PreferenceTuple, Result};
use crate::seeding::fnv1a;

pub const BINARY_MAGIC: &[u8; 8] = b"BALPM1\0\0";
pub const BINARY_HEADER_LEN: usize = 8 + 4 + 4 + 4;

pub fn record_len(d_p: usize, d_c: usize) -> usize {
    8 + 8 + 4 * (d_p + 2 * d_c) + 2
}

pub fn id_hash(id: &str) -> u64 {
    if id.len() == 16 && id.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        u64::from_str_radix(id, 16).expect("validated hex")
    } else {
        fnv1a(id.as_bytes())
    }
}

pub fn id_from_hash(h: u64) -> String {
    format!("{h:016x}")
}

pub fn encode_binary(dataset: &FeatureDataset) -> Vec<u8> {
    let (d_p, d_c) = (dataset.d_p(), dataset.d_c());
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN + dataset.len() * record_len(d_p, d_c));
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(d_p as u32).to_le_bytes());
    out.extend_from_slice(&(d_c as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    for t in dataset.tuples() {
        out.extend_from_slice(&id_hash(&t.tuple_id).to_le_bytes());
        out.extend_from_slice(&id_hash(&t.prompt_id).to_le_bytes());
        for v in [&t.prompt_vec, &t.pair1_vec, &t.pair2_vec] {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        match t.label {
            None => out.extend_from_slice(&[0, 0]),
            Some(l) => out.extend_from_slice(&[1, u8::from(l)]),
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }

    fn f32s(&mut self, n: usize) -> Vec<f32> {
        self.take(4 * n)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}

fn malformed(offset: usize, message: impl Into<String>) -> FeatureStoreError {
    FeatureStoreError::Malformed {
        location: format!("byte offset {offset}"),
        message: message.into(),
    }
}

pub fn decode_binary(name: impl Into<String>, bytes: &[u8]) -> Result<FeatureDataset> {
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(malformed(0, "file shorter than header"));
    }
    if &bytes[..8] != BINARY_MAGIC {
        return Err(malformed(0, "bad magic"));
    }
    let mut cur = Cursor { bytes, pos: 8 };
    let d_p = cur.u32() as usize;
    let d_c = cur.u32() as usize;
    let count = cur.u32() as usize;
    if d_p == 0 || d_c == 0 {
        return Err(malformed(8, "zero feature dimension"));
    }
    let rec = d_p
        .checked_add(d_c.saturating_mul(2))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(18))
        .ok_or_else(|| malformed(8, "record size overflows"))?;
    let body = bytes.len() - BINARY_HEADER_LEN;
    if count.checked_mul(rec) != Some(body) {
        return Err(malformed(
            BINARY_HEADER_LEN,
            format!("body is {body} bytes, expected {count} records of {rec} bytes"),
        ));
    }
    let mut tuples = Vec::with_capacity(count);
    for _ in 0..count {
        let start = cur.pos;
        let id = cur.u64();
        let prompt = cur.u64();
        let prompt_vec = cur.f32s(d_p);
        let pair1_vec = cur.f32s(d_c);
        let pair2_vec = cur.f32s(d_c);
        let flag = cur.take(2);
        let label = match (flag[0], flag[1]) {
            (0, 0) => None,
            (1, 0) => Some(false),
            (1, 1) => Some(true),
            _ => return Err(malformed(start + rec - 2, "invalid label bytes")),
        };
        tuples.push(PreferenceTuple {
            tuple_id: id_from_hash(id),
            prompt_id: id_from_hash(prompt),
            prompt_vec,
            pair1_vec,
            pair2_vec,
            label,
        });
    }
    FeatureDataset::new(name, tuples)
}
