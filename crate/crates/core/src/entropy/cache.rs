//! Distance-profile cache: `"BALPMKNN1"`, u32 k, u64 N, then N records of
//! (u64 prompt hash, f64 D), all little-endian.

use super::EntropyError;

pub const KNN_CACHE_MAGIC: &[u8; 9] = b"BALPMKNN1";
const HEADER_LEN: usize = 9 + 4 + 8;
const RECORD_LEN: usize = 16;

pub fn encode_knn_cache(k: usize, entries: &[(u64, f64)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * entries.len());
    out.extend_from_slice(KNN_CACHE_MAGIC);
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (hash, d) in entries {
        out.extend_from_slice(&hash.to_le_bytes());
        out.extend_from_slice(&d.to_le_bytes());
    }
    out
}

/// Returns `(k, entries)`. Diameters must be finite and non-negative.
pub fn decode_knn_cache(bytes: &[u8]) -> Result<(usize, Vec<(u64, f64)>), EntropyError> {
    if bytes.len() < HEADER_LEN {
        return Err(EntropyError::Cache(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..9] != KNN_CACHE_MAGIC {
        return Err(EntropyError::Cache("bad magic".into()));
    }
    let k = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
    let expected = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(RECORD_LEN))
        .and_then(|b| b.checked_add(HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(EntropyError::Cache(format!(
            "{} records declared but file has {} bytes",
            n,
            bytes.len()
        )));
    }
    if k == 0 {
        return Err(EntropyError::Cache("k = 0".into()));
    }
    let mut entries = Vec::with_capacity(n as usize);
    for (i, rec) in bytes[HEADER_LEN..].chunks_exact(RECORD_LEN).enumerate() {
        let hash = u64::from_le_bytes(rec[..8].try_into().unwrap());
        let d = f64::from_le_bytes(rec[8..].try_into().unwrap());
        if !(d.is_finite() && d >= 0.0) {
            return Err(EntropyError::Cache(format!(
                "record {i} at byte offset {}: diameter {d}",
                HEADER_LEN + i * RECORD_LEN
            )));
        }
        entries.push((hash, d));
    }
    Ok((k, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let e = vec![(1u64, 0.5), (u64::MAX, 0.0), (42, 3.25)];
        let bytes = encode_knn_cache(13, &e);
        assert_eq!(bytes.len(), HEADER_LEN + 3 * RECORD_LEN);
        assert_eq!(decode_knn_cache(&bytes).unwrap(), (13, e));
    }

    #[test]
    fn corruption() {
        let bytes = encode_knn_cache(2, &[(1, 1.0), (2, 2.0)]);
        assert!(decode_knn_cache(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_knn_cache(&bytes[..5]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_knn_cache(&bad).is_err());
        let mut neg = bytes.clone();
        let at = HEADER_LEN + 8;
        neg[at..at + 8].copy_from_slice(&(-1.0f64).to_le_bytes());
        assert!(decode_knn_cache(&neg).is_err());
        let mut huge = bytes;
        huge[13..21].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_knn_cache(&huge).is_err());
    }
}
