//! The `DPT1` tensor container: magic `DPT1`, rank as one byte, extents as
//! little-endian u64, then the payload as little-endian IEEE-754 f32,
//! row-major. Values are stored single precision; the in-memory tensors are
//! double precision, so read-after-write is exact at the byte level.

use std::path::Path;

use dualview_core::tensor::Tensor;

use crate::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"DPT1";

/// Serialize a tensor (f64 values narrowed to f32).
pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 1 + 8 * t.rank() + 4 * t.numel());
    out.extend_from_slice(&MAGIC);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parse a `DPT1` byte buffer. The buffer must contain exactly the header
/// plus the payload, and every payload value must be finite.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let corrupt = |detail: &str| CliError::corrupt(path, detail);
    if bytes.len() < 5 {
        return Err(corrupt("shorter than the fixed header"));
    }
    if bytes[..4] != MAGIC {
        return Err(CliError::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("magic {:?}, expected \"DPT1\"", &bytes[..4]),
        });
    }
    let rank = bytes[4] as usize;
    let mut pos = 5;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let end = pos + 8;
        let dim = bytes
            .get(pos..end)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| corrupt("header truncated inside the dims"))?;
        shape.push(dim as usize);
        pos = end;
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[pos..];
    if payload.len() != count * 4 {
        return Err(corrupt(&format!(
            "payload is {} bytes, header wants {}",
            payload.len(),
            count * 4
        )));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(corrupt("non-finite payload value"));
        }
        data.push(v as f64);
    }
    Tensor::new(shape, data).map_err(CliError::Core)
}

/// Write a tensor file atomically.
pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    crate::atomic_write(path, &to_bytes(t))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dualview_core::Rng;
    use std::path::PathBuf;

    fn here() -> PathBuf {
        PathBuf::from("test.dpt")
    }

    #[test]
    fn bytes_round_trip_is_identity() {
        let mut rng = Rng::new(5);
        for rank in 0..4 {
            let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.next_below(4)).collect();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| (rng.next_signed() * 100.0) as f32 as f64).collect();
            let t = Tensor::new(shape, data).unwrap();
            let bytes = to_bytes(&t);
            let back = from_bytes(&bytes, &here()).unwrap();
            assert_eq!(back, t);
            assert_eq!(to_bytes(&back), bytes);
        }
    }

    #[test]
    fn byte_layout_is_pinned() {
        // Wire contract: "DPT1", rank u8, dims u64 LE, payload f32 LE.
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut want = b"DPT1".to_vec();
        want.push(2);
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(to_bytes(&t), want);
        // And independently assembled bytes parse back to the same tensor.
        assert_eq!(from_bytes(&want, &here()).unwrap(), t);
    }

    #[test]
    fn rejects_bad_magic_truncation_and_trailing_bytes() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = to_bytes(&t);
        bytes[0] = b'X';
        assert!(matches!(
            from_bytes(&bytes, &here()),
            Err(CliError::UnsupportedFormat { .. })
        ));

        let bytes = to_bytes(&t);
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 1], &here()),
            Err(CliError::CorruptFile { .. })
        ));

        let mut bytes = to_bytes(&t);
        bytes.push(0);
        assert!(matches!(
            from_bytes(&bytes, &here()),
            Err(CliError::CorruptFile { .. })
        ));
    }

    #[test]
    fn rejects_non_finite_payload() {
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut bytes = to_bytes(&t);
        let nan = f32::NAN.to_le_bytes();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&nan);
        assert!(matches!(
            from_bytes(&bytes, &here()),
            Err(CliError::CorruptFile { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join("dualview-dpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.dpt");
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 7.5, -0.125]).unwrap();
        write(&path, &t).unwrap();
        assert_eq!(read(&path).unwrap(), t);
        let on_disk = std::fs::read(&path).unwrap();
        assert_eq!(on_disk, to_bytes(&t));
    }
}
