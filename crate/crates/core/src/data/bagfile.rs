//! The `SMB1` bag file: magic, version, `M`, `d_h` (all u32 LE after the
//! magic) followed by `M·d_h` little-endian f32 values, row-major.

use std::fs;
use std::path::Path;

use crate::data::Bag;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BAG_MAGIC: &[u8; 4] = b"SMB1";
pub const BAG_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_bag(bag: &Bag) -> Result<Vec<u8>> {
    let (m, d) = bag.features.dims2()?;
    let (m32, d32) = match (u32::try_from(m), u32::try_from(d)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return Err(Error::Parameter(format!("bag {m}x{d} exceeds u32 extents"))),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m * d);
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&BAG_VERSION.to_le_bytes());
    out.extend_from_slice(&m32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for v in bag.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses a bag file body. The bag id and label are supplied by the caller
/// because the file stores features only.
pub fn decode_bag(bytes: &[u8], bag_id: &str, label: usize) -> Result<Bag> {
    if bytes.len() < 4 || &bytes[..4] != BAG_MAGIC {
        return Err(Error::Format(format!("{bag_id}: bad magic, expected SMB1")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32_at(bytes, 4);
    if version != BAG_VERSION {
        return Err(Error::Format(format!("{bag_id}: unsupported version {version}")));
    }
    let m = u32_at(bytes, 8) as u64;
    let d = u32_at(bytes, 12) as u64;
    if m == 0 || d == 0 {
        return Err(Error::Format(format!("{bag_id}: empty bag {m}x{d}")));
    }
    let expected = HEADER_LEN as u64 + 4 * m * d;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }
    if (bytes.len() as u64) > expected {
        return Err(Error::Format(format!(
            "{bag_id}: {} trailing bytes",
            bytes.len() as u64 - expected
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let features = Tensor::new(vec![m as usize, d as usize], data)?;
    Bag::new(bag_id, features, label)
}

pub fn write_bag_file(bag: &Bag, path: &Path) -> Result<()> {
    let bytes = encode_bag(bag)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bag_file(path: &Path) -> Result<Bag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_bag(&bytes, &id, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let f = Tensor::new(vec![1, 2], vec![1.0f32, -2.5]).unwrap();
        let bytes = encode_bag(&Bag::new("b", f, 0).unwrap()).unwrap();
        assert_eq!(&bytes[..4], b"SMB1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = b"XXXX".to_vec();
        bytes.extend_from_slice(&[0; 12]);
        assert!(matches!(decode_bag(&bytes, "x", 0), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_rows() {
        let f = Tensor::new(vec![50, 2], vec![0.5f32; 100]).unwrap();
        let mut bytes = encode_bag(&Bag::new("b", f, 0).unwrap()).unwrap();
        bytes[8..12].copy_from_slice(&100u32.to_le_bytes());
        assert!(matches!(
            decode_bag(&bytes, "b", 0),
            Err(Error::Truncated { expected: 816, found: 416 })
        ));
        assert!(matches!(decode_bag(b"SMB1\x01", "b", 0), Err(Error::Truncated { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bag7.smb");
        let f = Tensor::new(vec![3, 2], vec![0.1f32, 2.0, -3.0, 4.5, 1e-30, -0.0]).unwrap();
        let bag = Bag::new("bag7", f, 0).unwrap();
        write_bag_file(&bag, &p).unwrap();
        let back = read_bag_file(&p).unwrap();
        assert_eq!(back.bag_id, "bag7");
        assert_eq!(back.features.shape(), &[3, 2]);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.features), bits(&bag.features));
        assert!(read_bag_file(&dir.path().join("missing.smb")).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            m in 1usize..20,
            d in 1usize..10,
            seed in proptest::collection::vec(any::<u32>(), 200),
        ) {
            let data: Vec<f32> = (0..m * d)
                .map(|i| {
                    let v = f32::from_bits(seed[i % seed.len()]);
                    if v.is_finite() { v } else { 1.0 }
                })
                .collect();
            let bag = Bag::new("p", Tensor::new(vec![m, d], data).unwrap(), 1).unwrap();
            let back = decode_bag(&encode_bag(&bag).unwrap(), "p", 1).unwrap();
            let a: Vec<u32> = bag.features.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.features.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
