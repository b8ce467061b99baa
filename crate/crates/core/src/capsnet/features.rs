//! Binary container for precomputed per-image feature maps.
//!
//! Layout (little-endian): magic `FMAP`, u32 version = 1, u32 record count,
//! then per record: u16 id byte length, UTF-8 id, u8 rank, rank × u32 dims,
//! and product(dims) f32 values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"FMAP";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected \"FMAP\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported feature file version {0}, expected 1")]
    Version(u32),
    #[error("record `{id}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        id: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("truncated feature file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("record id at offset {0} is not valid UTF-8")]
    InvalidId(usize),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("cannot encode record `{id}`: {detail}")]
    Encode { id: String, detail: String },
}

/// Decoded records keyed by image id.
pub type FeatureMap = BTreeMap<String, Tensor>;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FeatureFileError> {
        if self.bytes.len() - self.pos < n {
            return Err(FeatureFileError::Truncated {
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FeatureFileError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FeatureFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, FeatureFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn encode_features<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>, FeatureFileError> {
    let records: Vec<_> = records.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (id, t) in records {
        let id_len = u16::try_from(id.len()).map_err(|_| FeatureFileError::Encode {
            id: id.into(),
            detail: "id longer than 65535 bytes".into(),
        })?;
        let rank = u8::try_from(t.rank()).map_err(|_| FeatureFileError::Encode {
            id: id.into(),
            detail: "rank above 255".into(),
        })?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a feature file, requiring a uniform record shape and, when
/// given, equality with `expected`.
pub fn decode_features(bytes: &[u8], expected: Option<&[usize]>) -> Result<FeatureMap, FeatureFileError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4).map_err(|_| FeatureFileError::BadMagic {
        found: bytes.to_vec(),
    })?;
    if magic != FEATURE_MAGIC {
        return Err(FeatureFileError::BadMagic { found: magic.to_vec() });
    }
    let version = cur.u32()?;
    if version != FEATURE_VERSION {
        return Err(FeatureFileError::Version(version));
    }
    let count = cur.u32()? as usize;
    let mut map = FeatureMap::new();
    let mut shape_seen: Option<Vec<usize>> = expected.map(<[usize]>::to_vec);
    for _ in 0..count {
        let id_len = cur.u16()? as usize;
        let id_at = cur.pos;
        let id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|_| FeatureFileError::InvalidId(id_at))?
            .to_string();
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        match &shape_seen {
            Some(s) if *s != shape => {
                return Err(FeatureFileError::ShapeMismatch {
                    id,
                    expected: s.clone(),
                    found: shape,
                })
            }
            Some(_) => {}
            None => shape_seen = Some(shape.clone()),
        }
        let n: usize = shape.iter().product();
        let payload = cur.take(n * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let tensor = Tensor::new(shape.clone(), data).map_err(|_| FeatureFileError::ShapeMismatch {
            id: id.clone(),
            expected: shape_seen.clone().unwrap_or_default(),
            found: shape,
        })?;
        if map.insert(id.clone(), tensor).is_some() {
            return Err(FeatureFileError::DuplicateId(id));
        }
    }
    if cur.pos != bytes.len() {
        return Err(FeatureFileError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(map)
}

pub fn write_feature_file<'a>(
    path: &Path,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), FeatureFileError> {
    let bytes = encode_features(records)?;
    fs::write(path, bytes).map_err(|source| FeatureFileError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_feature_file(path: &Path, expected: Option<&[usize]>) -> Result<FeatureMap, FeatureFileError> {
    let bytes = fs::read(path).map_err(|source| FeatureFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_features(&bytes, expected)
}

/// Shape shared by all records, if any.
pub fn feature_shape(map: &FeatureMap) -> Option<[usize; 3]> {
    let t = map.values().next()?;
    <[usize; 3]>::try_from(t.shape()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tensor(shape: &[usize], seed: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * seed).sin()).collect()).unwrap()
    }

    #[test]
    fn two_records_decode() {
        let a = tensor(&[8, 4, 4], 0.3);
        let b = tensor(&[8, 4, 4], 0.7);
        let bytes = encode_features([("a", &a), ("b", &b)]).unwrap();
        assert_eq!(&bytes[..4], b"FMAP");
        let map = decode_features(&bytes, Some(&[8, 4, 4])).unwrap();
        assert_eq!(map.len(), 2);
        assert_eq!(feature_shape(&map), Some([8, 4, 4]));
    }

    #[test]
    fn shape_mismatch_names_both() {
        let a = tensor(&[8, 4, 4], 0.3);
        let bytes = encode_features([("a", &a)]).unwrap();
        let err = decode_features(&bytes, Some(&[8, 5, 5])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[8, 4, 4]") && msg.contains("[8, 5, 5]"), "{msg}");
    }

    #[test]
    fn non_uniform_shapes_rejected() {
        let a = tensor(&[2, 2, 2], 0.3);
        let b = tensor(&[2, 3, 2], 0.3);
        let bytes = encode_features([("a", &a), ("b", &b)]).unwrap();
        assert!(matches!(decode_features(&bytes, None), Err(FeatureFileError::ShapeMismatch { .. })));
    }

    #[test]
    fn distinct_errors() {
        let a = tensor(&[2, 2, 2], 0.3);
        let good = encode_features([("a", &a)]).unwrap();

        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(decode_features(&magic, None), Err(FeatureFileError::BadMagic { .. })));

        let mut version = good.clone();
        version[4] = 2;
        assert!(matches!(decode_features(&version, None), Err(FeatureFileError::Version(2))));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(decode_features(truncated, None), Err(FeatureFileError::Truncated { .. })));

        let dup = encode_features([("a", &a), ("a", &a)]).unwrap();
        assert!(matches!(decode_features(&dup, None), Err(FeatureFileError::DuplicateId(_))));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_features(&trailing, None), Err(FeatureFileError::TrailingBytes(1))));
    }

    #[test]
    fn exact_byte_layout() {
        let t = Tensor::new(vec![1, 1, 1], vec![1.5]).unwrap();
        let bytes = encode_features([("ab", &t)]).unwrap();
        let mut want = b"FMAP".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(3);
        for _ in 0..3 {
            want.extend_from_slice(&1u32.to_le_bytes());
        }
        want.extend_from_slice(&1.5f32.to_le_bytes());
        assert_eq!(bytes, want);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact_in_f32(values in proptest::collection::vec(-1e6f32..1e6, 12), id in "[a-z0-9_]{1,12}") {
            let t = Tensor::new(vec![3, 2, 2], values.iter().map(|&v| v as f64).collect()).unwrap();
            let bytes = encode_features([(id.as_str(), &t)]).unwrap();
            let map = decode_features(&bytes, None).unwrap();
            let back = &map[&id];
            for (a, b) in back.data().iter().zip(&values) {
                prop_assert_eq!((*a as f32).to_bits(), b.to_bits());
            }
        }
    }
}
