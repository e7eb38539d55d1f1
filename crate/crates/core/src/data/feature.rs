//! `MSL1` dense matrix files: the 4-byte magic `MSL1`, little-endian `u32`
//! rows and cols, then `rows * cols` little-endian `f32` values, row-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::Real;

const MAGIC: &[u8; 4] = b"MSL1";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_array<T: Real>(a: &Array2<T>) -> Self {
        Self {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a
                .iter()
                .map(|v| v.to_f32().expect("float converts to f32"))
                .collect(),
        }
    }

    pub fn to_array<T: Real>(&self) -> Array2<T> {
        Array2::from_shape_fn((self.rows, self.cols), |(r, c)| {
            T::from_f32(self.data[r * self.cols + c]).expect("f32 converts to float")
        })
    }
}

pub fn write_feature_matrix(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    if let Some(i) = m.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteFeature {
            path: path.to_path_buf(),
            index: i,
        });
    }
    let rows =
        u32::try_from(m.rows).map_err(|_| Error::Shape(format!("{} rows exceed u32", m.rows)))?;
    let cols =
        u32::try_from(m.cols).map_err(|_| Error::Shape(format!("{} cols exceed u32", m.cols)))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * m.data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    Ok((rows, cols))
}

/// Reads only the `(rows, cols)` header.
pub fn read_feature_header(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = Vec::with_capacity(HEADER_LEN);
    f.take(HEADER_LEN as u64)
        .read_to_end(&mut head)
        .map_err(|e| Error::io(path, e))?;
    parse_header(path, &head)
}

pub fn read_feature_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (rows, cols) = parse_header(path, &bytes)?;
    let expected = HEADER_LEN + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteFeature {
            path: path.to_path_buf(),
            index: i,
        });
    }
    Ok(FeatureMatrix { rows, cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_3x4() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.msl");
        let m = FeatureMatrix::new(3, 4, (0..12).map(|i| i as f32 * 0.37 - 1.0).collect()).unwrap();
        write_feature_matrix(&path, &m).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MSL1");
        assert_eq!(bytes.len(), 12 + 48);
        assert_eq!(read_feature_matrix(&path).unwrap(), m);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.msl");
        write_feature_matrix(&path, &FeatureMatrix::new(1, 1, vec![1.0]).unwrap()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        let err = read_feature_matrix(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.msl");
        write_feature_matrix(&path, &FeatureMatrix::new(2, 2, vec![1.0; 4]).unwrap()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_feature_matrix(&path),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn nan_on_load_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.msl");
        let mut bytes = b"MSL1".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_feature_matrix(&path),
            Err(Error::NonFiniteFeature { index: 1, .. })
        ));
    }

    #[test]
    fn tvr_shaped_matrix_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tvr.msl");
        let m = FeatureMatrix::new(128, 3072, vec![0.5; 128 * 3072]).unwrap();
        write_feature_matrix(&path, &m).unwrap();
        let back = read_feature_matrix(&path).unwrap();
        assert_eq!((back.rows, back.cols), (128, 3072));
        assert_eq!(read_feature_header(&path).unwrap(), (128, 3072));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn write_read_is_bit_exact(rows in 1usize..6, cols in 1usize..6, seed in any::<u32>()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.msl");
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| f32::from_bits((seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503)) & 0x3fff_ffff))
                .collect();
            let m = FeatureMatrix::new(rows, cols, data).unwrap();
            write_feature_matrix(&path, &m).unwrap();
            let first = fs::read(&path).unwrap();
            let back = read_feature_matrix(&path).unwrap();
            prop_assert!(back.data.iter().zip(&m.data).all(|(a, b)| a.to_bits() == b.to_bits()));
            write_feature_matrix(&path, &back).unwrap();
            prop_assert_eq!(first, fs::read(&path).unwrap());
        }
    }
}
