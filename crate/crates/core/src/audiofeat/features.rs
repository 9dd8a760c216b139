use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffcore::{read_u32, Tensor};
use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 4] = b"SFTR";
const FEATURE_VERSION: u32 = 1;

/// Row-major `rows×cols` float matrix, stored on disk as an `SFTR` file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(
                "feature_matrix",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("feature_matrix", "ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Columns `start..end` of every row.
    pub fn columns(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.cols {
            return Err(Error::invalid(
                "feature_matrix",
                format!("columns {start}..{end} out of range for {} columns", self.cols),
            ));
        }
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for r in self.iter_rows() {
            data.extend_from_slice(&r[start..end]);
        }
        Self::new(self.rows, end - start, data)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.rows, self.cols], self.data.clone()).expect("consistent shape")
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        for v in [FEATURE_VERSION, self.rows as u32, self.cols as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::Format {
                kind: "SFTR",
                msg: format!("bad magic {magic:?}"),
            });
        }
        let version = read_u32(r)?;
        if version != FEATURE_VERSION {
            return Err(Error::Format {
                kind: "SFTR",
                msg: format!("unsupported version {version}"),
            });
        }
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let mut bytes = vec![0u8; rows * cols * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(rows, cols, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = FeatureMatrix::new(2, 1, vec![1.0, 0.0]).unwrap();
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SFTR");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 24);
    }

    proptest! {
        #[test]
        fn roundtrip(rows in 0usize..6, cols in 1usize..6, seed in 0u32..100) {
            let data = (0..rows * cols).map(|i| (i as f32 + seed as f32).cos()).collect();
            let m = FeatureMatrix::new(rows, cols, data).unwrap();
            let mut buf = Vec::new();
            m.write(&mut buf).unwrap();
            prop_assert_eq!(FeatureMatrix::read(&mut buf.as_slice()).unwrap(), m);
        }
    }
}
