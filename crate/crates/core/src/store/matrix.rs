use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::vector;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"CFR1";
pub const EMBEDDING_VERSION: u32 = 1;

/// A dense row-major `count × dim` matrix of `f32` embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Builds a matrix from row-major data, checking shape and finiteness.
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::BadDimension(0));
        }
        if data.len() % dim != 0 {
            return Err(Error::RowCountMismatch {
                expected: data.len().div_ceil(dim),
                found: data.len() / dim,
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { row: pos / dim });
        }
        let mut m = EmbeddingMatrix { dim, data, normalized: false };
        m.normalized = m.check_normalized();
        Ok(m)
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: row.len() });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// L2-normalizes every row. Rows already at unit norm keep their bits.
    pub fn normalize(mut self) -> Result<Self> {
        let dim = self.dim;
        for row in self.data.chunks_exact_mut(dim) {
            if !vector::normalize_in_place(row) {
                return Err(Error::ZeroNorm);
            }
        }
        self.normalized = true;
        Ok(self)
    }

    fn check_normalized(&self) -> bool {
        !self.is_empty() && self.rows().all(|r| (vector::norm(r) - 1.0).abs() <= 1e-5)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&EMBEDDING_MAGIC)?;
        w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a matrix in the `CFR1` format. Values are not normalized here.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != EMBEDDING_MAGIC {
            return Err(Error::BadMagic { expected: EMBEDDING_MAGIC, found: magic });
        }
        let version = read_u32(&mut r)?;
        if version != EMBEDDING_VERSION {
            return Err(Error::BadVersion(version));
        }
        let dim = read_u32(&mut r)? as usize;
        if dim == 0 {
            return Err(Error::BadDimension(0));
        }
        let count = read_u64(&mut r)? as usize;

        let mut data = Vec::with_capacity(count.saturating_mul(dim).min(1 << 26));
        let mut buf = vec![0u8; dim * 4];
        for row in 0..count {
            if let Err(e) = r.read_exact(&mut buf) {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    return Err(Error::RowCountMismatch { expected: count, found: row });
                }
                return Err(e.into());
            }
            for chunk in buf.chunks_exact(4) {
                let x = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                if !x.is_finite() {
                    return Err(Error::NonFinite { row });
                }
                data.push(x);
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::RowCountMismatch { expected: count, found: count + 1 });
        }
        Self::new(dim, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.data.len() * 4);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
