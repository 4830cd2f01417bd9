//! Linear adapters over frozen base embeddings, and the encoded catalog the
//! ranker scores against.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::store::{Dataset, EmbeddingMatrix};
use crate::vector;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CFA1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A `dim × dim` linear map; the adapted embedding of `v` is `normalize(W v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    dim: usize,
    weight: Vec<f32>,
}

impl Adapter {
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Adapter { dim, weight }
    }

    pub fn from_weight(dim: usize, weight: Vec<f32>) -> Result<Self> {
        if weight.len() != dim * dim {
            return Err(Error::DimensionMismatch { expected: dim * dim, found: weight.len() });
        }
        if let Some(pos) = weight.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { row: pos / dim });
        }
        Ok(Adapter { dim, weight })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    pub fn is_identity(&self) -> bool {
        *self == Adapter::identity(self.dim)
    }

    /// Returns `normalize(W v)`.
    pub fn apply(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: v.len() });
        }
        let mut out: Vec<f32> = self.weight.chunks_exact(self.dim).map(|row| vector::dot(row, v) as f32).collect();
        if !vector::normalize_in_place(&mut out) {
            return Err(Error::ZeroNorm);
        }
        Ok(out)
    }

    fn apply_all(&self, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if self.is_identity() {
            return m.clone().normalize();
        }
        let rows: Vec<Vec<f32>> = m.rows().collect::<Vec<_>>().par_iter().map(|r| self.apply(r)).collect::<Result<_>>()?;
        EmbeddingMatrix::from_rows(self.dim, &rows)
    }
}

/// The trainable adapters of the retrieval model.
///
/// Without separate encoders a single image adapter serves both text→image
/// and image→image similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    pub text: Adapter,
    pub image_crossmodal: Adapter,
    pub image_unimodal: Option<Adapter>,
}

impl EncoderStack {
    pub fn identity(dim: usize, sep_enc: bool) -> Self {
        EncoderStack {
            text: Adapter::identity(dim),
            image_crossmodal: Adapter::identity(dim),
            image_unimodal: sep_enc.then(|| Adapter::identity(dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.text.dim()
    }

    pub fn sep_enc(&self) -> bool {
        self.image_unimodal.is_some()
    }

    /// Adapter used for image→image (feedback) similarity.
    pub fn unimodal(&self) -> &Adapter {
        self.image_unimodal.as_ref().unwrap_or(&self.image_crossmodal)
    }

    pub fn encode_query(&self, base: &[f32]) -> Result<Vec<f32>> {
        self.text.apply(base)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        w.write_all(&[self.sep_enc() as u8])?;
        let mut adapters = vec![&self.text, &self.image_crossmodal];
        adapters.extend(self.image_unimodal.as_ref());
        for a in adapters {
            for x in &a.weight {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadVersion(version));
        }
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        if dim == 0 {
            return Err(Error::BadDimension(0));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let sep_enc = match flag[0] {
            0 => false,
            1 => true,
            other => return Err(Error::config(format!("bad sep_enc flag {other}"))),
        };
        let read_adapter = |r: &mut R| -> Result<Adapter> {
            let mut buf = vec![0u8; dim * dim * 4];
            r.read_exact(&mut buf)?;
            let weight = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Adapter::from_weight(dim, weight)
        };
        let text = read_adapter(&mut r)?;
        let image_crossmodal = read_adapter(&mut r)?;
        let image_unimodal = if sep_enc { Some(read_adapter(&mut r)?) } else { None };
        Ok(EncoderStack { text, image_crossmodal, image_unimodal })
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
}

/// Item embeddings after the image adapters have been applied.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCatalog {
    crossmodal: EmbeddingMatrix,
    unimodal: Option<EmbeddingMatrix>,
}

impl EncodedCatalog {
    /// Encodes the retrieval embeddings of `dataset` through `stack`.
    pub fn new(dataset: &Dataset, stack: &EncoderStack) -> Result<Self> {
        Self::from_matrix(dataset.retrieval_images(), stack)
    }

    pub fn from_matrix(base: &EmbeddingMatrix, stack: &EncoderStack) -> Result<Self> {
        if base.dim() != stack.dim() {
            return Err(Error::DimensionMismatch { expected: stack.dim(), found: base.dim() });
        }
        let crossmodal = stack.image_crossmodal.apply_all(base)?;
        let unimodal = stack.image_unimodal.as_ref().map(|a| a.apply_all(base)).transpose()?;
        Ok(EncodedCatalog { crossmodal, unimodal })
    }

    /// Base embeddings used as-is (identity adapters, no SepEnc).
    pub fn plain(dataset: &Dataset) -> Self {
        EncodedCatalog { crossmodal: dataset.retrieval_images().clone(), unimodal: None }
    }

    pub fn len(&self) -> usize {
        self.crossmodal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.crossmodal.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.crossmodal.dim()
    }

    /// Rows compared against the query.
    pub fn crossmodal(&self) -> &EmbeddingMatrix {
        &self.crossmodal
    }

    /// Rows compared against feedback images.
    pub fn unimodal(&self) -> &EmbeddingMatrix {
        self.unimodal.as_ref().unwrap_or(&self.crossmodal)
    }
}

/// An encoder stack together with the catalog encoded through it.
#[derive(Clone, Debug, PartialEq)]
pub struct Retriever {
    stack: EncoderStack,
    catalog: EncodedCatalog,
}

impl Retriever {
    pub fn new(dataset: &Dataset, stack: EncoderStack) -> Result<Self> {
        let catalog = EncodedCatalog::new(dataset, &stack)?;
        Ok(Retriever { stack, catalog })
    }

    /// Identity adapters without separate encoders.
    pub fn plain(dataset: &Dataset) -> Self {
        Retriever { stack: EncoderStack::identity(dataset.dim(), false), catalog: EncodedCatalog::plain(dataset) }
    }

    pub fn stack(&self) -> &EncoderStack {
        &self.stack
    }

    pub fn catalog(&self) -> &EncodedCatalog {
        &self.catalog
    }

    /// Applies the text adapter to a base query vector.
    pub fn query(&self, base: &[f32]) -> Result<Vec<f32>> {
        self.stack.encode_query(base)
    }
}
