//! Catalog, embedding matrices, query encoding and on-disk formats.
//!
//! A dataset bundle is a directory holding:
//!
//! | file                  | contents                                        |
//! |-----------------------|-------------------------------------------------|
//! | `retrieval.cfr`       | item embeddings seen by the retrieval model     |
//! | `preference.cfr`      | item embeddings seen by the feedback oracle     |
//! | `vocab.cfr`           | token vectors, row `i` ↔ line `i` of vocab.txt |
//! | `vocab.txt`           | one token per line                              |
//! | `items.jsonl`         | item metadata                                   |
//! | `queries.jsonl`       | `{"qid", "target", "text"}` per query           |
//! | `splits.json`         | `{"train": [qid], "test": [qid]}`               |
//! | `query_vectors.cfr`   | optional precomputed query vectors, row = qid   |

mod matrix;
mod synth;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vector;

pub use matrix::{EmbeddingMatrix, EMBEDDING_MAGIC, EMBEDDING_VERSION};
pub use synth::{generate_synthetic, SynthConfig};

pub const RETRIEVAL_FILE: &str = "retrieval.cfr";
pub const PREFERENCE_FILE: &str = "preference.cfr";
pub const VOCAB_FILE: &str = "vocab.cfr";
pub const VOCAB_TOKENS_FILE: &str = "vocab.txt";
pub const ITEMS_FILE: &str = "items.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const QUERY_VECTORS_FILE: &str = "query_vectors.cfr";

/// A catalog entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: usize,
    pub text: String,
    pub attributes: Vec<String>,
    pub image_uri: Option<String>,
}

/// A text query with its (hidden) target item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub qid: usize,
    pub target: usize,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Token → vector table used to encode query text.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: EmbeddingMatrix,
}

impl Vocab {
    pub fn new(tokens: Vec<String>, vectors: EmbeddingMatrix) -> Result<Self> {
        if tokens.len() != vectors.len() {
            return Err(Error::RowCountMismatch { expected: tokens.len(), found: vectors.len() });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            let tok = tok.to_lowercase();
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate vocab token {tok:?}")));
            }
        }
        Ok(Vocab { tokens, index, vectors })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vectors(&self) -> &EmbeddingMatrix {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    pub fn lookup(&self, token: &str) -> Option<&[f32]> {
        self.index.get(token).map(|&i| self.vectors.row(i))
    }
}

/// Encodes query text as the normalized mean of its recognized token vectors.
///
/// Tokens are whitespace-separated and lowercased; unknown tokens are skipped.
pub fn encode_query(text: &str, vocab: &Vocab) -> Result<Vec<f32>> {
    let mut acc = vec![0.0f64; vocab.dim()];
    let mut hits = 0usize;
    for tok in text.split_whitespace() {
        if let Some(v) = vocab.lookup(&tok.to_lowercase()) {
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += x as f64;
            }
            hits += 1;
        }
    }
    if hits == 0 {
        return Err(Error::UnencodableQuery(text.to_string()));
    }
    acc.iter_mut().for_each(|a| *a /= hits as f64);
    if vector::normalize_f64(&mut acc) == 0.0 {
        return Err(Error::UnencodableQuery(text.to_string()));
    }
    Ok(acc.into_iter().map(|x| x as f32).collect())
}

/// Reads an embedding file and its item metadata, validating that they agree.
///
/// Item ids must be unique and dense (`0..n`); row `i` belongs to item `i`.
/// Rows are L2-normalized.
pub fn ingest(embeddings_path: impl AsRef<Path>, metadata_path: impl AsRef<Path>) -> Result<(Vec<Item>, EmbeddingMatrix)> {
    let matrix = EmbeddingMatrix::load(embeddings_path)?.normalize()?;
    let items = read_items(metadata_path)?;
    if items.len() != matrix.len() {
        return Err(Error::RowCountMismatch { expected: items.len(), found: matrix.len() });
    }
    Ok((items, matrix))
}

pub fn read_items(path: impl AsRef<Path>) -> Result<Vec<Item>> {
    let items: Vec<Item> = read_jsonl(path)?;
    let n = items.len();
    let mut slots: Vec<Option<Item>> = vec![None; n];
    for (line, item) in items.into_iter().enumerate() {
        if item.id >= n {
            return Err(Error::Metadata {
                line: line + 1,
                message: format!("id {} is not dense in 0..{n}", item.id),
            });
        }
        let id = item.id;
        if slots[id].replace(item).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("dense ids fill every slot")).collect())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|e| Error::Metadata { line: i + 1, message: e.to_string() })?;
        out.push(value);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl_to(&mut w, values)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_jsonl_to<T: Serialize, W: Write>(w: &mut W, values: &[T]) -> Result<()> {
    for v in values {
        serde_json::to_writer(&mut *w, v)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Immutable catalog plus the embedding spaces and query set built over it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    items: Vec<Item>,
    retrieval_images: EmbeddingMatrix,
    preference_images: EmbeddingMatrix,
    vocab: Vocab,
    queries: Vec<Query>,
    query_vectors: Option<EmbeddingMatrix>,
    splits: Splits,
}

impl Dataset {
    pub fn new(
        items: Vec<Item>,
        retrieval_images: EmbeddingMatrix,
        preference_images: EmbeddingMatrix,
        vocab: Vocab,
        queries: Vec<Query>,
        splits: Splits,
    ) -> Result<Self> {
        let ds = Dataset {
            items,
            retrieval_images: retrieval_images.normalize()?,
            preference_images: preference_images.normalize()?,
            vocab,
            queries,
            query_vectors: None,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Attaches precomputed query vectors (row `i` ↔ query `i`).
    pub fn with_query_vectors(mut self, vectors: EmbeddingMatrix) -> Result<Self> {
        if vectors.len() != self.queries.len() {
            return Err(Error::RowCountMismatch { expected: self.queries.len(), found: vectors.len() });
        }
        if vectors.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: vectors.dim() });
        }
        self.query_vectors = Some(vectors.normalize()?);
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let n = self.items.len();
        for (i, item) in self.items.iter().enumerate() {
            if item.id != i {
                return Err(Error::Metadata { line: i + 1, message: format!("id {} out of order", item.id) });
            }
        }
        for m in [&self.retrieval_images, &self.preference_images] {
            if m.len() != n {
                return Err(Error::RowCountMismatch { expected: n, found: m.len() });
            }
        }
        let dim = self.retrieval_images.dim();
        for d in [self.preference_images.dim(), self.vocab.dim()] {
            if d != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: d });
            }
        }
        for (i, q) in self.queries.iter().enumerate() {
            if q.qid != i {
                return Err(Error::Metadata { line: i + 1, message: format!("qid {} out of order", q.qid) });
            }
            if q.target >= n {
                return Err(Error::InvalidId { id: q.target, n });
            }
        }
        let train: HashSet<usize> = self.splits.train.iter().copied().collect();
        for &qid in self.splits.train.iter().chain(&self.splits.test) {
            if qid >= self.queries.len() {
                return Err(Error::config(format!("split references unknown query {qid}")));
            }
        }
        if let Some(q) = self.splits.test.iter().find(|q| train.contains(q)) {
            return Err(Error::config(format!("query {q} is in both train and test splits")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.retrieval_images.dim()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, id: usize) -> Option<&Item> {
        self.items.get(id)
    }

    pub fn retrieval_images(&self) -> &EmbeddingMatrix {
        &self.retrieval_images
    }

    pub fn preference_images(&self) -> &EmbeddingMatrix {
        &self.preference_images
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn query(&self, qid: usize) -> Option<&Query> {
        self.queries.get(qid)
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// Base (un-adapted) vector of a query: the precomputed row when
    /// available, otherwise the encoded query text.
    pub fn query_vector(&self, qid: usize) -> Result<Vec<f32>> {
        let q = self.query(qid).ok_or(Error::InvalidId { id: qid, n: self.queries.len() })?;
        match &self.query_vectors {
            Some(m) => Ok(m.row(qid).to_vec()),
            None => encode_query(&q.text, &self.vocab),
        }
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.retrieval_images.save(dir.join(RETRIEVAL_FILE))?;
        self.preference_images.save(dir.join(PREFERENCE_FILE))?;
        self.vocab.vectors.save(dir.join(VOCAB_FILE))?;
        let tokens_path = dir.join(VOCAB_TOKENS_FILE);
        std::fs::write(&tokens_path, self.vocab_text()).map_err(|e| Error::io(&tokens_path, e))?;
        write_jsonl(&dir.join(ITEMS_FILE), &self.items)?;
        write_jsonl(&dir.join(QUERIES_FILE), &self.queries)?;
        let splits_path = dir.join(SPLITS_FILE);
        std::fs::write(&splits_path, serde_json::to_vec(&self.splits)?).map_err(|e| Error::io(&splits_path, e))?;
        if let Some(qv) = &self.query_vectors {
            qv.save(dir.join(QUERY_VECTORS_FILE))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (items, retrieval) = ingest(dir.join(RETRIEVAL_FILE), dir.join(ITEMS_FILE))?;
        let preference = EmbeddingMatrix::load(dir.join(PREFERENCE_FILE))?;
        let vocab_vectors = EmbeddingMatrix::load(dir.join(VOCAB_FILE))?;
        let tokens_path = dir.join(VOCAB_TOKENS_FILE);
        let tokens: Vec<String> = std::fs::read_to_string(&tokens_path)
            .map_err(|e| Error::io(&tokens_path, e))?
            .lines()
            .map(str::to_string)
            .collect();
        let vocab = Vocab::new(tokens, vocab_vectors)?;
        let queries: Vec<Query> = read_jsonl(dir.join(QUERIES_FILE))?;
        let splits_path = dir.join(SPLITS_FILE);
        let splits: Splits = serde_json::from_slice(
            &std::fs::read(&splits_path).map_err(|e| Error::io(&splits_path, e))?,
        )?;
        let ds = Dataset::new(items, retrieval, preference, vocab, queries, splits)?;
        let qv_path = dir.join(QUERY_VECTORS_FILE);
        if qv_path.exists() {
            return ds.with_query_vectors(EmbeddingMatrix::load(qv_path)?);
        }
        Ok(ds)
    }

    fn vocab_text(&self) -> String {
        let mut s = String::new();
        for t in &self.vocab.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// SHA-256 over the canonical serialization of every bundle component.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.retrieval_images.to_bytes());
        h.update(self.preference_images.to_bytes());
        h.update(self.vocab.vectors.to_bytes());
        h.update(self.vocab_text().as_bytes());
        let mut buf = Vec::new();
        write_jsonl_to(&mut buf, &self.items).expect("in-memory write");
        write_jsonl_to(&mut buf, &self.queries).expect("in-memory write");
        buf.extend(serde_json::to_vec(&self.splits).expect("splits serialize"));
        h.update(&buf);
        if let Some(qv) = &self.query_vectors {
            h.update(qv.to_bytes());
        }
        hex::encode(h.finalize())
    }
}
