//! Simulated feedback agent.
//!
//! The oracle knows the hidden target and judges candidates in the preference
//! embedding space (never the retrieval space), or by attribute overlap.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranker::Feedback;
use crate::store::Dataset;
use crate::vector;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    #[default]
    PreferenceEmbedding,
    AttributeIou,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub n_like: usize,
    pub n_dislike: usize,
    pub mode: OracleMode,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { n_like: 1, n_dislike: 1, mode: OracleMode::PreferenceEmbedding }
    }
}

/// `|a ∩ b| / |a ∪ b|` over attribute sets.
pub fn attribute_iou<S: AsRef<str>>(a: &[S], b: &[S]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("attribute set"));
    }
    let a: HashSet<&str> = a.iter().map(AsRef::as_ref).collect();
    let b: HashSet<&str> = b.iter().map(AsRef::as_ref).collect();
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// How similar the oracle judges `item` to be to `target`.
pub fn oracle_similarity(item: usize, target: usize, mode: OracleMode, dataset: &Dataset) -> Result<f64> {
    match mode {
        OracleMode::PreferenceEmbedding => {
            let m = dataset.preference_images();
            Ok(vector::dot(m.row(item), m.row(target)))
        }
        OracleMode::AttributeIou => attribute_iou(&dataset.items()[item].attributes, &dataset.items()[target].attributes),
    }
}

/// Likes the `n_like` candidates most similar to the target and dislikes the
/// `n_dislike` least similar of the rest. Ties go to the lower id.
pub fn give_feedback(candidates: &[usize], target: usize, cfg: &OracleConfig, dataset: &Dataset) -> Result<Feedback> {
    let n = dataset.len();
    if candidates.is_empty() {
        return Err(Error::Empty("candidate pool"));
    }
    if target >= n {
        return Err(Error::InvalidId { id: target, n });
    }
    if cfg.n_like + cfg.n_dislike > candidates.len() {
        return Err(Error::config(format!(
            "n_like + n_dislike = {} exceeds candidate pool of {}",
            cfg.n_like + cfg.n_dislike,
            candidates.len()
        )));
    }
    let mut seen = HashSet::with_capacity(candidates.len());
    let mut scored = Vec::with_capacity(candidates.len());
    for &c in candidates {
        if c >= n {
            return Err(Error::InvalidId { id: c, n });
        }
        if !seen.insert(c) {
            return Err(Error::InvalidFeedback(format!("duplicate candidate {c}")));
        }
        scored.push((c, oracle_similarity(c, target, cfg.mode, dataset)?));
    }

    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite similarity").then(a.0.cmp(&b.0)));
    let likes: Vec<usize> = scored[..cfg.n_like].iter().map(|&(id, _)| id).collect();

    let mut rest = scored.split_off(cfg.n_like);
    rest.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite similarity").then(a.0.cmp(&b.0)));
    let dislikes: Vec<usize> = rest[..cfg.n_dislike].iter().map(|&(id, _)| id).collect();

    Ok(Feedback { likes, dislikes })
}
