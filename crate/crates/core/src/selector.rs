//! Choice of the candidate pool shown to the feedback agent.
//!
//! With `lambda_diversity = 0` the pool is the plain top-k. Otherwise items
//! are picked greedily, each maximizing its relevance score minus
//! `lambda_diversity` times its mean similarity to the items already picked.

use serde::{Deserialize, Serialize};

use crate::encoder::EncodedCatalog;
use crate::error::{Error, Result};
use crate::ranker::top_k;
use crate::vector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub k: usize,
    pub lambda_diversity: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig { k: 10, lambda_diversity: 0.0 }
    }
}

impl SelectorConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 || self.k > n {
            return Err(Error::KOutOfRange { k: self.k, n });
        }
        if !(self.lambda_diversity.is_finite() && self.lambda_diversity >= 0.0) {
            return Err(Error::config("lambda_diversity must be finite and >= 0"));
        }
        Ok(())
    }
}

pub fn select_candidates(scores: &[f64], catalog: &EncodedCatalog, cfg: &SelectorConfig) -> Result<Vec<usize>> {
    select_candidates_excluding(scores, catalog, cfg, None)
}

/// Like [`select_candidates`], but never picks `exclude`.
pub fn select_candidates_excluding(
    scores: &[f64],
    catalog: &EncodedCatalog,
    cfg: &SelectorConfig,
    exclude: Option<usize>,
) -> Result<Vec<usize>> {
    let n = scores.len();
    if n != catalog.len() {
        return Err(Error::DimensionMismatch { expected: catalog.len(), found: n });
    }
    let available = n - exclude.filter(|&e| e < n).map_or(0, |_| 1);
    cfg.validate(available)?;

    if cfg.lambda_diversity == 0.0 {
        let extra = usize::from(exclude.is_some_and(|e| e < n) && cfg.k < n);
        let mut picked = top_k(scores, cfg.k + extra)?;
        picked.retain(|&i| Some(i) != exclude);
        picked.truncate(cfg.k);
        return Ok(picked);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore(i));
    }

    let rows = catalog.crossmodal();
    let mut taken = vec![false; n];
    if let Some(e) = exclude.filter(|&e| e < n) {
        taken[e] = true;
    }
    // Running sum of similarities to the picked items, per candidate.
    let mut sim_sum = vec![0.0f64; n];
    let mut picked: Vec<usize> = Vec::with_capacity(cfg.k);
    while picked.len() < cfg.k {
        let denom = picked.len().max(1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let objective = scores[i] - cfg.lambda_diversity * sim_sum[i] / denom;
            if best.is_none_or(|(_, b)| objective > b) {
                best = Some((i, objective));
            }
        }
        let (choice, _) = best.expect("k <= available items");
        taken[choice] = true;
        picked.push(choice);
        let chosen_row = rows.row(choice);
        for (i, s) in sim_sum.iter_mut().enumerate() {
            if !taken[i] {
                *s += vector::dot(rows.row(i), chosen_row);
            }
        }
    }
    Ok(picked)
}
