//! Similarity, feedback-weighted scoring and exact ranking.
//!
//! Scores are `f64`; item vectors stay `f32` with `f64` accumulation. Ties in
//! score are broken by ascending item id, with exact equality only.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::encoder::EncodedCatalog;
use crate::error::{Error, Result};
use crate::store::EmbeddingMatrix;
use crate::vector;

/// Weights of the positive and negative feedback terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankerParams {
    pub lambda_p: f64,
    pub lambda_n: f64,
}

impl Default for RankerParams {
    fn default() -> Self {
        RankerParams { lambda_p: 1.0, lambda_n: 0.5 }
    }
}

impl RankerParams {
    pub fn new(lambda_p: f64, lambda_n: f64) -> Result<Self> {
        let p = RankerParams { lambda_p, lambda_n };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_p", self.lambda_p), ("lambda_n", self.lambda_n)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Liked and disliked item ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub likes: Vec<usize>,
    pub dislikes: Vec<usize>,
}

impl Feedback {
    pub fn new(likes: Vec<usize>, dislikes: Vec<usize>) -> Self {
        Feedback { likes, dislikes }
    }

    pub fn is_empty(&self) -> bool {
        self.likes.is_empty() && self.dislikes.is_empty()
    }

    /// Checks ids are in range and the two lists are disjoint.
    pub fn validate(&self, n: usize) -> Result<()> {
        for &id in self.likes.iter().chain(&self.dislikes) {
            if id >= n {
                return Err(Error::InvalidId { id, n });
            }
        }
        if let Some(id) = self.likes.iter().find(|id| self.dislikes.contains(id)) {
            return Err(Error::InvalidFeedback(format!("item {id} is both liked and disliked")));
        }
        Ok(())
    }
}

/// A permutation of the catalog: `rank[i]` is the 1-based rank of item `i`,
/// `order` lists item ids best-first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ranking {
    pub rank: Vec<usize>,
    pub order: Vec<usize>,
}

/// Cosine similarity.
pub fn similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), found: v.len() });
    }
    let (nu, nv) = (vector::norm(u), vector::norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((vector::dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Mean cosine similarity between `v` and each member of `group`.
pub fn group_similarity(v: &[f32], group: &[&[f32]]) -> Result<f64> {
    if group.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let mut sum = 0.0;
    for g in group {
        sum += similarity(v, g)?;
    }
    Ok(sum / group.len() as f64)
}

fn check_dim(query: &[f32], rows: &EmbeddingMatrix) -> Result<()> {
    if query.len() != rows.dim() {
        return Err(Error::DimensionMismatch { expected: rows.dim(), found: query.len() });
    }
    Ok(())
}

/// Text-only relevance: `score[i] = S(v_i, v_q)` over unit-norm rows.
pub fn score_no_feedback(query: &[f32], catalog: &EncodedCatalog) -> Result<Vec<f64>> {
    let rows = catalog.crossmodal();
    check_dim(query, rows)?;
    Ok(rows.rows().map(|r| vector::dot(r, query)).collect())
}

/// Mean similarity of every row to the rows listed in `group`.
fn group_scores(rows: &EmbeddingMatrix, group: &[usize]) -> Vec<f64> {
    let members: Vec<&[f32]> = group.iter().map(|&g| rows.row(g)).collect();
    let k = members.len() as f64;
    rows.rows().map(|r| members.iter().map(|m| vector::dot(r, m)).sum::<f64>() / k).collect()
}

/// Feedback-weighted relevance:
/// `score[i] = S(v_i, v_q) + λp·S(v_i, likes) − λn·S(v_i, dislikes)`.
///
/// Feedback similarities use the catalog's unimodal rows. An empty feedback
/// list contributes nothing.
pub fn score_with_feedback(
    query: &[f32],
    feedback: &Feedback,
    params: &RankerParams,
    catalog: &EncodedCatalog,
) -> Result<Vec<f64>> {
    params.validate()?;
    feedback.validate(catalog.len())?;
    let mut scores = score_no_feedback(query, catalog)?;
    apply_feedback(&mut scores, feedback, params, catalog);
    Ok(scores)
}

/// Adds the feedback terms to precomputed text scores.
pub(crate) fn apply_feedback(scores: &mut [f64], feedback: &Feedback, params: &RankerParams, catalog: &EncodedCatalog) {
    let uni = catalog.unimodal();
    if !feedback.likes.is_empty() {
        for (s, g) in scores.iter_mut().zip(group_scores(uni, &feedback.likes)) {
            *s += params.lambda_p * g;
        }
    }
    if !feedback.dislikes.is_empty() {
        for (s, g) in scores.iter_mut().zip(group_scores(uni, &feedback.dislikes)) {
            *s -= params.lambda_n * g;
        }
    }
}

/// Best-first ordering: higher score, then lower id.
#[inline]
pub(crate) fn best_first(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b))
}

fn check_finite(scores: &[f64]) -> Result<()> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(Error::NonFiniteScore(i)),
        None => Ok(()),
    }
}

pub fn rank(scores: &[f64]) -> Result<Ranking> {
    check_finite(scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| best_first(scores, a, b));
    let mut rank = vec![0; scores.len()];
    for (pos, &id) in order.iter().enumerate() {
        rank[id] = pos + 1;
    }
    Ok(Ranking { rank, order })
}

/// The first `k` entries of `rank(scores).order`, without a full sort.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    check_finite(scores)?;
    let mut ids: Vec<usize> = (0..n).collect();
    if k < n {
        ids.select_nth_unstable_by(k - 1, |&a, &b| best_first(scores, a, b));
        ids.truncate(k);
    }
    ids.sort_unstable_by(|&a, &b| best_first(scores, a, b));
    Ok(ids)
}

/// 1-based rank of a single item, consistent with [`rank`].
pub fn rank_of(scores: &[f64], item: usize) -> Result<usize> {
    if item >= scores.len() {
        return Err(Error::InvalidId { id: item, n: scores.len() });
    }
    check_finite(scores)?;
    let s = scores[item];
    Ok(1 + scores.iter().enumerate().filter(|&(i, &x)| x > s || (x == s && i < item)).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const R: f32 = std::f32::consts::FRAC_1_SQRT_2;

    fn catalog(rows: &[Vec<f32>]) -> EncodedCatalog {
        let m = EmbeddingMatrix::from_rows(rows[0].len(), rows).unwrap().normalize().unwrap();
        let stack = crate::encoder::EncoderStack::identity(m.dim(), false);
        EncodedCatalog::from_matrix(&m, &stack).unwrap()
    }

    #[test]
    fn similarity_cases() {
        assert_eq!(similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((similarity(&[R, R], &[1.0, 0.0]).unwrap() - 0.70711).abs() < 1e-5);
        assert!(matches!(similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn group_similarity_cases() {
        let g = [1.0f32, 0.0];
        assert_eq!(group_similarity(&[R, R], &[&g]).unwrap(), similarity(&[R, R], &g).unwrap());
        assert_eq!(group_similarity(&[1.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(), 0.5);
        assert!(matches!(group_similarity(&[1.0, 0.0], &[]), Err(Error::EmptyGroup)));
    }

    #[test]
    fn no_feedback_hand_computed() {
        let cat = catalog(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![R, R]]);
        let s = score_no_feedback(&[1.0, 0.0], &cat).unwrap();
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], 0.0);
        assert!((s[2] - R as f64).abs() < 1e-7);
        assert!(score_no_feedback(&[1.0, 0.0, 0.0], &cat).is_err());
    }

    #[test]
    fn identical_items_score_equally() {
        let cat = catalog(&vec![vec![0.3, 0.4, 0.5]; 4]);
        let s = score_no_feedback(&[0.0, 1.0, 0.0], &cat).unwrap();
        assert!(s.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn zero_lambdas_reduce_to_text_scores() {
        let cat = catalog(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![R, R]]);
        let fb = Feedback::new(vec![1], vec![2]);
        let s0 = score_no_feedback(&[R, R], &cat).unwrap();
        let s1 = score_with_feedback(&[R, R], &fb, &RankerParams::new(0.0, 0.0).unwrap(), &cat).unwrap();
        assert_eq!(s0, s1);
    }

    #[test]
    fn feedback_validation() {
        let cat = catalog(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let p = RankerParams::default();
        assert!(score_with_feedback(&[1.0, 0.0], &Feedback::new(vec![5], vec![]), &p, &cat).is_err());
        assert!(score_with_feedback(&[1.0, 0.0], &Feedback::new(vec![1], vec![1]), &p, &cat).is_err());
        assert!(RankerParams::new(-1.0, 0.0).is_err());
        assert!(RankerParams::new(1.0, f64::NAN).is_err());
    }

    #[test]
    fn rank_hand_sort() {
        let r = rank(&[0.1, 0.9, 0.5]).unwrap();
        assert_eq!(r.order, vec![1, 2, 0]);
        assert_eq!(r.rank, vec![3, 1, 2]);
        assert_eq!(rank(&[0.2; 5]).unwrap().order, vec![0, 1, 2, 3, 4]);
        assert!(matches!(rank(&[0.0, f64::NAN]), Err(Error::NonFiniteScore(1))));
    }

    #[test]
    fn signed_zero_ties_by_id() {
        assert_eq!(rank(&[0.0, -0.0]).unwrap().order, vec![0, 1]);
        assert_eq!(rank(&[-0.0, 0.0]).unwrap().order, vec![0, 1]);
    }

    #[test]
    fn top_k_edges() {
        let s = [0.3, 0.7, 0.7, 0.1];
        assert_eq!(top_k(&s, 4).unwrap(), rank(&s).unwrap().order);
        assert_eq!(top_k(&s, 1).unwrap(), vec![1]);
        assert!(matches!(top_k(&s, 0), Err(Error::KOutOfRange { .. })));
        assert!(matches!(top_k(&s, 5), Err(Error::KOutOfRange { .. })));
    }

    fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
        // Small integer grid so ties are common.
        prop::collection::vec((-5i32..5).prop_map(|x| x as f64 * 0.25), 1..60)
    }

    proptest! {
        #[test]
        fn rank_is_a_permutation(scores in scores_strategy()) {
            let r = rank(&scores).unwrap();
            let mut seen = r.rank.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (1..=scores.len()).collect::<Vec<_>>());
            for (pos, &id) in r.order.iter().enumerate() {
                prop_assert_eq!(r.rank[id], pos + 1);
                prop_assert_eq!(rank_of(&scores, id).unwrap(), pos + 1);
            }
        }

        #[test]
        fn rank_is_shift_and_scale_invariant(scores in scores_strategy(), shift in -3i32..3, scale in 1u32..8) {
            let moved: Vec<f64> = scores.iter().map(|s| s * scale as f64 + shift as f64).collect();
            prop_assert_eq!(rank(&scores).unwrap(), rank(&moved).unwrap());
        }

        #[test]
        fn top_k_is_rank_prefix(scores in scores_strategy(), k in 1usize..60) {
            let k = k.min(scores.len());
            prop_assert_eq!(top_k(&scores, k).unwrap(), rank(&scores).unwrap().order[..k].to_vec());
        }

        #[test]
        fn group_similarity_is_bounded(v in prop::collection::vec(-1.0f32..1.0, 4), g in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 1..5)) {
            prop_assume!(vector::norm(&v) > 1e-3 && g.iter().all(|r| vector::norm(r) > 1e-3));
            let refs: Vec<&[f32]> = g.iter().map(|r| r.as_slice()).collect();
            let s = group_similarity(&v, &refs).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
