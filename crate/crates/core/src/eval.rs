//! Retrieval metrics, the three-step feedback protocol and ablation sweeps.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::de::Deserializer;
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::Retriever;
use crate::error::{Error, Result};
use crate::oracle::{give_feedback, OracleConfig};
use crate::ranker::{apply_feedback, rank_of, score_no_feedback, RankerParams};
use crate::selector::{select_candidates_excluding, SelectorConfig};
use crate::store::Dataset;

fn check_ranks(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::Empty("rank list"));
    }
    if ranks.contains(&0) {
        return Err(Error::config("ranks are 1-based"));
    }
    Ok(())
}

/// Fraction of ranks `r` with `r <= k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::config("K must be >= 1"));
    }
    check_ranks(ranks)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Median rank; the lower-middle element for even counts.
pub fn median_rank(ranks: &[usize]) -> Result<usize> {
    check_ranks(ranks)?;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    Ok(sorted[(sorted.len() - 1) / 2])
}

pub fn mean_rank(ranks: &[usize]) -> Result<f64> {
    check_ranks(ranks)?;
    Ok(ranks.iter().map(|&r| r as f64).sum::<f64>() / ranks.len() as f64)
}

/// R@K values keyed by K, serialized as a JSON object in ascending K.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallTable(pub Vec<(usize, f64)>);

impl RecallTable {
    pub fn get(&self, k: usize) -> Option<f64> {
        self.0.iter().find(|(kk, _)| *kk == k).map(|&(_, v)| v)
    }
}

impl Serialize for RecallTable {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(&k.to_string(), v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for RecallTable {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = std::collections::BTreeMap::<String, f64>::deserialize(d)?;
        let mut out = Vec::with_capacity(raw.len());
        for (k, v) in raw {
            out.push((k.parse().map_err(serde::de::Error::custom)?, v));
        }
        out.sort_by_key(|&(k, _)| k);
        Ok(RecallTable(out))
    }
}

/// Aggregate metrics for one stage of the protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub r_at: RecallTable,
    pub medr: usize,
    pub meanr: f64,
}

impl StageMetrics {
    pub fn compute(ranks: &[usize], ks: &[usize]) -> Result<Self> {
        let r_at = ks.iter().map(|&k| Ok((k, recall_at_k(ranks, k)?))).collect::<Result<_>>()?;
        Ok(StageMetrics { r_at: RecallTable(r_at), medr: median_rank(ranks)?, meanr: mean_rank(ranks)? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub ranker: RankerParams,
    pub oracle: OracleConfig,
    pub selector: SelectorConfig,
    pub recall_ks: Vec<usize>,
    /// Keep the target out of the pool shown to the oracle.
    #[serde(default)]
    pub exclude_target_feedback: bool,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            ranker: RankerParams::default(),
            oracle: OracleConfig::default(),
            selector: SelectorConfig::default(),
            recall_ks: vec![1, 5, 10],
            exclude_target_feedback: false,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self, n: usize) -> Result<()> {
        self.ranker.validate()?;
        self.selector.validate(n)?;
        if self.recall_ks.is_empty() || self.recall_ks.contains(&0) || !self.recall_ks.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("recall_ks must be non-empty, ascending and >= 1"));
        }
        if self.oracle.n_like + self.oracle.n_dislike > self.selector.k {
            return Err(Error::config("n_like + n_dislike exceeds candidate pool size k"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub qid: usize,
    pub rank_before: usize,
    pub rank_after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub params: ProtocolParams,
    pub seed: u64,
    pub baseline: StageMetrics,
    pub feedback: StageMetrics,
    pub per_query: Vec<QueryOutcome>,
    pub wall_time_ms: u64,
}

impl Report {
    pub fn ranks_before(&self) -> Vec<usize> {
        self.per_query.iter().map(|q| q.rank_before).collect()
    }

    pub fn ranks_after(&self) -> Vec<usize> {
        self.per_query.iter().map(|q| q.rank_after).collect()
    }

    /// SHA-256 of the report JSON with wall time zeroed.
    pub fn checksum(&self) -> String {
        let canonical = Report { wall_time_ms: 0, ..self.clone() };
        hex::encode(Sha256::digest(serde_json::to_vec(&canonical).expect("report serializes")))
    }
}

/// Target ranks of one query before and after a round of simulated feedback.
pub fn evaluate_query(dataset: &Dataset, retriever: &Retriever, qid: usize, params: &ProtocolParams) -> Result<QueryOutcome> {
    let query = dataset.query(qid).ok_or(Error::InvalidId { id: qid, n: dataset.queries().len() })?;
    let target = query.target;
    let qvec = retriever.query(&dataset.query_vector(qid)?)?;
    let catalog = retriever.catalog();

    let mut scores = score_no_feedback(&qvec, catalog)?;
    let rank_before = rank_of(&scores, target)?;

    let exclude = params.exclude_target_feedback.then_some(target);
    let pool = select_candidates_excluding(&scores, catalog, &params.selector, exclude)?;
    let feedback = give_feedback(&pool, target, &params.oracle, dataset)?;

    apply_feedback(&mut scores, &feedback, &params.ranker, catalog);
    let rank_after = rank_of(&scores, target)?;
    Ok(QueryOutcome { qid, rank_before, rank_after })
}

/// Runs the retrieve → feedback → re-rank protocol over `split`.
///
/// Queries are evaluated in parallel and merged in split order. The protocol
/// itself draws no randomness; `seed` is recorded for provenance.
pub fn run_protocol(dataset: &Dataset, retriever: &Retriever, split: &[usize], params: &ProtocolParams, seed: u64) -> Result<Report> {
    if split.is_empty() {
        return Err(Error::Empty("split"));
    }
    params.validate(dataset.len())?;
    let start = Instant::now();
    let per_query: Vec<QueryOutcome> =
        split.par_iter().map(|&qid| evaluate_query(dataset, retriever, qid, params)).collect::<Result<_>>()?;
    let before: Vec<usize> = per_query.iter().map(|q| q.rank_before).collect();
    let after: Vec<usize> = per_query.iter().map(|q| q.rank_after).collect();
    Ok(Report {
        params: params.clone(),
        seed,
        baseline: StageMetrics::compute(&before, &params.recall_ks)?,
        feedback: StageMetrics::compute(&after, &params.recall_ks)?,
        per_query,
        wall_time_ms: start.elapsed().as_millis() as u64,
    })
}

/// Parameter sweeps mirroring the published ablation tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationGrid {
    /// Positive vs. negative feedback weights.
    Lambda,
    /// Number of liked / disliked items.
    Count,
    /// Diversity weight of the candidate selector.
    Diversity,
}

impl AblationGrid {
    pub const LAMBDA_ROWS: [(f64, f64); 4] = [(0.0, 0.0), (1.0, 0.0), (0.0, 0.1), (1.0, 0.5)];
    pub const COUNT_ROWS: [(usize, usize); 7] = [(1, 1), (2, 2), (3, 3), (4, 4), (5, 5), (5, 1), (1, 5)];
    pub const DIVERSITY_ROWS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

    pub fn points(&self, base: &ProtocolParams) -> Vec<ProtocolParams> {
        match self {
            AblationGrid::Lambda => Self::LAMBDA_ROWS
                .iter()
                .map(|&(lambda_p, lambda_n)| ProtocolParams { ranker: RankerParams { lambda_p, lambda_n }, ..base.clone() })
                .collect(),
            AblationGrid::Count => Self::COUNT_ROWS
                .iter()
                .map(|&(n_like, n_dislike)| ProtocolParams {
                    oracle: OracleConfig { n_like, n_dislike, ..base.oracle },
                    ..base.clone()
                })
                .collect(),
            AblationGrid::Diversity => Self::DIVERSITY_ROWS
                .iter()
                .map(|&lambda_diversity| ProtocolParams {
                    selector: SelectorConfig { lambda_diversity, ..base.selector },
                    ..base.clone()
                })
                .collect(),
        }
    }

    fn headers(&self) -> &'static [&'static str] {
        match self {
            AblationGrid::Lambda => &["lambda_p", "lambda_n"],
            AblationGrid::Count => &["n_like", "n_dislike"],
            AblationGrid::Diversity => &["lambda_diversity"],
        }
    }

    fn row_params(&self, p: &ProtocolParams) -> Vec<String> {
        match self {
            AblationGrid::Lambda => vec![format!("{:.1}", p.ranker.lambda_p), format!("{:.1}", p.ranker.lambda_n)],
            AblationGrid::Count => vec![p.oracle.n_like.to_string(), p.oracle.n_dislike.to_string()],
            AblationGrid::Diversity => vec![format!("{:.1}", p.selector.lambda_diversity)],
        }
    }
}

/// One report per grid point, in grid order.
pub fn run_ablation(
    dataset: &Dataset,
    retriever: &Retriever,
    split: &[usize],
    grid: &[ProtocolParams],
    seed: u64,
) -> Result<Vec<Report>> {
    grid.iter().map(|p| run_protocol(dataset, retriever, split, p, seed)).collect()
}

/// Aligned plain-text table: parameter columns, then R@10 (%), MedR and
/// MeanR of the feedback stage.
pub fn render_table(grid: AblationGrid, reports: &[Report]) -> String {
    let mut header: Vec<String> = grid.headers().iter().map(|s| s.to_string()).collect();
    header.extend(["R@10".into(), "MedR".into(), "MeanR".into()]);
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = grid.row_params(&r.params);
            let r10 = r.feedback.r_at.get(10).map_or("-".to_string(), |v| format!("{:.1}", v * 100.0));
            row.extend([r10, r.feedback.medr.to_string(), format!("{:.1}", r.feedback.meanr)]);
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| -> String {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
    };
    let mut out = String::new();
    let _ = writeln!(out, "{}", line(&header));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for row in &rows {
        let _ = writeln!(out, "{}", line(row));
    }
    out
}
