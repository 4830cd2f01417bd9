use std::collections::HashSet;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clickfeed_core::ranker::{rank_of, score_no_feedback, score_with_feedback, top_k};
use clickfeed_core::{encode_query, Dataset, Feedback, RankerParams, Retriever};
use serde::{Deserialize, Serialize};

use crate::{ApiError, FeedbackResponse};
use axum::http::StatusCode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Retrieved,
    Updated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub id: usize,
    pub text: String,
    pub image_uri: Option<String>,
    pub score: f64,
    pub rank: usize,
}

/// One search interaction. `shown` never changes after creation.
#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub query_text: String,
    pub query_vec: Vec<f32>,
    pub scores: Vec<f64>,
    pub shown: Vec<usize>,
    pub feedback: Option<Feedback>,
    pub updated_scores: Option<Vec<f64>>,
    pub state: SessionState,
    pub created_at: SystemTime,
    pub last_used: Instant,
    pub demo_target: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub state: SessionState,
    pub query: String,
    pub created_at: u64,
    pub shown: Vec<ResultEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feedback: Option<Feedback>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub results: Option<Vec<ResultEntry>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demo_target: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demo_target_rank_before: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demo_target_rank_after: Option<usize>,
}

fn entries(dataset: &Dataset, ids: &[usize], scores: &[f64]) -> Vec<ResultEntry> {
    ids.iter()
        .enumerate()
        .map(|(pos, &id)| {
            let item = &dataset.items()[id];
            ResultEntry { id, text: item.text.clone(), image_uri: item.image_uri.clone(), score: scores[id], rank: pos + 1 }
        })
        .collect()
}

impl Session {
    /// Encodes the query and runs the initial text-only ranking.
    pub fn create(
        dataset: &Dataset,
        retriever: &Retriever,
        query: &str,
        k: usize,
        demo_target: Option<usize>,
    ) -> Result<Self, ApiError> {
        let base = encode_query(query, dataset.vocab())?;
        let query_vec = retriever.query(&base)?;
        let scores = score_no_feedback(&query_vec, retriever.catalog())?;
        let shown = top_k(&scores, k)?;
        Ok(Session {
            id: uuid::Uuid::new_v4().simple().to_string(),
            query_text: query.to_string(),
            query_vec,
            scores,
            shown,
            feedback: None,
            updated_scores: None,
            state: SessionState::Retrieved,
            created_at: SystemTime::now(),
            last_used: Instant::now(),
            demo_target,
        })
    }

    pub fn shown_entries(&self, dataset: &Dataset) -> Vec<ResultEntry> {
        entries(dataset, &self.shown, &self.scores)
    }

    fn updated_entries(&self, dataset: &Dataset) -> Option<Vec<ResultEntry>> {
        let scores = self.updated_scores.as_ref()?;
        let ids = top_k(scores, self.shown.len()).ok()?;
        Some(entries(dataset, &ids, scores))
    }

    fn demo_ranks(&self) -> (Option<usize>, Option<usize>) {
        let Some(t) = self.demo_target else { return (None, None) };
        let before = rank_of(&self.scores, t).ok();
        let after = self.updated_scores.as_ref().and_then(|s| rank_of(s, t).ok());
        (before, after)
    }

    fn check_feedback(&self, likes: &[usize], dislikes: &[usize]) -> Result<(), ApiError> {
        if likes.is_empty() && dislikes.is_empty() {
            return Err(ApiError::unprocessable("likes and dislikes are both empty"));
        }
        let shown: HashSet<usize> = self.shown.iter().copied().collect();
        let mut seen = HashSet::new();
        for &id in likes.iter().chain(dislikes) {
            if !shown.contains(&id) {
                return Err(ApiError::unprocessable(format!("item {id} was not shown in this session")));
            }
            if !seen.insert(id) {
                return Err(ApiError::unprocessable(format!("item {id} appears more than once in the feedback")));
            }
        }
        Ok(())
    }

    /// Applies one round of feedback and re-ranks.
    pub fn submit(
        &mut self,
        dataset: &Dataset,
        retriever: &Retriever,
        params: &RankerParams,
        likes: Vec<usize>,
        dislikes: Vec<usize>,
    ) -> Result<FeedbackResponse, ApiError> {
        if self.state != SessionState::Retrieved {
            return Err(ApiError::new(StatusCode::CONFLICT, "feedback was already submitted for this session"));
        }
        self.check_feedback(&likes, &dislikes)?;
        let feedback = Feedback::new(likes, dislikes);
        let updated = score_with_feedback(&self.query_vec, &feedback, params, retriever.catalog())?;
        self.feedback = Some(feedback);
        self.updated_scores = Some(updated);
        self.state = SessionState::Updated;

        let (before, after) = self.demo_ranks();
        Ok(FeedbackResponse {
            results: self.updated_entries(dataset).unwrap_or_default(),
            demo_target_rank_before: before,
            demo_target_rank_after: after,
        })
    }

    pub fn view(&self, dataset: &Dataset) -> SessionView {
        let (before, after) = self.demo_ranks();
        SessionView {
            session_id: self.id.clone(),
            state: self.state,
            query: self.query_text.clone(),
            created_at: self.created_at.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            shown: self.shown_entries(dataset),
            feedback: self.feedback.clone(),
            results: self.updated_entries(dataset),
            demo_target: self.demo_target,
            demo_target_rank_before: before,
            demo_target_rank_after: after,
        }
    }
}
