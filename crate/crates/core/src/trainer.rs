//! Feedback-guided training of the linear adapters.
//!
//! All math here runs in `f64`. An adapter `W` maps a base row `v` to
//! `u = W v / |W v|`; given `g = ∂L/∂u`, the weight gradient is
//! `∂L/∂W = ((I − u uᵀ) g / |W v|) vᵀ`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{Adapter, EncoderStack, Retriever};
use crate::error::{Error, Result};
use crate::oracle::{give_feedback, OracleConfig};
use crate::ranker::{score_no_feedback, Feedback};
use crate::selector::{select_candidates_excluding, SelectorConfig};
use crate::seed;
use crate::store::Dataset;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Ranking,
    Contrastive,
}

/// Loss hyperparameters shared by training and gradient checking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
    pub temperature: f64,
    /// Weight of the text-image alignment term; 1.0 is the plain sum.
    pub alignment_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { kind: LossKind::Ranking, margin: 0.2, temperature: 0.07, alignment_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::config("margin must be finite and >= 0"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("temperature must be > 0"));
        }
        if !(self.alignment_weight.is_finite() && self.alignment_weight >= 0.0) {
            return Err(Error::config("alignment_weight must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub loss: LossConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub oracle: OracleConfig,
    pub selector: SelectorConfig,
    pub exclude_target_feedback: bool,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            loss: LossConfig::default(),
            batch_size: 32,
            epochs: 30,
            learning_rate: 1e-2,
            oracle: OracleConfig::default(),
            selector: SelectorConfig::default(),
            exclude_target_feedback: false,
            seed: 7,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Hinge on the like/dislike similarity gap: `max(0, −s_like + s_dislike + m)`.
pub fn ranking_loss(s_like: f64, s_dislike: f64, margin: f64) -> f64 {
    (-s_like + s_dislike + margin).max(0.0)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric in-batch InfoNCE over rows `a` and `b` matched by index.
/// Returns the loss and its gradients with respect to `a` and `b`.
fn symmetric_infonce(a: &[Vec<f64>], b: &[Vec<f64>], t: f64) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::config("temperature must be > 0"));
    }
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    let n = a.len();
    let logits: Vec<Vec<f64>> = a.iter().map(|ai| b.iter().map(|bk| dot64(ai, bk) / t).collect()).collect();

    let mut loss = 0.0;
    // dlogits[j][k] accumulates both directions.
    let mut dlogits = vec![vec![0.0; n]; n];
    let scale = 0.5 / n as f64;
    for j in 0..n {
        let row = &logits[j];
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[j];
        for k in 0..n {
            dlogits[j][k] += scale * ((row[k] - lse).exp() - (j == k) as u8 as f64);
        }
    }
    for j in 0..n {
        let col = (0..n).map(|k| logits[k][j]);
        let lse = log_sum_exp(col);
        loss += lse - logits[j][j];
        for k in 0..n {
            dlogits[k][j] += scale * ((logits[k][j] - lse).exp() - (j == k) as u8 as f64);
        }
    }
    loss *= scale;

    let d = a[0].len();
    let mut ga = vec![vec![0.0; d]; n];
    let mut gb = vec![vec![0.0; d]; n];
    for j in 0..n {
        for k in 0..n {
            let c = dlogits[j][k] / t;
            for i in 0..d {
                ga[j][i] += c * b[k][i];
                gb[k][i] += c * a[j][i];
            }
        }
    }
    Ok((loss, ga, gb))
}

/// Symmetric contrastive loss between target and positive-feedback rows.
pub fn contrastive_feedback_loss(targets: &[Vec<f64>], positives: &[Vec<f64>], t: f64) -> Result<f64> {
    symmetric_infonce(targets, positives, t).map(|(l, _, _)| l)
}

/// Symmetric contrastive loss between text and image rows.
pub fn alignment_loss(texts: &[Vec<f64>], images: &[Vec<f64>], t: f64) -> Result<f64> {
    symmetric_infonce(texts, images, t).map(|(l, _, _)| l)
}

/// Full-precision adapter weights being optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct StackWeights {
    pub dim: usize,
    pub text: Vec<f64>,
    pub crossmodal: Vec<f64>,
    pub unimodal: Option<Vec<f64>>,
}

impl StackWeights {
    pub fn from_stack(stack: &EncoderStack) -> Self {
        let w = |a: &Adapter| a.weight().iter().map(|&x| x as f64).collect::<Vec<_>>();
        StackWeights {
            dim: stack.dim(),
            text: w(&stack.text),
            crossmodal: w(&stack.image_crossmodal),
            unimodal: stack.image_unimodal.as_ref().map(w),
        }
    }

    pub fn to_stack(&self) -> Result<EncoderStack> {
        let a = |w: &[f64]| Adapter::from_weight(self.dim, w.iter().map(|&x| x as f32).collect());
        Ok(EncoderStack {
            text: a(&self.text)?,
            image_crossmodal: a(&self.crossmodal)?,
            image_unimodal: self.unimodal.as_deref().map(a).transpose()?,
        })
    }

    fn zeros_like(&self) -> Self {
        let z = vec![0.0; self.dim * self.dim];
        StackWeights { dim: self.dim, text: z.clone(), crossmodal: z.clone(), unimodal: self.unimodal.as_ref().map(|_| z) }
    }

    /// Adapter used for image→image similarity.
    fn unimodal(&self) -> &[f64] {
        self.unimodal.as_deref().unwrap_or(&self.crossmodal)
    }

    fn unimodal_mut(&mut self) -> &mut [f64] {
        match &mut self.unimodal {
            Some(u) => u,
            None => &mut self.crossmodal,
        }
    }

    /// Every trainable matrix, in checkpoint order.
    pub fn matrices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.text, &self.crossmodal];
        out.extend(self.unimodal.as_deref());
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.text, &mut self.crossmodal];
        out.extend(self.unimodal.as_mut());
        out
    }

    fn sgd_step(&mut self, grads: &StackWeights, lr: f64) {
        for (w, g) in self.matrices_mut().into_iter().zip(grads.matrices()) {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= lr * gi;
            }
        }
    }
}

struct Projected {
    u: Vec<f64>,
    znorm: f64,
}

fn project(w: &[f64], v: &[f64]) -> Result<Projected> {
    let d = v.len();
    let mut z: Vec<f64> = w.chunks_exact(d).map(|row| dot64(row, v)).collect();
    let znorm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    if znorm == 0.0 || !znorm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    z.iter_mut().for_each(|x| *x /= znorm);
    Ok(Projected { u: z, znorm })
}

/// Accumulates `∂L/∂W` for one projected row given `g = ∂L/∂u`.
fn backprop(grad: &mut [f64], p: &Projected, v: &[f64], g: &[f64]) {
    let d = v.len();
    let ug = dot64(&p.u, g);
    for r in 0..d {
        let gz = (g[r] - p.u[r] * ug) / p.znorm;
        if gz != 0.0 {
            for (c, &vc) in v.iter().enumerate() {
                grad[r * d + c] += gz * vc;
            }
        }
    }
}

/// One training example: base vectors of the query, its target, and the
/// items the oracle liked and disliked.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub query: Vec<f64>,
    pub target: Vec<f64>,
    pub likes: Vec<Vec<f64>>,
    pub dislikes: Vec<Vec<f64>>,
}

fn mean_dot(u: &[f64], group: &[Projected]) -> f64 {
    if group.is_empty() {
        return 0.0;
    }
    group.iter().map(|p| dot64(u, &p.u)).sum::<f64>() / group.len() as f64
}

/// Feedback loss plus weighted alignment loss, with analytic gradients for
/// every adapter.
///
/// The feedback term only touches the unimodal image adapter; the alignment
/// term touches the text adapter and the cross-modal image adapter.
pub fn total_loss(batch: &[TrainingExample], weights: &StackWeights, cfg: &LossConfig) -> Result<(f64, StackWeights)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let bsz = batch.len() as f64;
    let mut grads = weights.zeros_like();
    let uni = weights.unimodal();

    let mut feedback_loss = 0.0;
    match cfg.kind {
        LossKind::Ranking => {
            for ex in batch {
                let pt = project(uni, &ex.target)?;
                let pl: Vec<Projected> = ex.likes.iter().map(|v| project(uni, v)).collect::<Result<_>>()?;
                let pd: Vec<Projected> = ex.dislikes.iter().map(|v| project(uni, v)).collect::<Result<_>>()?;
                let hinge = -mean_dot(&pt.u, &pl) + mean_dot(&pt.u, &pd) + cfg.margin;
                // Zero subgradient at the hinge boundary.
                if hinge <= 0.0 {
                    continue;
                }
                feedback_loss += hinge / bsz;
                let g = grads.unimodal_mut();
                let mut g_target = vec![0.0; pt.u.len()];
                for (p, v) in pl.iter().zip(&ex.likes) {
                    let c = 1.0 / (pl.len() as f64 * bsz);
                    g_target.iter_mut().zip(&p.u).for_each(|(gt, x)| *gt -= c * x);
                    let gl: Vec<f64> = pt.u.iter().map(|x| -c * x).collect();
                    backprop(g, p, v, &gl);
                }
                for (p, v) in pd.iter().zip(&ex.dislikes) {
                    let c = 1.0 / (pd.len() as f64 * bsz);
                    g_target.iter_mut().zip(&p.u).for_each(|(gt, x)| *gt += c * x);
                    let gd: Vec<f64> = pt.u.iter().map(|x| c * x).collect();
                    backprop(g, p, v, &gd);
                }
                backprop(g, &pt, &ex.target, &g_target);
            }
        }
        LossKind::Contrastive => {
            let mut pts = Vec::with_capacity(batch.len());
            let mut pps = Vec::with_capacity(batch.len());
            for ex in batch {
                let first = ex.likes.first().ok_or_else(|| Error::InvalidFeedback("contrastive loss needs a liked item".into()))?;
                pts.push(project(uni, &ex.target)?);
                pps.push(project(uni, first)?);
            }
            let a: Vec<Vec<f64>> = pts.iter().map(|p| p.u.clone()).collect();
            let b: Vec<Vec<f64>> = pps.iter().map(|p| p.u.clone()).collect();
            let (loss, ga, gb) = symmetric_infonce(&a, &b, cfg.temperature)?;
            feedback_loss = loss;
            let g = grads.unimodal_mut();
            for (j, ex) in batch.iter().enumerate() {
                backprop(g, &pts[j], &ex.target, &ga[j]);
                backprop(g, &pps[j], &ex.likes[0], &gb[j]);
            }
        }
    }

    let mut align = 0.0;
    if cfg.alignment_weight > 0.0 {
        let pq: Vec<Projected> = batch.iter().map(|ex| project(&weights.text, &ex.query)).collect::<Result<_>>()?;
        let pi: Vec<Projected> = batch.iter().map(|ex| project(&weights.crossmodal, &ex.target)).collect::<Result<_>>()?;
        let a: Vec<Vec<f64>> = pq.iter().map(|p| p.u.clone()).collect();
        let b: Vec<Vec<f64>> = pi.iter().map(|p| p.u.clone()).collect();
        let (loss, ga, gb) = symmetric_infonce(&a, &b, cfg.temperature)?;
        align = loss;
        let w = cfg.alignment_weight;
        for (j, ex) in batch.iter().enumerate() {
            let ga: Vec<f64> = ga[j].iter().map(|x| w * x).collect();
            let gb: Vec<f64> = gb[j].iter().map(|x| w * x).collect();
            backprop(&mut grads.text, &pq[j], &ex.query, &ga);
            backprop(&mut grads.crossmodal, &pi[j], &ex.target, &gb);
        }
    }

    let total = feedback_loss + cfg.alignment_weight * align;
    if !total.is_finite() {
        return Err(Error::Divergence { epoch: 0, loss: total });
    }
    Ok((total, grads))
}

/// Loss value only; used by finite-difference checks.
pub fn total_loss_value(batch: &[TrainingExample], weights: &StackWeights, cfg: &LossConfig) -> Result<f64> {
    total_loss(batch, weights, cfg).map(|(l, _)| l)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub stack: EncoderStack,
    pub curve: Vec<EpochLoss>,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Runs retrieval with the current adapters and collects oracle feedback for
/// every training query.
pub fn build_examples(dataset: &Dataset, retriever: &Retriever, qids: &[usize], cfg: &TrainerConfig) -> Result<Vec<TrainingExample>> {
    let base = dataset.retrieval_images();
    qids.par_iter()
        .map(|&qid| {
            let q = dataset.query(qid).ok_or(Error::InvalidId { id: qid, n: dataset.queries().len() })?;
            let base_query = dataset.query_vector(qid)?;
            let scores = score_no_feedback(&retriever.query(&base_query)?, retriever.catalog())?;
            let exclude = cfg.exclude_target_feedback.then_some(q.target);
            let pool = select_candidates_excluding(&scores, retriever.catalog(), &cfg.selector, exclude)?;
            let Feedback { likes, dislikes } = give_feedback(&pool, q.target, &cfg.oracle, dataset)?;
            Ok(TrainingExample {
                query: to_f64(&base_query),
                target: to_f64(base.row(q.target)),
                likes: likes.iter().map(|&i| to_f64(base.row(i))).collect(),
                dislikes: dislikes.iter().map(|&i| to_f64(base.row(i))).collect(),
            })
        })
        .collect()
}

/// Mini-batch gradient descent over the train split.
///
/// Feedback is regenerated at the start of every epoch with the current
/// adapters. Batches are drawn from a seeded shuffle.
pub fn train(dataset: &Dataset, cfg: &TrainerConfig, stack: EncoderStack) -> Result<TrainOutcome> {
    cfg.validate()?;
    if stack.dim() != dataset.dim() {
        return Err(Error::DimensionMismatch { expected: dataset.dim(), found: stack.dim() });
    }
    let qids = &dataset.splits().train;
    if qids.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let mut weights = StackWeights::from_stack(&stack);
    let mut rng = seed::stream(cfg.seed, "train-shuffle");
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut current = stack;

    for epoch in 1..=cfg.epochs {
        let retriever = Retriever::new(dataset, current)?;
        let examples = build_examples(dataset, &retriever, qids, cfg)?;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);

        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grads) = total_loss(&batch, &weights, &cfg.loss).map_err(|e| match e {
                Error::Divergence { loss, .. } => Error::Divergence { epoch, loss },
                other => other,
            })?;
            weights.sgd_step(&grads, cfg.learning_rate);
            sum += loss;
            batches += 1;
        }
        let mean_loss = sum / batches as f64;
        if !mean_loss.is_finite() || weights.matrices().iter().any(|m| m.iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence { epoch, loss: mean_loss });
        }
        curve.push(EpochLoss { epoch, mean_loss });
        current = weights.to_stack()?;
    }
    Ok(TrainOutcome { stack: weights.to_stack()?, curve })
}

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub kind: LossKind,
    pub trials: usize,
    pub checked_entries: usize,
    pub resampled: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const GRADCHECK_STEP: f64 = 1e-5;
/// Instances with any hinge argument this close to zero are resampled: the
/// difference stencil would straddle the kink.
pub const HINGE_EXCLUSION: f64 = 1e-3;
/// Denominator floor of the relative error, so entries that are zero
/// analytically are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if crate::vector::normalize_f64(&mut v) > 1e-6 {
            return v;
        }
    }
}

fn random_adapter(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let s = 0.3 / (d as f64).sqrt();
    (0..d * d).map(|i| (i % (d + 1) == 0) as u8 as f64 + s * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A random small instance: weights, batch and loss config.
pub fn random_instance(rng: &mut impl Rng, kind: LossKind) -> (StackWeights, Vec<TrainingExample>, LossConfig) {
    let d = rng.random_range(2..=16);
    let b = rng.random_range(1..=8);
    let sep = rng.random_bool(0.5);
    let weights = StackWeights {
        dim: d,
        text: random_adapter(rng, d),
        crossmodal: random_adapter(rng, d),
        unimodal: sep.then(|| random_adapter(rng, d)),
    };
    let batch = (0..b)
        .map(|_| {
            let n_like = rng.random_range(1..=3);
            let n_dislike = rng.random_range(1..=3);
            TrainingExample {
                query: random_unit(rng, d),
                target: random_unit(rng, d),
                likes: (0..n_like).map(|_| random_unit(rng, d)).collect(),
                dislikes: (0..n_dislike).map(|_| random_unit(rng, d)).collect(),
            }
        })
        .collect();
    let cfg = LossConfig {
        kind,
        margin: rng.random_range(0.0..1.0),
        temperature: rng.random_range(0.07..1.0),
        alignment_weight: 1.0,
    };
    (weights, batch, cfg)
}

fn near_hinge_boundary(batch: &[TrainingExample], weights: &StackWeights, cfg: &LossConfig) -> Result<bool> {
    if cfg.kind != LossKind::Ranking {
        return Ok(false);
    }
    let uni = weights.unimodal();
    for ex in batch {
        let pt = project(uni, &ex.target)?;
        let pl: Vec<Projected> = ex.likes.iter().map(|v| project(uni, v)).collect::<Result<_>>()?;
        let pd: Vec<Projected> = ex.dislikes.iter().map(|v| project(uni, v)).collect::<Result<_>>()?;
        let hinge = -mean_dot(&pt.u, &pl) + mean_dot(&pt.u, &pd) + cfg.margin;
        if hinge.abs() < HINGE_EXCLUSION {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Largest relative error between analytic and central-difference gradients
/// over every adapter entry of one instance.
pub fn check_instance(batch: &[TrainingExample], weights: &StackWeights, cfg: &LossConfig, h: f64) -> Result<(f64, usize)> {
    let (_, analytic) = total_loss(batch, weights, cfg)?;
    let mut probe = weights.clone();
    let mut worst = 0.0f64;
    let mut count = 0;
    let n_mats = weights.matrices().len();
    for m in 0..n_mats {
        for e in 0..weights.dim * weights.dim {
            let orig = probe.matrices()[m][e];
            probe.matrices_mut()[m][e] = orig + h;
            let plus = total_loss_value(batch, &probe, cfg)?;
            probe.matrices_mut()[m][e] = orig - h;
            let minus = total_loss_value(batch, &probe, cfg)?;
            probe.matrices_mut()[m][e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.matrices()[m][e], numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Checks `total_loss` gradients against central differences on `n_trials`
/// random instances (d ≤ 16, B ≤ 8).
pub fn gradient_check(kind: LossKind, n_trials: usize, tolerance: f64, seed_value: u64) -> Result<GradCheckReport> {
    if n_trials == 0 {
        return Err(Error::config("n_trials must be >= 1"));
    }
    let mut rng = seed::stream(seed_value, "gradcheck");
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut resampled = 0;
    let mut done = 0;
    while done < n_trials {
        let (weights, batch, cfg) = random_instance(&mut rng, kind);
        if near_hinge_boundary(&batch, &weights, &cfg)? {
            resampled += 1;
            continue;
        }
        let (err, count) = check_instance(&batch, &weights, &cfg, GRADCHECK_STEP)?;
        worst = worst.max(err);
        checked += count;
        done += 1;
    }
    Ok(GradCheckReport {
        kind,
        trials: n_trials,
        checked_entries: checked,
        resampled,
        max_rel_err: worst,
        tolerance,
        passed: worst < tolerance,
    })
}
