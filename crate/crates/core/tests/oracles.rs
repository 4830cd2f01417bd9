//! Independent brute-force oracles checked against the library paths.

use clickfeed_core::encoder::{EncodedCatalog, EncoderStack, Retriever};
use clickfeed_core::eval::{mean_rank, median_rank, recall_at_k};
use clickfeed_core::oracle::{give_feedback, OracleConfig};
use clickfeed_core::ranker::{group_similarity, rank, score_no_feedback, score_with_feedback, similarity, top_k, Feedback, RankerParams};
use clickfeed_core::selector::{select_candidates, SelectorConfig};
use clickfeed_core::seed;
use clickfeed_core::store::{generate_synthetic, EmbeddingMatrix, SynthConfig};
use clickfeed_core::trainer::{alignment_loss, contrastive_feedback_loss};
use clickfeed_core::{run_protocol, ProtocolParams};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dataset checksum of the default synthetic benchmark (n=2000, d=64, seed 7).
const GOLDEN_DATASET: &str = "dff6275c7fb0c5dd4284f811df432b66c1ba1e420bae1365cfa948f4c9276d1f";
/// Report checksum of the default protocol on that benchmark's test split.
const GOLDEN_REPORT: &str = "c2f4b636f2f9153bea758bc9ee2005ce36367f850b55aec1fdeebad0462bef1f";

fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect()
}

fn catalog_of(rows: &[Vec<f32>]) -> EncodedCatalog {
    let m = EmbeddingMatrix::from_rows(rows[0].len(), rows).unwrap().normalize().unwrap();
    EncodedCatalog::from_matrix(&m, &EncoderStack::identity(m.dim(), false)).unwrap()
}

fn naive_dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

#[test]
fn group_similarity_matches_summation() {
    let mut rng = seed::stream(1, "group");
    for _ in 0..50 {
        let rows = unit_rows(&mut rng, 6, 12);
        let group: Vec<&[f32]> = rows[1..].iter().map(|r| r.as_slice()).collect();
        let mut sum = 0.0;
        for g in &group {
            sum += naive_dot(&rows[0], g) / (naive_dot(&rows[0], &rows[0]).sqrt() * naive_dot(g, g).sqrt());
        }
        assert!((group_similarity(&rows[0], &group).unwrap() - sum / 5.0).abs() < 1e-12);
    }
}

#[test]
fn no_feedback_three_hand_vectors() {
    let cat = catalog_of(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.6, 0.8], vec![0.0, 0.0, 1.0]]);
    let q = [0.0, 0.8, 0.6];
    let s = score_no_feedback(&q, &cat).unwrap();
    // 0·0 + 0.6·0.8 + 0.8·0.6 = 0.96
    let expected = [0.0, 0.96, 0.6];
    for (a, b) in s.iter().zip(expected) {
        assert!((a - b).abs() < 1e-7);
    }
}

#[test]
fn query_equal_to_item_scores_one() {
    let mut rng = seed::stream(2, "self");
    let rows = unit_rows(&mut rng, 30, 16);
    let cat = catalog_of(&rows);
    let s = score_no_feedback(cat.crossmodal().row(7), &cat).unwrap();
    assert!((s[7] - 1.0).abs() < 1e-6);
    assert_eq!(top_k(&s, 1).unwrap(), vec![7]);
}

#[test]
fn feedback_scores_match_term_by_term_recomputation() {
    let mut rng = seed::stream(3, "eq2");
    let rows = unit_rows(&mut rng, 10, 8);
    let cat = catalog_of(&rows);
    let q = unit_rows(&mut rng, 1, 8).remove(0);
    let fb = Feedback::new(vec![2, 5], vec![7]);
    let params = RankerParams::new(1.0, 0.5).unwrap();
    let got = score_with_feedback(&q, &fb, &params, &cat).unwrap();
    for i in 0..10 {
        let v = cat.crossmodal().row(i);
        let text = similarity(v, &q).unwrap();
        let like = (similarity(v, cat.crossmodal().row(2)).unwrap() + similarity(v, cat.crossmodal().row(5)).unwrap()) / 2.0;
        let dislike = similarity(v, cat.crossmodal().row(7)).unwrap();
        let want = text + 1.0 * like - 0.5 * dislike;
        assert!((got[i] - want).abs() < 1e-6, "item {i}: {} vs {want}", got[i]);
    }
    // The top-10 of a 10-item catalog is the full ranking.
    assert_eq!(top_k(&got, 10).unwrap(), rank(&got).unwrap().order);
}

#[test]
fn liking_the_target_adds_exactly_lambda_to_it() {
    let mut rng = seed::stream(4, "like-target");
    let rows = unit_rows(&mut rng, 40, 16);
    let cat = catalog_of(&rows);
    let q = unit_rows(&mut rng, 1, 16).remove(0);
    let s0 = score_no_feedback(&q, &cat).unwrap();
    let s1 = score_with_feedback(&q, &Feedback::new(vec![11], vec![]), &RankerParams::new(1.0, 0.0).unwrap(), &cat).unwrap();
    assert!((s1[11] - s0[11] - 1.0).abs() < 1e-6);
    for i in 0..40 {
        assert!(s1[i] - s0[i] <= 1.0 + 1e-6);
    }
}

/// Stable full sort on descending score; equal scores keep id order.
fn stable_sort_oracle(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    ids
}

#[test]
fn rank_matches_stable_sort_on_random_arrays() {
    let mut rng = seed::stream(5, "rank");
    for _ in 0..500 {
        let n = rng.random_range(1..=500);
        let levels = rng.random_range(1..=n.max(2));
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let r = rank(&scores).unwrap();
        assert_eq!(r.order, stable_sort_oracle(&scores));
        let k = rng.random_range(1..=n);
        assert_eq!(top_k(&scores, k).unwrap(), r.order[..k]);
    }
}

/// Position of each candidate under (similarity desc, id asc), by counting.
fn count_position(pool: &[(usize, f64)], i: usize, descending: bool) -> usize {
    let (id, s) = pool[i];
    pool.iter()
        .filter(|&&(oid, os)| {
            let better = if descending { os > s } else { os < s };
            better || (os == s && oid < id)
        })
        .count()
}

#[test]
fn oracle_matches_exhaustive_sort_on_fixture() {
    let ds = generate_synthetic(&SynthConfig { n_items: 200, n_train_queries: 0, n_test_queries: 10, ..Default::default() }).unwrap();
    let mut rng = seed::stream(6, "oracle");
    for _ in 0..100 {
        let target = rng.random_range(0..200);
        let pool: Vec<usize> = rand::seq::index::sample(&mut rng, 200, 10).into_vec();
        let fb = give_feedback(&pool, target, &OracleConfig::default(), &ds).unwrap();
        let pref = ds.preference_images();
        let scored: Vec<(usize, f64)> = pool.iter().map(|&c| (c, naive_dot(pref.row(c), pref.row(target)))).collect();
        let best = (0..10).find(|&i| count_position(&scored, i, true) == 0).unwrap();
        let worst = (0..10).find(|&i| count_position(&scored, i, false) == 0).unwrap();
        assert_eq!(fb.likes, vec![scored[best].0]);
        assert_eq!(fb.dislikes, vec![scored[worst].0]);
    }
}

/// Greedy selection recomputing every objective from scratch.
fn greedy_oracle(scores: &[f64], rows: &EmbeddingMatrix, k: usize, lambda: f64) -> Vec<usize> {
    let mut picked: Vec<usize> = Vec::new();
    while picked.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..scores.len() {
            if picked.contains(&i) {
                continue;
            }
            let div = if picked.is_empty() {
                0.0
            } else {
                picked.iter().map(|&p| naive_dot(rows.row(i), rows.row(p))).sum::<f64>() / picked.len() as f64
            };
            let obj = scores[i] - lambda * div;
            if best.is_none() || obj > best.unwrap().1 {
                best = Some((i, obj));
            }
        }
        picked.push(best.unwrap().0);
    }
    picked
}

#[test]
fn diversity_selection_matches_greedy_oracle() {
    let mut rng = seed::stream(7, "diversity");
    let rows = unit_rows(&mut rng, 20, 8);
    let cat = catalog_of(&rows);
    let q = unit_rows(&mut rng, 1, 8).remove(0);
    let scores = score_no_feedback(&q, &cat).unwrap();
    let got = select_candidates(&scores, &cat, &SelectorConfig { k: 5, lambda_diversity: 0.6 }).unwrap();
    assert_eq!(got, greedy_oracle(&scores, cat.crossmodal(), 5, 0.6));
}

#[test]
fn metrics_match_count_and_divide() {
    let mut rng = seed::stream(8, "metrics");
    for _ in 0..1000 {
        let n: usize = rng.random_range(1..50);
        let ranks: Vec<usize> = (0..n).map(|_| rng.random_range(1..=300)).collect();
        let k = rng.random_range(1..=300);
        let mut hits = 0;
        for &r in &ranks {
            if r <= k {
                hits += 1;
            }
        }
        assert_eq!(recall_at_k(&ranks, k).unwrap(), hits as f64 / n as f64);

        // Lower median: smallest value with at least ceil(n/2) entries ≤ it.
        let need = n.div_ceil(2);
        let median = *ranks.iter().filter(|&&c| ranks.iter().filter(|&&x| x <= c).count() >= need).min().unwrap();
        assert_eq!(median_rank(&ranks).unwrap(), median);
        let total: usize = ranks.iter().sum();
        assert!((mean_rank(&ranks).unwrap() - total as f64 / n as f64).abs() < 1e-9);
    }
}

fn double_loop_infonce(a: &[Vec<f64>], b: &[Vec<f64>], t: f64) -> f64 {
    let n = a.len();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for j in 0..n {
        let mut den1 = 0.0;
        let mut den2 = 0.0;
        for k in 0..n {
            den1 += (dot(&a[j], &b[k]) / t).exp();
            den2 += (dot(&b[j], &a[k]) / t).exp();
        }
        l1 -= ((dot(&a[j], &b[j]) / t).exp() / den1).ln();
        l2 -= ((dot(&b[j], &a[j]) / t).exp() / den2).ln();
    }
    0.5 * (l1 / n as f64 + l2 / n as f64)
}

#[test]
fn contrastive_and_alignment_match_double_loop() {
    let mut rng = seed::stream(9, "infonce");
    for _ in 0..20 {
        let to64 = |rows: Vec<Vec<f32>>| rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect::<Vec<Vec<f64>>>();
        let a = to64(unit_rows(&mut rng, 8, 12));
        let b = to64(unit_rows(&mut rng, 8, 12));
        let t = 0.07;
        let want = double_loop_infonce(&a, &b, t);
        assert!((contrastive_feedback_loss(&a, &b, t).unwrap() - want).abs() < 1e-10);
        assert!((alignment_loss(&a, &b, t).unwrap() - want).abs() < 1e-10);
        assert!((alignment_loss(&a, &a, t).unwrap() - contrastive_feedback_loss(&a, &a, t).unwrap()).abs() < 1e-15);
    }
}

#[test]
fn golden_synthetic_checksum() {
    let ds = generate_synthetic(&SynthConfig { n_items: 2000, dim: 64, seed: 7, ..Default::default() }).unwrap();
    assert_eq!(ds.checksum(), GOLDEN_DATASET);
}

#[test]
fn golden_report_checksum() {
    let ds = generate_synthetic(&SynthConfig::default()).unwrap();
    let report = run_protocol(&ds, &Retriever::plain(&ds), &ds.splits().test, &ProtocolParams::default(), 7).unwrap();
    assert_eq!(report.per_query.len(), 200);
    assert_eq!(report.checksum(), GOLDEN_REPORT);
}
