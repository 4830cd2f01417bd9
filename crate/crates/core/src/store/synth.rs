use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, EmbeddingMatrix, Item, Query, Splits, Vocab};
use crate::error::{Error, Result};
use crate::seed;
use crate::vector;

/// Attribute words used for synthetic item descriptions, in order.
const WORDS: &[&str] = &[
    "black", "white", "red", "navy", "beige", "olive", "pink", "grey", "mustard", "burgundy",
    "striped", "floral", "plaid", "polka-dot", "solid", "paisley", "cropped", "oversized", "slim",
    "relaxed", "pleated", "ruffled", "denim", "leather", "linen", "silk", "wool", "cotton",
    "chiffon", "velvet", "knit", "satin", "roll-up", "sleeveless", "long-sleeve", "short-sleeve",
    "v-neck", "crew-neck", "turtleneck", "off-shoulder", "high-waist", "wrap", "button-down",
    "zip-front", "belted", "hooded", "embroidered", "sequined", "distressed", "lace", "mesh",
    "ribbed", "quilted", "fringed", "asymmetric", "tiered", "midi", "maxi", "mini", "ankle",
    "blouse", "dress", "skirt", "jeans", "jacket", "coat", "sweater", "cardigan", "shirt", "tee",
    "shorts", "trousers", "jumpsuit", "blazer", "vest", "hoodie", "parka", "romper", "tunic",
    "camisole",
];

fn attribute_name(i: usize) -> String {
    match WORDS.get(i) {
        Some(w) => (*w).to_string(),
        None => format!("attr{i}"),
    }
}

/// Parameters of the synthetic catalog generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_attributes: usize,
    pub attrs_per_item: usize,
    pub dim: usize,
    /// Expected L2 norm of the Gaussian perturbation added to each item in
    /// each embedding space (per-component std-dev is `noise_sigma / √dim`).
    pub noise_sigma: f64,
    /// Number of target attributes mentioned in each query's text.
    pub query_attrs: usize,
    pub n_train_queries: usize,
    pub n_test_queries: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 2000,
            n_attributes: 32,
            attrs_per_item: 4,
            dim: 64,
            noise_sigma: 0.35,
            query_attrs: 2,
            n_train_queries: 800,
            n_test_queries: 200,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_items", self.n_items),
            ("n_attributes", self.n_attributes),
            ("attrs_per_item", self.attrs_per_item),
            ("dim", self.dim),
            ("query_attrs", self.query_attrs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.attrs_per_item > self.n_attributes {
            return Err(Error::config("attrs_per_item exceeds n_attributes"));
        }
        if self.query_attrs > self.attrs_per_item {
            return Err(Error::config("query_attrs exceeds attrs_per_item"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be finite and non-negative"));
        }
        if self.n_train_queries + self.n_test_queries > self.n_items {
            return Err(Error::config("more queries than items"));
        }
        Ok(())
    }
}

fn gaussian_unit(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    loop {
        let mut v: Vec<f32> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        if vector::normalize_in_place(&mut v) {
            return v;
        }
    }
}

/// Perturbs `truth` with isotropic Gaussian noise and re-normalizes.
fn noisy_view(truth: &[f32], sigma: f64, rng: &mut impl Rng) -> Vec<f32> {
    if sigma == 0.0 {
        return truth.to_vec();
    }
    let scale = sigma / (truth.len() as f64).sqrt();
    let mut v: Vec<f32> = truth
        .iter()
        .map(|&x| (x as f64 + scale * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    if !vector::normalize_in_place(&mut v) {
        v = truth.to_vec();
    }
    v
}

/// Builds a synthetic catalog and query set. Pure function of `cfg`.
///
/// Each attribute gets a random unit basis vector; an item's ground truth is
/// the normalized sum of its attributes' basis vectors. The retrieval and
/// preference spaces are independently noised views of the ground truth.
/// Query text names a random subset of the target's attributes.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let d = cfg.dim;

    let mut basis_rng = seed::stream(cfg.seed, "attribute-basis");
    let basis: Vec<Vec<f32>> = (0..cfg.n_attributes).map(|_| gaussian_unit(&mut basis_rng, d)).collect();
    let names: Vec<String> = (0..cfg.n_attributes).map(attribute_name).collect();

    let mut item_rng = seed::stream(cfg.seed, "item-attributes");
    let mut ret_rng = seed::stream(cfg.seed, "retrieval-noise");
    let mut pref_rng = seed::stream(cfg.seed, "preference-noise");

    let mut items = Vec::with_capacity(cfg.n_items);
    let mut item_attrs = Vec::with_capacity(cfg.n_items);
    let mut retrieval = Vec::with_capacity(cfg.n_items * d);
    let mut preference = Vec::with_capacity(cfg.n_items * d);
    for id in 0..cfg.n_items {
        let attrs: Vec<usize> = sample(&mut item_rng, cfg.n_attributes, cfg.attrs_per_item).into_vec();
        let mut truth = vec![0.0f64; d];
        for &a in &attrs {
            for (t, &b) in truth.iter_mut().zip(&basis[a]) {
                *t += b as f64;
            }
        }
        vector::normalize_f64(&mut truth);
        let truth: Vec<f32> = truth.into_iter().map(|x| x as f32).collect();
        retrieval.extend(noisy_view(&truth, cfg.noise_sigma, &mut ret_rng));
        preference.extend(noisy_view(&truth, cfg.noise_sigma, &mut pref_rng));

        let attributes: Vec<String> = attrs.iter().map(|&a| names[a].clone()).collect();
        items.push(Item { id, text: attributes.join(" "), attributes, image_uri: None });
        item_attrs.push(attrs);
    }

    let mut query_rng = seed::stream(cfg.seed, "queries");
    let n_queries = cfg.n_train_queries + cfg.n_test_queries;
    let targets = sample(&mut query_rng, cfg.n_items, n_queries).into_vec();
    let queries: Vec<Query> = targets
        .iter()
        .enumerate()
        .map(|(qid, &target)| {
            let attrs = &item_attrs[target];
            let picked = sample(&mut query_rng, attrs.len(), cfg.query_attrs);
            let words: Vec<&str> = picked.iter().map(|j| names[attrs[j]].as_str()).collect();
            Query { qid, target, text: words.join(" ") }
        })
        .collect();
    let splits = Splits {
        train: (0..cfg.n_train_queries).collect(),
        test: (cfg.n_train_queries..n_queries).collect(),
    };

    let vocab_vectors = EmbeddingMatrix::from_rows(d, &basis)?;
    Dataset::new(
        items,
        EmbeddingMatrix::new(d, retrieval)?,
        EmbeddingMatrix::new(d, preference)?,
        Vocab::new(names, vocab_vectors)?,
        queries,
        splits,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { n_items: 50, n_attributes: 12, attrs_per_item: 3, dim: 8, n_train_queries: 10, n_test_queries: 5, ..Default::default() }
    }

    #[test]
    fn zero_noise_spaces_coincide() {
        let ds = generate_synthetic(&SynthConfig { noise_sigma: 0.0, ..small() }).unwrap();
        assert_eq!(ds.retrieval_images(), ds.preference_images());
    }

    #[test]
    fn same_seed_is_identical() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        let c = generate_synthetic(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn items_and_queries_are_well_formed() {
        let ds = generate_synthetic(&small()).unwrap();
        assert_eq!(ds.len(), 50);
        assert!(ds.retrieval_images().is_normalized());
        assert!(ds.preference_images().is_normalized());
        for item in ds.items() {
            assert_eq!(item.attributes.len(), 3);
        }
        for q in ds.queries() {
            let target = ds.item(q.target).unwrap();
            for w in q.text.split_whitespace() {
                assert!(target.attributes.iter().any(|a| a == w));
            }
        }
        assert_eq!(ds.splits().train.len(), 10);
        assert_eq!(ds.splits().test.len(), 5);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate_synthetic(&SynthConfig { n_items: 0, ..small() }).is_err());
        assert!(generate_synthetic(&SynthConfig { attrs_per_item: 13, ..small() }).is_err());
        assert!(generate_synthetic(&SynthConfig { noise_sigma: -1.0, ..small() }).is_err());
        assert!(generate_synthetic(&SynthConfig { n_train_queries: 60, ..small() }).is_err());
    }
}
