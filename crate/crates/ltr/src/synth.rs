//! Deterministic synthetic ranking data.
//!
//! Grades are drawn from {0..4} with a realistic skew toward low grades.
//! Features are a fixed random tanh mix of latent signals: a noisy monotone
//! grade proxy, a per-query quadratic whose vertex moves query to query (so
//! its meaning depends on context), a within-query rank percentile of a
//! noisy proxy, a query-level difficulty constant, and pure noise. Per-doc
//! scorers can only partially invert the mix, leaving headroom for models
//! that compare documents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, QueryGroup};
use crate::diff::Tensor;

const NUM_LATENTS: usize = 5;
/// P(grade = g) for g = 0..=4.
const GRADE_WEIGHTS: [f64; 5] = [0.42, 0.25, 0.15, 0.11, 0.07];

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn draw_grade(rng: &mut ChaCha8Rng) -> u32 {
    let mut u: f64 = rng.random();
    for (g, &w) in GRADE_WEIGHTS.iter().enumerate() {
        if u < w {
            return g as u32;
        }
        u -= w;
    }
    4
}

/// Generate `num_queries` groups of exactly `docs_per_query` documents with
/// `num_features` features each, fully determined by `seed`.
pub fn generate_synthetic(
    seed: u64,
    num_queries: usize,
    docs_per_query: usize,
    num_features: usize,
) -> Dataset {
    assert!(docs_per_query >= 1 && num_features >= 1, "sizes must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // the fixed nonlinear map shared by every query
    let mix = Tensor::from_fn(num_features, NUM_LATENTS, |_, _| rng.random_range(-1.5..1.5));
    let bias: Vec<f64> = (0..num_features).map(|_| rng.random_range(-0.5..0.5)).collect();

    let mut groups = Vec::with_capacity(num_queries);
    for qi in 0..num_queries {
        let vertex = rng.random_range(0.15..0.85);
        let grades: Vec<u32> = (0..docs_per_query).map(|_| draw_grade(&mut rng)).collect();
        let zs: Vec<f64> = grades.iter().map(|&g| g as f64 / 4.0).collect();
        let mean_z = zs.iter().sum::<f64>() / docs_per_query as f64;

        let doc_noise: Vec<[f64; NUM_LATENTS]> = (0..docs_per_query)
            .map(|_| std::array::from_fn(|_| gaussian(&mut rng)))
            .collect();

        // within-query rank percentile of a noisy grade proxy
        let proxies: Vec<f64> =
            (0..docs_per_query).map(|i| zs[i] + 0.35 * doc_noise[i][2]).collect();
        let mut order: Vec<usize> = (0..docs_per_query).collect();
        order.sort_by(|&a, &b| proxies[a].partial_cmp(&proxies[b]).unwrap());
        let mut percentile = vec![0.5; docs_per_query];
        if docs_per_query > 1 {
            for (rank, &doc) in order.iter().enumerate() {
                percentile[doc] = rank as f64 / (docs_per_query - 1) as f64;
            }
        }

        let mut features = Tensor::zeros(docs_per_query, num_features);
        for i in 0..docs_per_query {
            let g = &doc_noise[i];
            let latents = [
                zs[i] + 0.45 * g[0],
                (zs[i] - vertex) * (zs[i] - vertex) + 0.1 * g[1],
                percentile[i],
                mean_z + 0.1 * g[3],
                g[4],
            ];
            for (j, b) in bias.iter().enumerate() {
                let arg: f64 =
                    (0..NUM_LATENTS).map(|l| mix.get(j, l) * latents[l]).sum::<f64>() + b;
                features.set(i, j, arg.tanh() + 0.03 * gaussian(&mut rng));
            }
        }

        groups.push(QueryGroup { qid: (qi + 1).to_string(), features, relevance: grades });
    }

    Dataset { groups, feature_dim: num_features, k_max: 4 }
}
