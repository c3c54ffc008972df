//! Training objectives: the listwise top-one cross-entropy, the four ideal
//! attention targets derived from relevance grades, the per-encoder
//! attention regularizers, and their sum.

use thiserror::Error;

use crate::data::QueryGroup;
use crate::diff::{self, Tape, Tensor, Var};
use crate::model::{EncoderKind, ModelVars, RsaModel, ScorerVariant};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("relevance grade {grade} outside [0, {k}]")]
    GradeOutOfRange { grade: u32, k: u32 },
    #[error("attention shape mismatch: sigma is {got_rows}x{got_cols}, ideal is {n}x{n}")]
    ShapeMismatch { got_rows: usize, got_cols: usize, n: usize },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Supervision target for one encoder's attention on one query group.
/// Entry (i, j) is how strongly document i should attend to document j.
#[derive(Debug, Clone)]
pub struct IdealAttentionMatrix {
    pub kind: EncoderKind,
    pub matrix: Tensor,
    pub k: u32,
}

/// Softmax over raw values, computed with max subtraction: the probability
/// that each entry ranks first.
pub fn top_one_prob(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn grades_as_floats(rels: &[u32]) -> Vec<f64> {
    rels.iter().map(|&r| r as f64).collect()
}

/// Cross entropy between the top-one distribution of the grades and the
/// top-one distribution of the scores.
pub fn listnet_loss(scores: &[f64], rels: &[u32]) -> f64 {
    assert_eq!(scores.len(), rels.len(), "scores/relevance length mismatch");
    let tape = Tape::new();
    let scores_var = tape.input(Tensor::column(scores));
    listnet_loss_on_tape(&scores_var, rels).item()
}

/// Tape-side listwise loss over an n x 1 score column.
pub fn listnet_loss_on_tape(scores: &Var, rels: &[u32]) -> Var {
    let target = Tensor::column(&top_one_prob(&grades_as_floats(rels)));
    diff::cross_entropy(&target, &scores.softmax_col())
}

/// The ideal attention matrix for `kind`, derived from grade comparisons.
/// Diagonals are zero; exponential kinds are normalized by
/// Z = sum_{m=0}^{k} e^m so every entry stays inside [0, 1).
pub fn ideal_attention(
    rels: &[u32],
    kind: EncoderKind,
    k: u32,
) -> Result<IdealAttentionMatrix, ObjectiveError> {
    if let Some(&grade) = rels.iter().find(|&&g| g > k) {
        return Err(ObjectiveError::GradeOutOfRange { grade, k });
    }
    let z: f64 = (0..=k).map(|m| (m as f64).exp()).sum();
    let n = rels.len();
    let matrix = Tensor::from_fn(n, n, |i, j| {
        let (ri, rj) = (rels[i] as f64, rels[j] as f64);
        match kind {
            EncoderKind::MoreRelevant => {
                if rj > ri {
                    1.0
                } else {
                    0.0
                }
            }
            EncoderKind::MoreRelevantExp => {
                if rj > ri {
                    (rj - ri).exp() / z
                } else {
                    0.0
                }
            }
            EncoderKind::LessRelevant => {
                if rj < ri {
                    1.0
                } else {
                    0.0
                }
            }
            EncoderKind::LessRelevantExp => {
                if rj < ri {
                    (ri - rj).exp() / z
                } else {
                    0.0
                }
            }
        }
    });
    Ok(IdealAttentionMatrix { kind, matrix, k })
}

/// Mean binary cross entropy between a learned attention matrix and its
/// ideal target (Sigma entries are clamped before the logs).
pub fn attention_regularizer(
    sigma: &Tensor,
    ideal: &IdealAttentionMatrix,
) -> Result<f64, ObjectiveError> {
    let n = ideal.matrix.rows();
    if sigma.shape() != (n, n) {
        return Err(ObjectiveError::ShapeMismatch {
            got_rows: sigma.rows(),
            got_cols: sigma.cols(),
            n,
        });
    }
    let tape = Tape::new();
    let sigma_var = tape.input(sigma.clone());
    Ok(attention_regularizer_on_tape(&sigma_var, ideal).item())
}

pub fn attention_regularizer_on_tape(sigma: &Var, ideal: &IdealAttentionMatrix) -> Var {
    diff::bce(sigma, &ideal.matrix)
}

/// The full training objective on an existing tape: the listwise loss, plus
/// one attention regularizer per active encoder when the variant trains
/// regularized. The caller guarantees `vars` matches the group's feature
/// width.
pub fn total_loss_on_tape(
    vars: &ModelVars,
    variant: ScorerVariant,
    features: &Var,
    rels: &[u32],
    k: u32,
) -> Result<Var, ObjectiveError> {
    let (scores, sigmas) = crate::model::forward_on_tape(vars, features);
    let mut loss = listnet_loss_on_tape(&scores, rels);
    if variant.regularized() {
        for (kind, sigma) in &sigmas {
            let ideal = ideal_attention(rels, *kind, k)?;
            loss = loss.add(&attention_regularizer_on_tape(sigma, &ideal));
        }
    }
    Ok(loss)
}

/// Scalar convenience wrapper around [`total_loss_on_tape`].
pub fn total_loss(model: &RsaModel, group: &QueryGroup, k: u32) -> Result<f64, ObjectiveError> {
    if group.features.cols() != model.config.feature_dim {
        return Err(crate::model::ModelError::FeatureDimMismatch {
            expected: model.config.feature_dim,
            got: group.features.cols(),
        }
        .into());
    }
    let tape = Tape::new();
    let (vars, _) = model.vars(&tape);
    let features = tape.constant(group.features.clone());
    Ok(total_loss_on_tape(&vars, model.config.variant, &features, &group.relevance, k)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig, ScorerParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top_one_prob_uniform_and_known_case() {
        let p = top_one_prob(&[0.0, 0.0, 0.0]);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = top_one_prob(&[1.0, 0.0]);
        let e = std::f64::consts::E;
        assert!((p[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn top_one_prob_sums_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..12);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let p = top_one_prob(&v);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = v.iter().map(|x| x + 77.7).collect();
            let q = top_one_prob(&shifted);
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn listnet_loss_equal_scores_equal_grades_is_entropy() {
        // -sum p ln p for p = top_one_prob([1, 0]), cross-checked with scipy
        let loss = listnet_loss(&[1.0, 0.0], &[1, 0]);
        assert!((loss - 0.5822031089).abs() < 1e-9);
    }

    #[test]
    fn listnet_loss_single_document_is_zero() {
        assert_eq!(listnet_loss(&[3.7], &[2]), 0.0);
    }

    #[test]
    fn listnet_loss_minimized_at_scores_equal_grades() {
        let rels = [3u32, 0, 1, 2];
        let opt: Vec<f64> = rels.iter().map(|&r| r as f64).collect();
        let base = listnet_loss(&opt, &rels);
        for i in 0..opt.len() {
            for delta in [0.01, -0.01] {
                let mut probe = opt.clone();
                probe[i] += delta;
                assert!(listnet_loss(&probe, &rels) > base, "{i} {delta}");
            }
        }
    }

    #[test]
    fn listnet_loss_nonnegative_uniform_target() {
        // all-equal grades: target is uniform and loss is at least ln(n) = entropy
        let loss = listnet_loss(&[0.4, -0.2, 0.1], &[2, 2, 2]);
        assert!(loss >= 3.0f64.ln() - 1e-12);
    }

    #[test]
    fn ideal_attention_binary_case() {
        let w = ideal_attention(&[3, 0], EncoderKind::MoreRelevant, 4).unwrap();
        assert_eq!(w.matrix.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn ideal_attention_exponential_case() {
        // e^3 / sum_{m=0}^{4} e^m, both sides by direct evaluation
        let w = ideal_attention(&[3, 0], EncoderKind::MoreRelevantExp, 4).unwrap();
        let z: f64 = (0..=4).map(|m| (m as f64).exp()).sum();
        assert!((w.matrix.get(1, 0) - 3.0f64.exp() / z).abs() < 1e-15);
        assert!((w.matrix.get(1, 0) - 0.2341216573).abs() < 1e-9);
        assert_eq!(w.matrix.get(0, 0), 0.0);
        assert_eq!(w.matrix.get(0, 1), 0.0);
        assert_eq!(w.matrix.get(1, 1), 0.0);
    }

    #[test]
    fn ideal_attention_column_pattern_for_mixed_grades() {
        // grades with three 3s (docs 1, 5, 10) and two 1s (docs 4, 8), 1-based
        let rels = [3, 0, 0, 1, 3, 0, 0, 1, 0, 3];
        let w = ideal_attention(&rels, EncoderKind::MoreRelevant, 4).unwrap();
        for (j, &col_grade) in rels.iter().enumerate() {
            for (i, &row_grade) in rels.iter().enumerate() {
                let expected = if col_grade == 3 {
                    if row_grade < 3 { 1.0 } else { 0.0 }
                } else if col_grade == 1 {
                    if row_grade == 0 { 1.0 } else { 0.0 }
                } else {
                    0.0
                };
                assert_eq!(w.matrix.get(i, j), expected, "row {i} col {j}");
            }
        }
        // rows of grade-3 documents attend to nothing
        for i in [0, 4, 9] {
            assert!(w.matrix.row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ideal_attention_transpose_pairing_and_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z: f64 = (0..=4).map(|m| (m as f64).exp()).sum();
        let bound = 4.0f64.exp() / z;
        for _ in 0..200 {
            let n = rng.random_range(1..15);
            let rels: Vec<u32> = (0..n).map(|_| rng.random_range(0..5)).collect();
            let plus = ideal_attention(&rels, EncoderKind::MoreRelevant, 4).unwrap();
            let minus = ideal_attention(&rels, EncoderKind::LessRelevant, 4).unwrap();
            let gt = ideal_attention(&rels, EncoderKind::MoreRelevantExp, 4).unwrap();
            let lt = ideal_attention(&rels, EncoderKind::LessRelevantExp, 4).unwrap();
            assert_eq!(plus.matrix, minus.matrix.transposed());
            assert_eq!(gt.matrix, lt.matrix.transposed());
            for i in 0..n {
                assert_eq!(plus.matrix.get(i, i), 0.0);
                assert_eq!(gt.matrix.get(i, i), 0.0);
            }
            assert!(gt.matrix.data().iter().all(|&v| v <= bound));
        }
    }

    #[test]
    fn ideal_attention_all_equal_grades_is_zero_matrix() {
        for kind in EncoderKind::ALL {
            let w = ideal_attention(&[2, 2, 2], kind, 4).unwrap();
            assert!(w.matrix.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ideal_attention_rejects_out_of_range_grade() {
        let err = ideal_attention(&[5, 0], EncoderKind::MoreRelevant, 4).unwrap_err();
        assert!(matches!(err, ObjectiveError::GradeOutOfRange { grade: 5, k: 4 }));
    }

    #[test]
    fn regularizer_at_half_is_ln2() {
        for kind in EncoderKind::ALL {
            let ideal = ideal_attention(&[3, 0, 2], kind, 4).unwrap();
            let sigma = Tensor::filled(3, 3, 0.5);
            let loss = attention_regularizer(&sigma, &ideal).unwrap();
            assert!((loss - 2.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn regularizer_known_two_by_two() {
        let ideal = IdealAttentionMatrix {
            kind: EncoderKind::MoreRelevant,
            matrix: Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]),
            k: 4,
        };
        let sigma = Tensor::from_rows(&[vec![0.5, 0.9], vec![0.1, 0.5]]);
        let loss = attention_regularizer(&sigma, &ideal).unwrap();
        assert!((loss - 0.3992538481).abs() < 1e-9);
    }

    #[test]
    fn regularizer_nonnegative_and_perfect_fit_limit() {
        let ideal = ideal_attention(&[3, 0], EncoderKind::MoreRelevant, 4).unwrap();
        let near = ideal.matrix.map(|t| t.clamp(1e-10, 1.0 - 1e-10));
        let loss = attention_regularizer(&near, &ideal).unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-8);
    }

    #[test]
    fn regularizer_shape_mismatch() {
        let ideal = ideal_attention(&[3, 0], EncoderKind::MoreRelevant, 4).unwrap();
        let sigma = Tensor::filled(3, 3, 0.5);
        assert!(matches!(
            attention_regularizer(&sigma, &ideal),
            Err(ObjectiveError::ShapeMismatch { .. })
        ));
    }

    fn random_group(seed: u64, n: usize, d: usize) -> QueryGroup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QueryGroup {
            qid: "q".into(),
            features: Tensor::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)),
            relevance: (0..n).map(|_| rng.random_range(0..5)).collect(),
        }
    }

    #[test]
    fn total_loss_listnet_variant_is_pure_listwise_loss() {
        let cfg = ModelConfig {
            feature_dim: 4,
            hidden_dim: 2,
            variant: ScorerVariant::ListNet,
            encoders: vec![],
            seed: 1,
        };
        let model = init_params(&cfg).unwrap();
        let group = random_group(2, 5, 4);
        let scores = model.score_group(&group).unwrap();
        let expected = listnet_loss(&scores, &group.relevance);
        let total = total_loss(&model, &group, 4).unwrap();
        assert!((total - expected).abs() < 1e-15);
    }

    #[test]
    fn total_loss_with_neutral_attention_adds_ln2_per_encoder() {
        // zeroed query weights make Sigma identically 0.5
        let cfg = ModelConfig {
            feature_dim: 4,
            hidden_dim: 3,
            variant: ScorerVariant::ListNetRsa,
            encoders: vec![EncoderKind::MoreRelevant],
            seed: 6,
        };
        let mut model = init_params(&cfg).unwrap();
        if let ScorerParams::Encoders { encoders, .. } = &mut model.scorer {
            for (_, enc) in encoders {
                enc.attn_q_w = Tensor::zeros(3, 3);
            }
        }
        let group = random_group(9, 6, 4);
        let scores = model.score_group(&group).unwrap();
        let expected = listnet_loss(&scores, &group.relevance) + 2.0f64.ln();
        let total = total_loss(&model, &group, 4).unwrap();
        assert!((total - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_sa_variant_has_no_regularizers() {
        let cfg = ModelConfig {
            feature_dim: 4,
            hidden_dim: 3,
            variant: ScorerVariant::ListNetSa,
            encoders: EncoderKind::ALL.to_vec(),
            seed: 6,
        };
        let model = init_params(&cfg).unwrap();
        let group = random_group(10, 5, 4);
        let scores = model.score_group(&group).unwrap();
        let expected = listnet_loss(&scores, &group.relevance);
        assert!((total_loss(&model, &group, 4).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn untrained_attention_bce_is_near_ln2() {
        // near-0.5 sigma at init keeps the regularizers near the ln 2 baseline
        for seed in [1u64, 22, 333, 4444] {
            let cfg = ModelConfig {
                feature_dim: 6,
                hidden_dim: 8,
                variant: ScorerVariant::ListNetRsa,
                encoders: EncoderKind::ALL.to_vec(),
                seed,
            };
            let model = init_params(&cfg).unwrap();
            let mut total = 0.0;
            let mut count = 0;
            for g in 0..10u64 {
                let group = random_group(seed * 100 + g, 10, 6);
                let (_, sigmas) = model.forward_group(&group).unwrap();
                for (kind, sigma) in &sigmas {
                    let ideal = ideal_attention(&group.relevance, *kind, 4).unwrap();
                    total += attention_regularizer(sigma, &ideal).unwrap();
                    count += 1;
                }
            }
            let mean = total / count as f64;
            assert!((mean - 2.0f64.ln()).abs() < 0.2, "seed {seed}: init mean bce {mean}");
        }
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            feature_dim: 5,
            hidden_dim: 3,
            variant: ScorerVariant::ListNetRsa,
            encoders: vec![EncoderKind::MoreRelevant, EncoderKind::LessRelevantExp],
            seed: 13,
        };
        let model = init_params(&cfg).unwrap();
        let group = random_group(17, 4, 5);
        let tensors: Vec<Tensor> =
            model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        let err = crate::diff::grad_check(
            |tape, vars| {
                let bound = model.bind(vars);
                let features = tape.constant(group.features.clone());
                total_loss_on_tape(&bound, cfg.variant, &features, &group.relevance, 4).unwrap()
            },
            &tensors,
            1e-5,
        );
        assert!(err < 1e-4, "max relative error {err}");
    }
}
