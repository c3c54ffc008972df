//! Ranking scorers.
//!
//! Three variants share one forward implementation:
//!
//! * `listnet` — a single linear layer, no bias, no activation; each
//!   document is scored independently.
//! * `sa` — one or more document encoders (feed-forward, sigmoid
//!   self-attention, feed-forward, with layer norm, ELU, and highway gates
//!   around each sublayer), concatenated and scored by a linear head.
//! * `rsa` — the same architecture as `sa`; the difference is purely in the
//!   training objective, which adds per-encoder attention regularizers.
//!
//! Every forward pass runs on a fresh tape, so evaluation and training share
//! the exact same code path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::QueryGroup;
use crate::diff::{Tape, Tensor, Var};

pub const ELU_ALPHA: f64 = 1.0;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Highway gates start biased toward the carry path.
pub const HIGHWAY_GATE_BIAS: f64 = -1.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature dimension mismatch: model expects {expected}, data has {got}")]
    FeatureDimMismatch { expected: usize, got: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
}

/// Which documents an encoder's attention is steered toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    /// Attend to strictly more relevant documents (target weight 1).
    MoreRelevant,
    /// Attend to more relevant documents, exponentially in the grade gap.
    MoreRelevantExp,
    /// Attend to strictly less relevant documents (target weight 1).
    LessRelevant,
    /// Attend to less relevant documents, exponentially in the grade gap.
    LessRelevantExp,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 4] = [
        EncoderKind::MoreRelevant,
        EncoderKind::MoreRelevantExp,
        EncoderKind::LessRelevant,
        EncoderKind::LessRelevantExp,
    ];

    /// One-character CLI token.
    pub fn symbol(self) -> char {
        match self {
            EncoderKind::MoreRelevant => '+',
            EncoderKind::MoreRelevantExp => '>',
            EncoderKind::LessRelevant => '-',
            EncoderKind::LessRelevantExp => '<',
        }
    }

    /// Filesystem- and identifier-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            EncoderKind::MoreRelevant => "plus",
            EncoderKind::MoreRelevantExp => "gt",
            EncoderKind::LessRelevant => "minus",
            EncoderKind::LessRelevantExp => "lt",
        }
    }

    pub fn from_symbol(c: char) -> Option<EncoderKind> {
        EncoderKind::ALL.into_iter().find(|k| k.symbol() == c)
    }

    fn order(self) -> usize {
        EncoderKind::ALL.iter().position(|&k| k == self).unwrap()
    }
}

/// Parse a subset like `+>-<` or `+,>` into canonically ordered, deduplicated
/// kinds.
pub fn parse_encoder_kinds(s: &str) -> Result<Vec<EncoderKind>, ModelError> {
    let mut kinds: Vec<EncoderKind> = Vec::new();
    for c in s.chars() {
        if c == ',' || c.is_whitespace() {
            continue;
        }
        let kind = EncoderKind::from_symbol(c)
            .ok_or_else(|| ModelError::BadConfig(format!("unknown encoder kind {c:?}")))?;
        if !kinds.contains(&kind) {
            kinds.push(kind);
        }
    }
    kinds.sort_by_key(|k| k.order());
    if kinds.is_empty() {
        return Err(ModelError::BadConfig("encoder subset is empty".into()));
    }
    Ok(kinds)
}

pub fn encoder_kinds_string(kinds: &[EncoderKind]) -> String {
    kinds.iter().map(|k| k.symbol()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerVariant {
    ListNet,
    ListNetSa,
    ListNetRsa,
}

impl ScorerVariant {
    pub fn token(self) -> &'static str {
        match self {
            ScorerVariant::ListNet => "listnet",
            ScorerVariant::ListNetSa => "sa",
            ScorerVariant::ListNetRsa => "rsa",
        }
    }

    pub fn from_token(s: &str) -> Result<Self, ModelError> {
        match s {
            "listnet" => Ok(ScorerVariant::ListNet),
            "sa" => Ok(ScorerVariant::ListNetSa),
            "rsa" => Ok(ScorerVariant::ListNetRsa),
            other => Err(ModelError::BadConfig(format!(
                "unknown variant {other:?} (expected listnet, sa or rsa)"
            ))),
        }
    }

    pub fn uses_encoders(self) -> bool {
        !matches!(self, ScorerVariant::ListNet)
    }

    /// Only the rsa variant trains with attention regularizers.
    pub fn regularized(self) -> bool {
        matches!(self, ScorerVariant::ListNetRsa)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub variant: ScorerVariant,
    pub encoders: Vec<EncoderKind>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.feature_dim == 0 {
            return Err(ModelError::BadConfig("feature_dim must be at least 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(ModelError::BadConfig("hidden_dim must be at least 1".into()));
        }
        if self.variant.uses_encoders() && self.encoders.is_empty() {
            return Err(ModelError::BadConfig(format!(
                "variant {} needs at least one active encoder",
                self.variant.token()
            )));
        }
        Ok(())
    }

    /// Flat `key = value` rendering, embedded in checkpoints.
    pub fn to_kv(&self) -> String {
        format!(
            "variant = {}\nfeature_dim = {}\nhidden_dim = {}\nencoders = {}\nseed = {}\n",
            self.variant.token(),
            self.feature_dim,
            self.hidden_dim,
            encoder_kinds_string(&self.encoders),
            self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<ModelConfig, ModelError> {
        let mut variant = None;
        let mut feature_dim = None;
        let mut hidden_dim = None;
        let mut encoders = None;
        let mut seed = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ModelError::BadConfig(format!("bad config line {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| ModelError::BadConfig(format!("bad {what}: {value:?}"));
            match key {
                "variant" => variant = Some(ScorerVariant::from_token(value)?),
                "feature_dim" => {
                    feature_dim = Some(value.parse().map_err(|_| bad("feature_dim"))?)
                }
                "hidden_dim" => hidden_dim = Some(value.parse().map_err(|_| bad("hidden_dim"))?),
                "encoders" => {
                    encoders = Some(if value.is_empty() {
                        Vec::new()
                    } else {
                        parse_encoder_kinds(value)?
                    })
                }
                "seed" => seed = Some(value.parse().map_err(|_| bad("seed"))?),
                other => {
                    return Err(ModelError::BadConfig(format!("unknown config key {other:?}")))
                }
            }
        }
        let missing = |what: &str| ModelError::BadConfig(format!("missing config key {what}"));
        let config = ModelConfig {
            variant: variant.ok_or_else(|| missing("variant"))?,
            feature_dim: feature_dim.ok_or_else(|| missing("feature_dim"))?,
            hidden_dim: hidden_dim.ok_or_else(|| missing("hidden_dim"))?,
            encoders: encoders.ok_or_else(|| missing("encoders"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// All weights of one document encoder. Field order is the canonical
/// parameter order used by initialization, checkpoints, and optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub g1_gate_w: Tensor,
    pub g1_gate_b: Tensor,
    /// Linear projection on G1's carry path (input width d, output d_h).
    pub g1_carry_w: Tensor,
    pub attn_q_w: Tensor,
    pub attn_k_w: Tensor,
    pub attn_v_w: Tensor,
    pub g2_gate_w: Tensor,
    pub g2_gate_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub g3_gate_w: Tensor,
    pub g3_gate_b: Tensor,
}

impl EncoderParams {
    fn fields(&self) -> [(&'static str, &Tensor); 18] {
        [
            ("ff1_w", &self.ff1_w),
            ("ff1_b", &self.ff1_b),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("g1_gate_w", &self.g1_gate_w),
            ("g1_gate_b", &self.g1_gate_b),
            ("g1_carry_w", &self.g1_carry_w),
            ("attn_q_w", &self.attn_q_w),
            ("attn_k_w", &self.attn_k_w),
            ("attn_v_w", &self.attn_v_w),
            ("g2_gate_w", &self.g2_gate_w),
            ("g2_gate_b", &self.g2_gate_b),
            ("ff2_w", &self.ff2_w),
            ("ff2_b", &self.ff2_b),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("g3_gate_w", &self.g3_gate_w),
            ("g3_gate_b", &self.g3_gate_b),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 18] {
        [
            ("ff1_w", &mut self.ff1_w),
            ("ff1_b", &mut self.ff1_b),
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("g1_gate_w", &mut self.g1_gate_w),
            ("g1_gate_b", &mut self.g1_gate_b),
            ("g1_carry_w", &mut self.g1_carry_w),
            ("attn_q_w", &mut self.attn_q_w),
            ("attn_k_w", &mut self.attn_k_w),
            ("attn_v_w", &mut self.attn_v_w),
            ("g2_gate_w", &mut self.g2_gate_w),
            ("g2_gate_b", &mut self.g2_gate_b),
            ("ff2_w", &mut self.ff2_w),
            ("ff2_b", &mut self.ff2_b),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("g3_gate_w", &mut self.g3_gate_w),
            ("g3_gate_b", &mut self.g3_gate_b),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScorerParams {
    Linear {
        /// d x 1 weight column; no bias, no activation.
        weights: Tensor,
    },
    Encoders {
        encoders: Vec<(EncoderKind, EncoderParams)>,
        /// (num_encoders * d_h) x 1 scoring head.
        head_w: Tensor,
        head_b: Tensor,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RsaModel {
    pub config: ModelConfig,
    pub scorer: ScorerParams,
}

/// Per-document scores plus each active encoder's attention matrix.
pub type GroupForward = (Vec<f64>, Vec<(EncoderKind, Tensor)>);

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

/// Deterministic initialization from `config.seed`: Glorot-uniform weights,
/// zero biases, highway gate biases at -1, layer-norm gain 1 / bias 0.
pub fn init_params(config: &ModelConfig) -> Result<RsaModel, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.feature_dim;
    let h = config.hidden_dim;

    let scorer = if config.variant.uses_encoders() {
        let encoders = config
            .encoders
            .iter()
            .map(|&kind| {
                let params = EncoderParams {
                    ff1_w: glorot(&mut rng, d, h),
                    ff1_b: Tensor::zeros(1, h),
                    ln1_gain: Tensor::filled(1, h, 1.0),
                    ln1_bias: Tensor::zeros(1, h),
                    g1_gate_w: glorot(&mut rng, d, h),
                    g1_gate_b: Tensor::filled(1, h, HIGHWAY_GATE_BIAS),
                    g1_carry_w: glorot(&mut rng, d, h),
                    attn_q_w: glorot(&mut rng, h, h),
                    attn_k_w: glorot(&mut rng, h, h),
                    attn_v_w: glorot(&mut rng, h, h),
                    g2_gate_w: glorot(&mut rng, h, h),
                    g2_gate_b: Tensor::filled(1, h, HIGHWAY_GATE_BIAS),
                    ff2_w: glorot(&mut rng, h, h),
                    ff2_b: Tensor::zeros(1, h),
                    ln2_gain: Tensor::filled(1, h, 1.0),
                    ln2_bias: Tensor::zeros(1, h),
                    g3_gate_w: glorot(&mut rng, h, h),
                    g3_gate_b: Tensor::filled(1, h, HIGHWAY_GATE_BIAS),
                };
                (kind, params)
            })
            .collect::<Vec<_>>();
        let head_w = glorot(&mut rng, config.encoders.len() * h, 1);
        ScorerParams::Encoders { encoders, head_w, head_b: Tensor::zeros(1, 1) }
    } else {
        ScorerParams::Linear { weights: glorot(&mut rng, d, 1) }
    };

    Ok(RsaModel { config: config.clone(), scorer })
}

impl RsaModel {
    /// Parameters in canonical order, with stable dotted names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        match &self.scorer {
            ScorerParams::Linear { weights } => vec![("listnet.w".to_string(), weights)],
            ScorerParams::Encoders { encoders, head_w, head_b } => {
                let mut out = Vec::new();
                for (kind, enc) in encoders {
                    for (name, t) in enc.fields() {
                        out.push((format!("encoder.{}.{}", kind.slug(), name), t));
                    }
                }
                out.push(("head.w".to_string(), head_w));
                out.push(("head.b".to_string(), head_b));
                out
            }
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match &mut self.scorer {
            ScorerParams::Linear { weights } => vec![("listnet.w".to_string(), weights)],
            ScorerParams::Encoders { encoders, head_w, head_b } => {
                let mut out = Vec::new();
                for (kind, enc) in encoders.iter_mut() {
                    let slug = kind.slug();
                    for (name, t) in enc.fields_mut() {
                        out.push((format!("encoder.{slug}.{name}"), t));
                    }
                }
                out.push(("head.w".to_string(), head_w));
                out.push(("head.b".to_string(), head_b));
                out
            }
        }
    }

    /// Register every parameter on `tape` (canonical order) and assemble the
    /// variable view used by forward passes. The returned flat list is
    /// aligned with [`RsaModel::named_params`].
    pub fn vars(&self, tape: &Tape) -> (ModelVars, Vec<Var>) {
        let flat: Vec<Var> =
            self.named_params().into_iter().map(|(_, t)| tape.input(t.clone())).collect();
        (self.bind(&flat), flat)
    }

    /// Rebuild the structured view from a flat parameter list in canonical
    /// order (the inverse of the flattening done by [`RsaModel::vars`]).
    pub fn bind(&self, flat: &[Var]) -> ModelVars {
        let mut it = flat.iter().cloned();
        let scorer = match &self.scorer {
            ScorerParams::Linear { .. } => ScorerVars::Linear {
                weights: it.next().expect("missing listnet weights"),
            },
            ScorerParams::Encoders { encoders, .. } => {
                let encoder_vars = encoders
                    .iter()
                    .map(|(kind, _)| (*kind, EncoderVars::bind(&mut it)))
                    .collect();
                ScorerVars::Encoders {
                    encoders: encoder_vars,
                    head_w: it.next().expect("missing head weights"),
                    head_b: it.next().expect("missing head bias"),
                }
            }
        };
        assert!(it.next().is_none(), "too many parameters for this config");
        ModelVars { scorer }
    }

    /// Scores plus per-encoder attention matrices for one query group.
    pub fn forward_group(&self, group: &QueryGroup) -> Result<GroupForward, ModelError> {
        if group.features.cols() != self.config.feature_dim {
            return Err(ModelError::FeatureDimMismatch {
                expected: self.config.feature_dim,
                got: group.features.cols(),
            });
        }
        let tape = Tape::new();
        let (vars, _) = self.vars(&tape);
        let features = tape.constant(group.features.clone());
        let (scores, sigmas) = forward_on_tape(&vars, &features);
        let score_vec = scores.value().data().to_vec();
        let sigma_tensors = sigmas.into_iter().map(|(k, v)| (k, v.value())).collect();
        Ok((score_vec, sigma_tensors))
    }

    pub fn score_group(&self, group: &QueryGroup) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward_group(group)?.0)
    }
}

/// Linear ListNet scoring: s = features . weights (no bias, no activation).
pub fn listnet_score(weights: &Tensor, group: &QueryGroup) -> Result<Vec<f64>, ModelError> {
    if group.features.cols() != weights.rows() {
        return Err(ModelError::FeatureDimMismatch {
            expected: weights.rows(),
            got: group.features.cols(),
        });
    }
    Ok(group.features.matmul(weights).data().to_vec())
}

pub struct EncoderVars {
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub g1_gate_w: Var,
    pub g1_gate_b: Var,
    pub g1_carry_w: Var,
    pub attn_q_w: Var,
    pub attn_k_w: Var,
    pub attn_v_w: Var,
    pub g2_gate_w: Var,
    pub g2_gate_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub g3_gate_w: Var,
    pub g3_gate_b: Var,
}

impl EncoderVars {
    fn bind(it: &mut impl Iterator<Item = Var>) -> EncoderVars {
        let mut next = || it.next().expect("missing encoder parameter");
        EncoderVars {
            ff1_w: next(),
            ff1_b: next(),
            ln1_gain: next(),
            ln1_bias: next(),
            g1_gate_w: next(),
            g1_gate_b: next(),
            g1_carry_w: next(),
            attn_q_w: next(),
            attn_k_w: next(),
            attn_v_w: next(),
            g2_gate_w: next(),
            g2_gate_b: next(),
            ff2_w: next(),
            ff2_b: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            g3_gate_w: next(),
            g3_gate_b: next(),
        }
    }
}

pub enum ScorerVars {
    Linear { weights: Var },
    Encoders { encoders: Vec<(EncoderKind, EncoderVars)>, head_w: Var, head_b: Var },
}

/// Tape-side view of a model's parameters for one forward pass.
pub struct ModelVars {
    pub scorer: ScorerVars,
}

/// y = g (.) transformed + (1 - g) (.) carry, with g = sigmoid(x W + b).
/// `carry_proj` maps the carry path when input and output widths differ.
fn highway(input: &Var, transformed: &Var, gate_w: &Var, gate_b: &Var, carry_proj: Option<&Var>) -> Var {
    let gate = input.matmul(gate_w).add_row(gate_b).sigmoid();
    let carry = match carry_proj {
        Some(p) => input.matmul(p),
        None => input.clone(),
    };
    let (rows, cols) = gate.shape();
    let ones = input.tape().constant(Tensor::filled(rows, cols, 1.0));
    gate.hadamard(transformed).add(&ones.sub(&gate).hadamard(&carry))
}

/// One document encoder: FF1 -> layer norm -> ELU -> highway G1, then
/// sigmoid self-attention with highway G2, then FF2 -> layer norm -> ELU ->
/// highway G3. Returns the n x d_h output and the n x n attention matrix.
pub fn encoder_forward(enc: &EncoderVars, input: &Var) -> (Var, Var) {
    let ff1 = input
        .matmul(&enc.ff1_w)
        .add_row(&enc.ff1_b)
        .normalize_rows(LAYER_NORM_EPS)
        .mul_row(&enc.ln1_gain)
        .add_row(&enc.ln1_bias)
        .elu(ELU_ALPHA);
    let h1 = highway(input, &ff1, &enc.g1_gate_w, &enc.g1_gate_b, Some(&enc.g1_carry_w));

    let queries = h1.matmul(&enc.attn_q_w);
    let keys = h1.matmul(&enc.attn_k_w);
    let sigma = queries.matmul(&keys.transpose()).sigmoid();
    let attended = sigma.matmul(&h1.matmul(&enc.attn_v_w));
    let h2 = highway(&h1, &attended, &enc.g2_gate_w, &enc.g2_gate_b, None);

    let ff2 = h2
        .matmul(&enc.ff2_w)
        .add_row(&enc.ff2_b)
        .normalize_rows(LAYER_NORM_EPS)
        .mul_row(&enc.ln2_gain)
        .add_row(&enc.ln2_bias)
        .elu(ELU_ALPHA);
    let h3 = highway(&h2, &ff2, &enc.g3_gate_w, &enc.g3_gate_b, None);

    (h3, sigma)
}

/// Score a group on the tape: one score per document plus each active
/// encoder's attention matrix.
pub fn forward_on_tape(vars: &ModelVars, features: &Var) -> (Var, Vec<(EncoderKind, Var)>) {
    match &vars.scorer {
        ScorerVars::Linear { weights } => (features.matmul(weights), Vec::new()),
        ScorerVars::Encoders { encoders, head_w, head_b } => {
            let mut outputs = Vec::with_capacity(encoders.len());
            let mut sigmas = Vec::with_capacity(encoders.len());
            for (kind, enc) in encoders {
                let (out, sigma) = encoder_forward(enc, features);
                outputs.push(out);
                sigmas.push((*kind, sigma));
            }
            let concatenated = Var::concat_cols(&outputs);
            let scores = concatenated.matmul(head_w).add_row(head_b);
            (scores, sigmas)
        }
    }
}
