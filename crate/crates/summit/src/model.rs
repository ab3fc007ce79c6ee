//! The encoder-classifier: positional encoding over the flattened token
//! index, N stacked post-norm Transformer encoder blocks, mean pooling,
//! and a dense+linear head with logistic output.
//!
//! Missing-value masking happens only in the first stack: a −1e9 offset is
//! added to every attention-score column whose key token is missing,
//! before the 1/√d scaling, which drives those attention weights to exact
//! zero after the softmax. From the second stack on, formerly missing
//! positions carry contextual embeddings assembled from observed tokens,
//! so no masking is applied there.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSchema;
use crate::embed::{
    init_linear, scane_picks, variant_input_dim, variant_inputs, EmbeddingTable, EvatParams,
    EvatVariant, RouteMap,
};
use crate::gradcheck::ParamSet;
use crate::seed::derive_seed;
use crate::summarize::SummaryMatrix;
use crate::tape::{focal_term, NodeId, Tape};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Attention-score offset standing in for the a → −∞ limit. Added before
/// the 1/√d scaling; large enough that masked keys underflow to exact
/// zero weight after softmax, finite enough to avoid NaN arithmetic.
pub const MASK_OFFSET: f64 = -1e9;

pub const EMBED_TABLE: &str = "embed.table";
pub const EMBED_MAP_W: &str = "embed.map.w";
pub const EMBED_MAP_B: &str = "embed.map.b";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_head: usize,
    pub ff_dim: usize,
    pub num_layer: usize,
    pub classifier_down_factor: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            num_head: 2,
            ff_dim: 64,
            num_layer: 2,
            classifier_down_factor: 2,
            max_seq_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.num_head == 0
            || self.ff_dim == 0
            || self.num_layer == 0
            || self.classifier_down_factor == 0
            || self.max_seq_len == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.num_head != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by num_head {}",
                self.d_model, self.num_head
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config(
                "d_model must be even for the sinusoidal encoding".into(),
            ));
        }
        Ok(())
    }

    pub fn classifier_hidden(&self) -> usize {
        (self.d_model / self.classifier_down_factor).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "focal alpha must be in (0,1], got {}",
                self.alpha
            )));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config(format!(
                "focal gamma must be nonnegative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Focal loss of one probability against a 0/1 label.
pub fn focal_loss(p: f64, y: u8, cfg: &LossConfig) -> f64 {
    focal_term(p, y, cfg.alpha, cfg.gamma)
}

/// Sinusoidal positional encoding over the flattened token index:
/// PE[pos, 2i] = sin(pos/10000^(2i/d)), PE[pos, 2i+1] = cos(same angle).
/// Entries lie in [−1, 1] and the matrix is a pure function of (L, d).
pub fn positional_encoding<F: Scalar>(l: usize, d: usize) -> Result<Tensor<F>> {
    if d % 2 != 0 {
        return Err(Error::Shape(format!(
            "positional encoding needs an even dimension, got {d}"
        )));
    }
    let mut out = Tensor::zeros(l.max(1), d);
    for pos in 0..l {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out.set(pos, 2 * i, F::from_f64(angle.sin()));
            out.set(pos, 2 * i + 1, F::from_f64(angle.cos()));
        }
    }
    Ok(out)
}

/// Head-averaged attention weights recorded per stack during a forward
/// pass, with the token mask they were produced under.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// One row-stochastic L×L matrix per stack (guarded rows excepted).
    pub stacks: Vec<Tensor<f64>>,
    pub mask: Vec<u8>,
    /// Query rows that had no unmasked key and were zeroed by the guard.
    pub guarded_rows: usize,
}

/// One sample's forward pass on a tape.
pub struct ForwardPass {
    pub prob: NodeId,
    pub pooled: NodeId,
    pub trace: Option<AttentionTrace>,
    pub guarded_rows: usize,
}

/// Model wiring: configuration, schema-derived routing, and the loss.
#[derive(Clone, Debug)]
pub struct SummitModel {
    pub cfg: ModelConfig,
    pub loss: LossConfig,
    pub variant: EvatVariant,
    pub schema: FeatureSchema,
    pub routes: RouteMap,
}

impl SummitModel {
    pub fn new(
        cfg: ModelConfig,
        loss: LossConfig,
        variant: EvatVariant,
        schema: FeatureSchema,
    ) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        let routes = RouteMap::new(&schema);
        Ok(Self {
            cfg,
            loss,
            variant,
            schema,
            routes,
        })
    }

    /// Deterministic parameter initialization: weight matrices use the
    /// √(6/(fan_in+fan_out)) uniform bound, gains start at one, biases at
    /// zero, embedding rows at ±1/√d.
    pub fn init_params<F: Scalar>(&self, seed: u64) -> ParamSet<F> {
        let d = self.cfg.d_model;
        let mut params = ParamSet::new();

        match self.variant {
            EvatVariant::Scane => {
                let table =
                    EmbeddingTable::<F>::init(&self.schema, d, derive_seed(seed, "embed-table"));
                params.insert(EMBED_TABLE, table.table);
            }
            variant => {
                let input_dim = variant_input_dim(variant, &self.routes);
                let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "embed-map"));
                params.insert(EMBED_MAP_W, init_linear(input_dim, d, &mut rng));
                params.insert(EMBED_MAP_B, Tensor::zeros(1, d));
            }
        }

        for layer in 0..self.cfg.num_layer {
            let mut rng =
                ChaCha20Rng::seed_from_u64(derive_seed(seed, &format!("encoder-{layer}")));
            for name in ["w_q", "w_k", "w_v", "w_o"] {
                params.insert(
                    format!("encoder.{layer}.{name}"),
                    init_linear::<F>(d, d, &mut rng),
                );
            }
            params.insert(
                format!("encoder.{layer}.ff.w1"),
                init_linear::<F>(d, self.cfg.ff_dim, &mut rng),
            );
            params.insert(
                format!("encoder.{layer}.ff.b1"),
                Tensor::zeros(1, self.cfg.ff_dim),
            );
            params.insert(
                format!("encoder.{layer}.ff.w2"),
                init_linear::<F>(self.cfg.ff_dim, d, &mut rng),
            );
            params.insert(format!("encoder.{layer}.ff.b2"), Tensor::zeros(1, d));
            for norm in ["norm1", "norm2"] {
                params.insert(
                    format!("encoder.{layer}.{norm}.gain"),
                    Tensor::matrix(1, d, vec![F::ONE; d]).expect("row"),
                );
                params.insert(
                    format!("encoder.{layer}.{norm}.bias"),
                    Tensor::zeros(1, d),
                );
            }
        }

        let hidden = self.cfg.classifier_hidden();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "classifier"));
        params.insert("classifier.w1", init_linear::<F>(d, hidden, &mut rng));
        params.insert("classifier.b1", Tensor::zeros(1, hidden));
        params.insert("classifier.w2", init_linear::<F>(hidden, 1, &mut rng));
        params.insert("classifier.b2", Tensor::zeros(1, 1));
        params
    }

    /// Put every parameter on the tape as a trainable leaf.
    pub fn params_to_tape<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        params: &ParamSet<F>,
    ) -> BTreeMap<String, NodeId> {
        params
            .iter()
            .map(|(path, t)| (path.clone(), tape.param(t.clone())))
            .collect()
    }

    /// Token matrix node for one summary, routed through the configured
    /// embedding. Returns the node and the flat mask M̄.
    pub fn tokens_on_tape<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        nodes: &BTreeMap<String, NodeId>,
        sm: &SummaryMatrix,
    ) -> Result<(NodeId, Vec<u8>)> {
        let mask = sm.flat_mask().to_vec();
        let tokens = match self.variant {
            EvatVariant::Scane => {
                let picks = scane_picks::<F>(sm, &self.routes, &self.schema)?;
                let table = *nodes
                    .get(EMBED_TABLE)
                    .ok_or_else(|| Error::Shape("missing embed.table".into()))?;
                tape.scaled_gather(table, picks)?
            }
            variant => {
                let inputs = variant_inputs::<F>(sm, variant, &self.routes, &self.schema)?;
                let z = tape.constant(inputs);
                let w = *nodes
                    .get(EMBED_MAP_W)
                    .ok_or_else(|| Error::Shape("missing embed.map.w".into()))?;
                let b = *nodes
                    .get(EMBED_MAP_B)
                    .ok_or_else(|| Error::Shape("missing embed.map.b".into()))?;
                let mut h = tape.matmul(z, w)?;
                h = tape.add_row(h, b)?;
                if matches!(variant, EvatVariant::IndexFusion | EvatVariant::OnehotFusion) {
                    h = tape.gelu(h);
                }
                tape.mask_rows(h, &mask)?
            }
        };
        Ok((tokens, mask))
    }

    /// One multi-head attention sub-layer. `mask` is applied to key
    /// columns (first stack only; later stacks pass all-ones).
    fn attention<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        nodes: &BTreeMap<String, NodeId>,
        layer: usize,
        z: NodeId,
        mask: &[u8],
        record: bool,
    ) -> Result<(NodeId, Option<Tensor<f64>>, usize)> {
        let d = self.cfg.d_model;
        let heads = self.cfg.num_head;
        let dh = d / heads;
        let l = tape.value(z).rows();

        // Degenerate input: every key masked. Softmax over all-suppressed
        // scores would come out uniform, so guard with an explicit zero
        // attention output instead.
        if mask.iter().all(|&m| m == 0) {
            let zero = tape.constant(Tensor::zeros(l, d));
            let w = record.then(|| Tensor::<f64>::zeros(l, l));
            return Ok((zero, w, l));
        }

        let p = |name: &str| -> Result<NodeId> {
            nodes
                .get(&format!("encoder.{layer}.{name}"))
                .copied()
                .ok_or_else(|| Error::Shape(format!("missing encoder.{layer}.{name}")))
        };
        let q = tape.matmul(z, p("w_q")?)?;
        let k = tape.matmul(z, p("w_k")?)?;
        let v = tape.matmul(z, p("w_v")?)?;

        let needs_offset = mask.iter().any(|&m| m == 0);
        let offset = if needs_offset {
            let mut o = Tensor::zeros(l, l);
            for c in 0..l {
                if mask[c] == 0 {
                    for r in 0..l {
                        o.set(r, c, F::from_f64(MASK_OFFSET));
                    }
                }
            }
            Some(tape.constant(o))
        } else {
            None
        };

        let inv_sqrt_d = F::ONE / F::from_f64(d as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(heads);
        let mut head_weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let mut scores = tape.matmul(qh, kt)?;
            if let Some(off) = offset {
                scores = tape.add(scores, off)?;
            }
            let scaled = tape.scale(scores, inv_sqrt_d);
            let weights = tape.softmax_rows(scaled)?;
            head_weights.push(weights);
            head_outputs.push(tape.matmul(weights, vh)?);
        }
        let merged = tape.concat_cols(&head_outputs)?;
        let out = tape.matmul(merged, p("w_o")?)?;

        let recorded = record.then(|| {
            let mut avg = Tensor::<f64>::zeros(l, l);
            for &wid in &head_weights {
                let w = tape.value(wid);
                for i in 0..l {
                    for j in 0..l {
                        let v = avg.at(i, j) + w.at(i, j).to_f64();
                        avg.set(i, j, v);
                    }
                }
            }
            let inv = 1.0 / heads as f64;
            avg.map(|x| x * inv)
        });
        Ok((out, recorded, 0))
    }

    /// Encoder stack over a token node: positional encoding added at
    /// observed positions (missing tokens stay zero vectors), masked
    /// attention in stack 1, plain attention after, mean-pooled over all
    /// token outputs.
    pub fn encoder_forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        nodes: &BTreeMap<String, NodeId>,
        tokens: NodeId,
        mask: &[u8],
        record: bool,
        pe_override: Option<&Tensor<F>>,
    ) -> Result<(NodeId, Option<AttentionTrace>, usize)> {
        let d = self.cfg.d_model;
        let l = tape.value(tokens).rows();
        if tape.value(tokens).cols() != d {
            return Err(Error::Shape(format!(
                "token width {} != d_model {d}",
                tape.value(tokens).cols()
            )));
        }
        if l != mask.len() {
            return Err(Error::Shape("mask length != token count".into()));
        }
        if l > self.cfg.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence length {l} exceeds configured maximum {}",
                self.cfg.max_seq_len
            )));
        }

        let pe = match pe_override {
            Some(t) => t.clone(),
            None => positional_encoding::<F>(l, d)?,
        };
        let pe_masked = crate::tensor::mask_rows(&pe, mask)?;
        let pe_node = tape.constant(pe_masked);
        let mut z = tape.add(tokens, pe_node)?;

        let ones = vec![1u8; l];
        let eps = F::from_f64(1e-5);
        let mut stacks = Vec::new();
        let mut guarded = 0usize;
        for layer in 0..self.cfg.num_layer {
            let layer_mask: &[u8] = if layer == 0 { mask } else { &ones };
            let (attn, weights, g) = self.attention(tape, nodes, layer, z, layer_mask, record)?;
            guarded += g;
            if let Some(w) = weights {
                stacks.push(w);
            }
            let p = |name: &str| -> Result<NodeId> {
                nodes
                    .get(&format!("encoder.{layer}.{name}"))
                    .copied()
                    .ok_or_else(|| Error::Shape(format!("missing encoder.{layer}.{name}")))
            };
            let res1 = tape.add(z, attn)?;
            let h1 = tape.layer_norm(res1, p("norm1.gain")?, p("norm1.bias")?, eps)?;

            let mut ff = tape.matmul(h1, p("ff.w1")?)?;
            ff = tape.add_row(ff, p("ff.b1")?)?;
            ff = tape.gelu(ff);
            ff = tape.matmul(ff, p("ff.w2")?)?;
            ff = tape.add_row(ff, p("ff.b2")?)?;
            let res2 = tape.add(h1, ff)?;
            z = tape.layer_norm(res2, p("norm2.gain")?, p("norm2.bias")?, eps)?;
        }

        let pooled = tape.mean_rows(z)?;
        let trace = record.then(|| AttentionTrace {
            stacks,
            mask: mask.to_vec(),
            guarded_rows: guarded,
        });
        Ok((pooled, trace, guarded))
    }

    /// Classifier head: dense layer (linear + GELU) then a linear layer
    /// with logistic squashing.
    pub fn classify<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        nodes: &BTreeMap<String, NodeId>,
        pooled: NodeId,
    ) -> Result<NodeId> {
        let p = |name: &str| -> Result<NodeId> {
            nodes
                .get(name)
                .copied()
                .ok_or_else(|| Error::Shape(format!("missing {name}")))
        };
        let mut h = tape.matmul(pooled, p("classifier.w1")?)?;
        h = tape.add_row(h, p("classifier.b1")?)?;
        h = tape.gelu(h);
        let mut logit = tape.matmul(h, p("classifier.w2")?)?;
        logit = tape.add_row(logit, p("classifier.b2")?)?;
        Ok(tape.sigmoid(logit))
    }

    /// Full forward for one summary on an existing tape.
    pub fn forward_on_tape<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        nodes: &BTreeMap<String, NodeId>,
        sm: &SummaryMatrix,
        record: bool,
    ) -> Result<ForwardPass> {
        let (tokens, mask) = self.tokens_on_tape(tape, nodes, sm)?;
        let (pooled, trace, guarded_rows) =
            self.encoder_forward(tape, nodes, tokens, &mask, record, None)?;
        let prob = self.classify(tape, nodes, pooled)?;
        Ok(ForwardPass {
            prob,
            pooled,
            trace,
            guarded_rows,
        })
    }

    /// Mean focal loss over a batch of summaries, built on one tape.
    pub fn batch_loss_on_tape<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        nodes: &BTreeMap<String, NodeId>,
        batch: &[(&SummaryMatrix, u8)],
    ) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut probs = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for (sm, y) in batch {
            let pass = self.forward_on_tape(tape, nodes, sm, false)?;
            probs.push(pass.prob);
            labels.push(*y);
        }
        let stacked = tape.stack_rows(&probs)?;
        tape.focal_loss(
            stacked,
            &labels,
            F::from_f64(self.loss.alpha),
            F::from_f64(self.loss.gamma),
        )
    }

    /// Inference convenience: probability (and optional trace) for one
    /// summary.
    pub fn predict<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        sm: &SummaryMatrix,
        record: bool,
    ) -> Result<(f64, Option<AttentionTrace>)> {
        let mut tape: Tape<F> = Tape::new();
        let nodes = self.params_to_tape(&mut tape, params);
        let pass = self.forward_on_tape(&mut tape, &nodes, sm, record)?;
        let p = tape.value(pass.prob).item()?.to_f64();
        if !p.is_finite() {
            return Err(Error::Numeric("non-finite prediction".into()));
        }
        Ok((p, pass.trace))
    }

    /// Extract the embedding table view from a parameter set (scaled
    /// route only).
    pub fn embedding_table<F: Scalar>(&self, params: &ParamSet<F>) -> Result<EmbeddingTable<F>> {
        let t = params.require(EMBED_TABLE)?;
        EmbeddingTable::from_tensor(&self.schema, t.clone())
    }

    /// Extract the variant map view (naive variants only).
    pub fn evat_params<F: Scalar>(&self, params: &ParamSet<F>) -> Result<EvatParams<F>> {
        Ok(EvatParams {
            variant: self.variant,
            w: params.require(EMBED_MAP_W)?.clone(),
            b: params.require(EMBED_MAP_B)?.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureDesc, FeatureKind};

    fn schema_nm() -> FeatureSchema {
        FeatureSchema::new(vec![
            FeatureDesc {
                name: "a".into(),
                kind: FeatureKind::Numerical,
                categories: None,
            },
            FeatureDesc {
                name: "b".into(),
                kind: FeatureKind::Numerical,
                categories: None,
            },
        ])
        .unwrap()
    }

    fn tiny_model(n_layer: usize) -> SummitModel {
        SummitModel::new(
            ModelConfig {
                d_model: 8,
                num_head: 2,
                ff_dim: 16,
                num_layer: n_layer,
                classifier_down_factor: 2,
                max_seq_len: 64,
            },
            LossConfig::default(),
            EvatVariant::Scane,
            schema_nm(),
        )
        .unwrap()
    }

    fn random_summary(seed: u64, k: usize, n_cols: usize, missing: f64) -> SummaryMatrix {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut sm = SummaryMatrix::all_missing(k, n_cols);
        for w in 0..k {
            for c in 0..n_cols - 1 {
                if rng.random_range(0.0..1.0) >= missing {
                    sm.set(w, c, rng.random_range(-2.0..2.0), true);
                }
            }
            sm.set(w, n_cols - 1, rng.random_range(0.0..4.0_f64).floor(), true);
        }
        sm
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding::<f64>(6, 8).unwrap();
        for i in 0..4 {
            assert_eq!(pe.at(0, 2 * i), 0.0);
            assert_eq!(pe.at(0, 2 * i + 1), 1.0);
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let pe2 = positional_encoding::<f64>(6, 8).unwrap();
        assert_eq!(pe, pe2);
        assert!(positional_encoding::<f64>(4, 7).is_err());
    }

    #[test]
    fn uniform_scores_attend_uniformly_over_unmasked_keys() {
        // Q=K=0 makes all scores equal; with token 2 of 3 masked, every
        // attention row must be [0.5, 0, 0.5].
        let model = tiny_model(1);
        let mut params = model.init_params::<f64>(3);
        for name in ["encoder.0.w_q", "encoder.0.w_k"] {
            let t = params.get_mut(name).unwrap();
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let nodes = model.params_to_tape(&mut tape, &params);
        let tokens = tape.constant(Tensor::matrix(3, 8, (0..24).map(|i| i as f64 * 0.1).collect()).unwrap());
        let mask = [1u8, 0, 1];
        let (_, w, _) = model
            .attention(&mut tape, &nodes, 0, tokens, &mask, true)
            .unwrap();
        let w = w.unwrap();
        for r in 0..3 {
            assert!((w.at(r, 0) - 0.5).abs() < 1e-12);
            assert_eq!(w.at(r, 1), 0.0);
            assert!((w.at(r, 2) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn all_ones_mask_equals_unmasked_attention() {
        let model = tiny_model(1);
        let params = model.init_params::<f64>(5);
        let sm = random_summary(8, 4, 3, 0.0);

        let run = |mask_all_ones: bool| -> Tensor<f64> {
            let mut tape = Tape::new();
            let nodes = model.params_to_tape(&mut tape, &params);
            let (tokens, mask) = model.tokens_on_tape(&mut tape, &nodes, &sm).unwrap();
            let m = if mask_all_ones {
                vec![1u8; mask.len()]
            } else {
                mask
            };
            let (out, _, _) = model
                .attention(&mut tape, &nodes, 0, tokens, &m, false)
                .unwrap();
            tape.value(out).clone()
        };
        // The summary has no missing cells, so its real mask is all ones;
        // both paths must agree bitwise.
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn first_stack_masked_columns_are_exactly_zero() {
        let model = tiny_model(2);
        let params = model.init_params::<f64>(17);
        for seed in 0..20 {
            let sm = random_summary(seed, 4, 3, 0.4);
            let (_, trace) = model.predict(&params, &sm, true).unwrap();
            let trace = trace.unwrap();
            let w1 = &trace.stacks[0];
            for (c, &m) in trace.mask.iter().enumerate() {
                if m == 0 {
                    for r in 0..w1.rows() {
                        assert_eq!(w1.at(r, c), 0.0, "seed {seed} col {c}");
                    }
                }
            }
            // Rows stay stochastic.
            for r in 0..w1.rows() {
                let sum: f64 = w1.row_slice(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn second_stack_attends_to_formerly_missing_positions() {
        let model = tiny_model(2);
        let params = model.init_params::<f64>(23);
        let sm = random_summary(4, 4, 3, 0.5);
        let (_, trace) = model.predict(&params, &sm, true).unwrap();
        let trace = trace.unwrap();
        let w2 = &trace.stacks[1];
        let masked_cols: Vec<usize> = trace
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 0)
            .map(|(c, _)| c)
            .collect();
        assert!(!masked_cols.is_empty(), "want a sample with missing cells");
        let any_nonzero = masked_cols
            .iter()
            .any(|&c| (0..w2.rows()).any(|r| w2.at(r, c) != 0.0));
        assert!(any_nonzero);
    }

    #[test]
    fn masked_cell_filler_never_changes_the_probability() {
        let model = tiny_model(2);
        let params = model.init_params::<f32>(29);
        let mut sm = random_summary(31, 4, 3, 0.5);
        let (p0, _) = model.predict(&params, &sm, false).unwrap();
        for w in 0..sm.k() {
            for c in 0..sm.n_cols() {
                if !sm.is_observed(w, c) {
                    sm.set_masked_filler(w, c, 9e12);
                }
            }
        }
        let (p1, _) = model.predict(&params, &sm, false).unwrap();
        assert_eq!(p0.to_bits(), p1.to_bits());
    }

    #[test]
    fn all_missing_input_depends_on_parameters_only() {
        let model = tiny_model(1);
        let params = model.init_params::<f64>(37);
        let a = SummaryMatrix::all_missing(4, 3);
        let mut b = SummaryMatrix::all_missing(4, 3);
        for w in 0..4 {
            for c in 0..3 {
                b.set_masked_filler(w, c, -77.0);
            }
        }
        let (pa, ta) = model.predict(&params, &a, true).unwrap();
        let (pb, _) = model.predict(&params, &b, true).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ta.unwrap().guarded_rows, 12);
    }

    #[test]
    fn classifier_examples() {
        let model = tiny_model(1);
        let mut params = model.init_params::<f64>(41);
        for name in ["classifier.w1", "classifier.b1", "classifier.w2", "classifier.b2"] {
            params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let nodes = model.params_to_tape(&mut tape, &params);
        let pooled = tape.constant(Tensor::row(vec![0.3; 8]));
        let p = model.classify(&mut tape, &nodes, pooled).unwrap();
        assert_eq!(tape.value(p).item().unwrap(), 0.5);

        // Monotone in the final-layer bias.
        let mut last = 0.0;
        for (i, bias) in [-2.0, -1.0, 0.0, 1.0, 2.0].iter().enumerate() {
            params.get_mut("classifier.b2").unwrap().data_mut()[0] = *bias;
            let mut tape = Tape::new();
            let nodes = model.params_to_tape(&mut tape, &params);
            let pooled = tape.constant(Tensor::row(vec![0.3; 8]));
            let p = model.classify(&mut tape, &nodes, pooled).unwrap();
            let v = tape.value(p).item().unwrap();
            assert!(v > 0.0 && v < 1.0);
            if i > 0 {
                assert!(v > last);
            }
            last = v;
        }
    }

    #[test]
    fn pooling_is_invariant_under_token_and_pe_permutation() {
        let model = tiny_model(2);
        let params = model.init_params::<f64>(43);
        let sm = random_summary(5, 4, 3, 0.3);

        let forward = |perm: &[usize]| -> f64 {
            let mut tape = Tape::new();
            let nodes = model.params_to_tape(&mut tape, &params);
            let (tokens, mask) = model.tokens_on_tape(&mut tape, &nodes, &sm).unwrap();
            let l = mask.len();
            let base = tape.value(tokens).clone();
            let mut permuted = Tensor::zeros(l, 8);
            let pe = positional_encoding::<f64>(l, 8).unwrap();
            let mut pe_perm = Tensor::zeros(l, 8);
            let mut mask_perm = vec![0u8; l];
            for (new, &old) in perm.iter().enumerate() {
                for c in 0..8 {
                    permuted.set(new, c, base.at(old, c));
                    pe_perm.set(new, c, pe.at(old, c));
                }
                mask_perm[new] = mask[old];
            }
            let tok_node = tape.constant(permuted);
            let (pooled, _, _) = model
                .encoder_forward(&mut tape, &nodes, tok_node, &mask_perm, false, Some(&pe_perm))
                .unwrap();
            let p = model.classify(&mut tape, &nodes, pooled).unwrap();
            tape.value(p).item().unwrap()
        };

        let l = 12;
        let identity: Vec<usize> = (0..l).collect();
        let mut swapped = identity.clone();
        swapped.swap(2, 9);
        let a = forward(&identity);
        let b = forward(&swapped);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn full_model_gradcheck_smoke() {
        let model = tiny_model(1);
        let params = model.init_params::<f64>(47);
        let sm0 = random_summary(51, 2, 3, 0.4);
        let sm1 = random_summary(52, 2, 3, 0.4);
        let report = crate::gradcheck::grad_check(
            |p, want| {
                let mut tape = Tape::new();
                let nodes = model.params_to_tape(&mut tape, p);
                let loss_id =
                    model.batch_loss_on_tape(&mut tape, &nodes, &[(&sm0, 1), (&sm1, 0)])?;
                let loss = tape.value(loss_id).item()?;
                let grads = if want {
                    let g = tape.backward(loss_id, 1.0)?;
                    let mut out = ParamSet::new();
                    for (path, id) in &nodes {
                        if let Some(t) = g.get(*id) {
                            out.insert(path.clone(), t.clone());
                        }
                    }
                    Some(out)
                } else {
                    None
                };
                Ok((loss, grads))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.pass,
            "max rel err {} at {:?}",
            report.global_max, report.worst_path
        );
    }
}
