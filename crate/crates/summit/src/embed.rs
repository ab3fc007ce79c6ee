//! Token construction: every observed cell of a summary matrix becomes one
//! d-dimensional token, missing cells become zero vectors.
//!
//! The scaled route assigns each numerical column a trainable direction
//! vector u_j and emits value·u_j, so the feature fixes the token's
//! direction and the observed value its magnitude and sign. Categorical
//! columns get one trainable vector per (feature, category) pair, used
//! unscaled. The naive variants used for ablations map an explicit
//! (indicator, value) encoding through a single trained layer instead.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, FeatureSchema};
use crate::summarize::SummaryMatrix;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvatVariant {
    #[default]
    Scane,
    IndexConcat,
    IndexFusion,
    OnehotConcat,
    OnehotFusion,
}

impl EvatVariant {
    pub const ALL: [EvatVariant; 5] = [
        EvatVariant::Scane,
        EvatVariant::IndexConcat,
        EvatVariant::IndexFusion,
        EvatVariant::OnehotConcat,
        EvatVariant::OnehotFusion,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EvatVariant::Scane => "scane",
            EvatVariant::IndexConcat => "index_concat",
            EvatVariant::IndexFusion => "index_fusion",
            EvatVariant::OnehotConcat => "onehot_concat",
            EvatVariant::OnehotFusion => "onehot_fusion",
        }
    }
}

impl std::str::FromStr for EvatVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EvatVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown embedding variant '{s}'")))
    }
}

/// How each summary column addresses embedding rows: numerical columns
/// (including the entry-count column) own one row, categorical columns own
/// a contiguous block of rows, one per category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteMap {
    labels: Vec<String>,
    /// Per column: the row of a numerical route.
    numerical: Vec<Option<usize>>,
    /// Per column: first row of a categorical block.
    cat_base: Vec<Option<usize>>,
    /// Per column: offset into the compact category space (for one-hot
    /// encodings), where categorical vocabularies are laid out end to end.
    cat_offset: Vec<Option<usize>>,
    n_cols: usize,
    total_rows: usize,
    total_categories: usize,
}

impl RouteMap {
    pub fn new(schema: &FeatureSchema) -> Self {
        let n = schema.len();
        let mut labels = Vec::new();
        let mut numerical = vec![None; n + 1];
        let mut cat_base = vec![None; n + 1];
        let mut cat_offset = vec![None; n + 1];
        let mut categories = 0usize;
        for (j, f) in schema.features().iter().enumerate() {
            match f.kind {
                FeatureKind::Numerical => {
                    numerical[j] = Some(labels.len());
                    labels.push(f.name.clone());
                }
                FeatureKind::Categorical => {
                    cat_base[j] = Some(labels.len());
                    cat_offset[j] = Some(categories);
                    let vocab = f.categories.as_ref().expect("validated schema");
                    categories += vocab.len();
                    for c in vocab {
                        labels.push(format!("{}={}", f.name, c));
                    }
                }
            }
        }
        numerical[n] = Some(labels.len());
        labels.push("__entry_count".into());
        Self {
            total_rows: labels.len(),
            labels,
            numerical,
            cat_base,
            cat_offset,
            n_cols: n + 1,
            total_categories: categories,
        }
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn total_rows(&self) -> usize {
        self.total_rows
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Trainable embedding rows addressed through a [`RouteMap`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<F> {
    pub d: usize,
    pub table: Tensor<F>,
    pub routes: RouteMap,
}

impl<F: Scalar> EmbeddingTable<F> {
    /// Rows drawn uniformly from [−1/√d, 1/√d].
    pub fn init(schema: &FeatureSchema, d: usize, seed: u64) -> Self {
        let routes = RouteMap::new(schema);
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = (0..routes.total_rows * d)
            .map(|_| F::from_f64(rng.random_range(-bound..bound)))
            .collect();
        Self {
            d,
            table: Tensor::matrix(routes.total_rows, d, data).expect("sized by construction"),
            routes,
        }
    }

    pub fn from_tensor(schema: &FeatureSchema, table: Tensor<F>) -> Result<Self> {
        let routes = RouteMap::new(schema);
        if table.rows() != routes.total_rows {
            return Err(Error::Shape(format!(
                "embedding table has {} rows, schema routes need {}",
                table.rows(),
                routes.total_rows
            )));
        }
        Ok(Self {
            d: table.cols(),
            table,
            routes,
        })
    }

    pub fn cast<G: Scalar>(&self) -> EmbeddingTable<G> {
        EmbeddingTable {
            d: self.d,
            table: self.table.cast(),
            routes: self.routes.clone(),
        }
    }
}

/// L×d token matrix with its flat mask M̄ and the (window, column) layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<F> {
    pub tokens: Tensor<F>,
    pub mask: Vec<u8>,
    pub k: usize,
    pub n_cols: usize,
}

impl<F: Scalar> TokenSequence<F> {
    pub fn len(&self) -> usize {
        self.k * self.n_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major flatten: (window, column) → flat token position.
    pub fn flat_index(k: usize, n_cols: usize, window: usize, col: usize) -> usize {
        debug_assert!(window < k && col < n_cols);
        let _ = k;
        window * n_cols + col
    }

    /// Inverse of [`Self::flat_index`].
    pub fn unflatten(n_cols: usize, flat: usize) -> (usize, usize) {
        (flat / n_cols, flat % n_cols)
    }
}

/// The per-token gather plan behind the scaled embedding: observed
/// numerical cells scale their feature row by the stored value, observed
/// categorical cells pick their category row unscaled, missing cells pick
/// nothing (zero token).
pub fn scane_picks<F: Scalar>(
    sm: &SummaryMatrix,
    routes: &RouteMap,
    schema: &FeatureSchema,
) -> Result<Vec<Option<(usize, F)>>> {
    if sm.n_cols() != routes.n_cols {
        return Err(Error::Shape(format!(
            "summary has {} columns, route map expects {}",
            sm.n_cols(),
            routes.n_cols
        )));
    }
    let mut picks = Vec::with_capacity(sm.k() * sm.n_cols());
    for w in 0..sm.k() {
        for col in 0..sm.n_cols() {
            if !sm.is_observed(w, col) {
                picks.push(None);
                continue;
            }
            let v = sm.value(w, col);
            let pick = if let Some(row) = routes.numerical[col] {
                (row, F::from_f64(v))
            } else {
                let base = routes.cat_base[col].expect("column is categorical");
                let cat = v as usize;
                if v.fract() != 0.0 || cat >= schema.vocab_len(col) {
                    return Err(Error::Data(format!(
                        "category index {v} out of vocabulary for column {col}"
                    )));
                }
                (base + cat, F::ONE)
            };
            picks.push(Some(pick));
        }
    }
    Ok(picks)
}

/// Scaled embedding of a summary matrix (pure route; the training path
/// replays the same plan on the gradient tape).
pub fn scane_embed<F: Scalar>(
    sm: &SummaryMatrix,
    table: &EmbeddingTable<F>,
    schema: &FeatureSchema,
) -> Result<TokenSequence<F>> {
    let picks = scane_picks::<F>(sm, &table.routes, schema)?;
    let mut tape: Tape<F> = Tape::new();
    let t = tape.constant(table.table.clone());
    let tokens = tape.scaled_gather(t, picks)?;
    Ok(TokenSequence {
        tokens: tape.value(tokens).clone(),
        mask: sm.flat_mask().to_vec(),
        k: sm.k(),
        n_cols: sm.n_cols(),
    })
}

/// Trainable map of one naive variant: a single linear layer (concat) or a
/// dense layer, i.e. linear + GELU (fusion).
#[derive(Clone, Debug, PartialEq)]
pub struct EvatParams<F> {
    pub variant: EvatVariant,
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

/// Width of the explicit (indicator, value) encoding fed to a variant map.
pub fn variant_input_dim(variant: EvatVariant, routes: &RouteMap) -> usize {
    match variant {
        EvatVariant::Scane => 0,
        EvatVariant::IndexConcat | EvatVariant::IndexFusion => 2,
        EvatVariant::OnehotConcat | EvatVariant::OnehotFusion => {
            routes.n_cols + 1 + routes.total_categories
        }
    }
}

/// Uniform init with bound √(6/(fan_in+fan_out)).
pub fn init_linear<F: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Tensor<F> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| F::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

impl<F: Scalar> EvatParams<F> {
    pub fn init(variant: EvatVariant, routes: &RouteMap, d: usize, seed: u64) -> Result<Self> {
        if variant == EvatVariant::Scane {
            return Err(Error::Config(
                "the scaled route has no variant map parameters".into(),
            ));
        }
        let input_dim = variant_input_dim(variant, routes);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Ok(Self {
            variant,
            w: init_linear(input_dim, d, &mut rng),
            b: Tensor::zeros(1, d),
        })
    }

    pub fn cast<G: Scalar>(&self) -> EvatParams<G> {
        EvatParams {
            variant: self.variant,
            w: self.w.cast(),
            b: self.b.cast(),
        }
    }
}

/// Explicit encoding of every cell for the naive variants: per flat token
/// position one input row. Index variants use [column index, value];
/// one-hot variants use [column one-hot | value | category one-hot].
/// Categorical cells put their category index in the value slot for index
/// variants, and light their category bit for one-hot variants.
pub fn variant_inputs<F: Scalar>(
    sm: &SummaryMatrix,
    variant: EvatVariant,
    routes: &RouteMap,
    schema: &FeatureSchema,
) -> Result<Tensor<F>> {
    if variant == EvatVariant::Scane {
        return Err(Error::Config("scane has no explicit input encoding".into()));
    }
    let l = sm.k() * sm.n_cols();
    let dim = variant_input_dim(variant, routes);
    let mut out = Tensor::zeros(l, dim);
    for w in 0..sm.k() {
        for col in 0..sm.n_cols() {
            let pos = TokenSequence::<F>::flat_index(sm.k(), sm.n_cols(), w, col);
            if !sm.is_observed(w, col) {
                continue;
            }
            let v = sm.value(w, col);
            let categorical =
                col < schema.len() && schema.features()[col].kind == FeatureKind::Categorical;
            if categorical && (v.fract() != 0.0 || (v as usize) >= schema.vocab_len(col)) {
                return Err(Error::Data(format!(
                    "category index {v} out of vocabulary for column {col}"
                )));
            }
            match variant {
                EvatVariant::IndexConcat | EvatVariant::IndexFusion => {
                    out.set(pos, 0, F::from_f64(col as f64));
                    out.set(pos, 1, F::from_f64(v));
                }
                EvatVariant::OnehotConcat | EvatVariant::OnehotFusion => {
                    out.set(pos, col, F::ONE);
                    if categorical {
                        let slot = routes.n_cols + 1 + routes.cat_offset[col].expect("categorical")
                            + v as usize;
                        out.set(pos, slot, F::ONE);
                    } else {
                        out.set(pos, routes.n_cols, F::from_f64(v));
                    }
                }
                EvatVariant::Scane => unreachable!(),
            }
        }
    }
    Ok(out)
}

/// Naive-variant embedding (pure route).
pub fn evat_embed<F: Scalar>(
    sm: &SummaryMatrix,
    params: &EvatParams<F>,
    routes: &RouteMap,
    schema: &FeatureSchema,
) -> Result<TokenSequence<F>> {
    let inputs = variant_inputs::<F>(sm, params.variant, routes, schema)?;
    let mask = sm.flat_mask().to_vec();
    let mut tape: Tape<F> = Tape::new();
    let z = tape.constant(inputs);
    let w = tape.constant(params.w.clone());
    let b = tape.constant(params.b.clone());
    let mut h = tape.matmul(z, w)?;
    h = tape.add_row(h, b)?;
    if matches!(
        params.variant,
        EvatVariant::IndexFusion | EvatVariant::OnehotFusion
    ) {
        h = tape.gelu(h);
    }
    let masked = tape.mask_rows(h, &mask)?;
    Ok(TokenSequence {
        tokens: tape.value(masked).clone(),
        mask,
        k: sm.k(),
        n_cols: sm.n_cols(),
    })
}

/// CSV export of the embedding rows: `feature,e0,...,e{d-1}`, one data row
/// per route in deterministic route order.
pub fn write_embeddings_csv<F: Scalar>(
    table: &EmbeddingTable<F>,
    w: impl Write,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["feature".to_string()];
    header.extend((0..table.d).map(|i| format!("e{i}")));
    wtr.write_record(&header)
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    for (row, label) in table.routes.labels.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend(
            table
                .table
                .row_slice(row)
                .iter()
                .map(|v| format!("{}", v.to_f64())),
        );
        wtr.write_record(&rec)
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureDesc;

    fn schema_mixed() -> FeatureSchema {
        FeatureSchema::new(vec![
            FeatureDesc {
                name: "x".into(),
                kind: FeatureKind::Numerical,
                categories: None,
            },
            FeatureDesc {
                name: "c".into(),
                kind: FeatureKind::Categorical,
                categories: Some(vec!["a".into(), "b".into(), "g".into()]),
            },
        ])
        .unwrap()
    }

    fn table_with(schema: &FeatureSchema, d: usize, rows: Vec<Vec<f64>>) -> EmbeddingTable<f64> {
        let data = rows.into_iter().flatten().collect::<Vec<_>>();
        let routes = RouteMap::new(schema);
        EmbeddingTable::from_tensor(
            schema,
            Tensor::matrix(routes.total_rows, d, data).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn scaled_token_is_value_times_feature_row() {
        let schema = schema_mixed();
        // Routes: x, c=a, c=b, c=g, __entry_count.
        let table = table_with(
            &schema,
            2,
            vec![
                vec![0.5, -1.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
                vec![0.25, 0.25],
            ],
        );
        let mut sm = SummaryMatrix::all_missing(1, 3);
        sm.set(0, 0, 2.0, true);
        sm.set(0, 1, 2.0, true); // category g
        sm.set(0, 2, 1.0, true);
        let seq = scane_embed(&sm, &table, &schema).unwrap();
        assert_eq!(seq.tokens.row_slice(0), &[1.0, -2.0]);
        assert_eq!(seq.tokens.row_slice(1), &[1.0, 1.0]);
        assert_eq!(seq.tokens.row_slice(2), &[0.25, 0.25]);
        assert_eq!(seq.mask, vec![1, 1, 1]);
    }

    #[test]
    fn missing_cells_embed_to_zero_with_mask_zero() {
        let schema = schema_mixed();
        let table = EmbeddingTable::<f64>::init(&schema, 4, 9);
        let mut sm = SummaryMatrix::all_missing(2, 3);
        sm.set(0, 0, 1.5, true);
        sm.set(0, 2, 1.0, true);
        sm.set(1, 2, 0.0, true);
        // Arbitrary fillers behind masked cells must not leak through.
        sm.set_masked_filler(1, 0, 1234.5);
        let seq = scane_embed(&sm, &table, &schema).unwrap();
        for (pos, &m) in seq.mask.iter().enumerate() {
            if m == 0 {
                assert!(seq.tokens.row_slice(pos).iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(seq.mask, sm.flat_mask());
    }

    #[test]
    fn zero_observed_value_gives_zero_token_but_stays_unmasked() {
        let schema = schema_mixed();
        let table = EmbeddingTable::<f64>::init(&schema, 4, 9);
        let mut sm = SummaryMatrix::all_missing(1, 3);
        sm.set(0, 0, 0.0, true);
        sm.set(0, 2, 0.0, true);
        let seq = scane_embed(&sm, &table, &schema).unwrap();
        assert!(seq.tokens.row_slice(0).iter().all(|&v| v == 0.0));
        assert_eq!(seq.mask[0], 1);
    }

    #[test]
    fn scaling_linearity_is_exact_on_dyadic_values() {
        let schema = schema_mixed();
        // Dyadic entries keep every product exactly representable.
        let table = table_with(
            &schema,
            2,
            vec![
                vec![0.375, -0.625],
                vec![0.5, 0.5],
                vec![0.25, 0.125],
                vec![1.0, 0.75],
                vec![0.0625, 0.5],
            ],
        );
        let x = 1.25f64;
        for alpha in [-2.0f64, 0.5, 10.0] {
            let mut sm_base = SummaryMatrix::all_missing(1, 3);
            sm_base.set(0, 0, x, true);
            let mut sm_scaled = SummaryMatrix::all_missing(1, 3);
            sm_scaled.set(0, 0, alpha * x, true);
            let t_base = scane_embed(&sm_base, &table, &schema).unwrap();
            let t_scaled = scane_embed(&sm_scaled, &table, &schema).unwrap();
            for c in 0..2 {
                assert_eq!(
                    t_scaled.tokens.at(0, c),
                    alpha * t_base.tokens.at(0, c),
                    "alpha {alpha} col {c}"
                );
            }
        }
    }

    #[test]
    fn direction_is_fixed_by_the_feature_row() {
        let schema = schema_mixed();
        let table = EmbeddingTable::<f64>::init(&schema, 8, 3);
        let u: Vec<f64> = table.table.row_slice(0).to_vec();
        let norm_u: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        for x in [2.5f64, -0.75, 1e-3] {
            let mut sm = SummaryMatrix::all_missing(1, 3);
            sm.set(0, 0, x, true);
            let seq = scane_embed(&sm, &table, &schema).unwrap();
            let tok = seq.tokens.row_slice(0);
            let norm_t: f64 = tok.iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..8 {
                let lhs = tok[c] / norm_t;
                let rhs = x.signum() * u[c] / norm_u;
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flat_index_roundtrip() {
        let (k, n_cols) = (5, 7);
        for w in 0..k {
            for c in 0..n_cols {
                let flat = TokenSequence::<f64>::flat_index(k, n_cols, w, c);
                assert_eq!(TokenSequence::<f64>::unflatten(n_cols, flat), (w, c));
            }
        }
    }

    #[test]
    fn variants_zero_exactly_the_masked_positions() {
        let schema = schema_mixed();
        let routes = RouteMap::new(&schema);
        let mut sm = SummaryMatrix::all_missing(2, 3);
        sm.set(0, 0, 1.5, true);
        sm.set(1, 1, 2.0, true);
        sm.set(0, 2, 1.0, true);
        sm.set(1, 2, 1.0, true);
        for variant in [
            EvatVariant::IndexConcat,
            EvatVariant::IndexFusion,
            EvatVariant::OnehotConcat,
            EvatVariant::OnehotFusion,
        ] {
            let params = EvatParams::<f64>::init(variant, &routes, 6, 11).unwrap();
            let seq = evat_embed(&sm, &params, &routes, &schema).unwrap();
            assert_eq!(seq.tokens.shape(), &[6, 6]);
            for pos in 0..seq.len() {
                let zero = seq.tokens.row_slice(pos).iter().all(|&v| v == 0.0);
                assert_eq!(zero, seq.mask[pos] == 0, "{variant:?} pos {pos}");
            }
        }
    }

    #[test]
    fn onehot_encoding_lights_indicator_and_value_slots() {
        let schema = schema_mixed();
        let routes = RouteMap::new(&schema);
        let mut sm = SummaryMatrix::all_missing(1, 3);
        sm.set(0, 1, 2.0, true); // category g of column 1
        sm.set(0, 0, -3.5, true);
        let z = variant_inputs::<f64>(&sm, EvatVariant::OnehotConcat, &routes, &schema).unwrap();
        // Column 0 (numerical): indicator bit 0, value slot n_cols.
        assert_eq!(z.at(0, 0), 1.0);
        assert_eq!(z.at(0, routes.n_cols()), -3.5);
        // Column 1 (categorical): indicator bit 1 plus the category bit.
        assert_eq!(z.at(1, 1), 1.0);
        assert_eq!(z.at(1, routes.n_cols() + 1 + 2), 1.0);
        assert_eq!(z.at(1, routes.n_cols()), 0.0);
    }

    #[test]
    fn export_is_deterministic_and_parses_back() {
        let schema = schema_mixed();
        let table = EmbeddingTable::<f32>::init(&schema, 2, 42);
        let mut a = Vec::new();
        write_embeddings_csv(&table, &mut a).unwrap();
        let mut b = Vec::new();
        write_embeddings_csv(&table, &mut b).unwrap();
        assert_eq!(a, b);

        let mut rdr = csv::Reader::from_reader(a.as_slice());
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), table.routes.total_rows());
        assert_eq!(rows[0].len(), 3);
        for (row, rec) in rows.iter().enumerate() {
            assert_eq!(&rec[0], table.routes.labels()[row].as_str());
            for c in 0..2 {
                let parsed: f64 = rec[c + 1].parse().unwrap();
                assert!((parsed - table.table.at(row, c).to_f64()).abs() < 1e-7);
            }
        }
    }
}
