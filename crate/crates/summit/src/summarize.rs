//! Fixed-length window summarization of raw event streams.
//!
//! A series observed over a window of length T is aggregated into
//! k = ⌊T/p⌋ intervals anchored at the sample's first timestamp:
//! [t₁, t₁+p), …, [t₁+(k−1)p, t₁+T). Numerical features take the mean of
//! observed values, categorical features the mode or the last observed
//! value, and an appended column counts the raw rows per interval. A 0/1
//! mask marks which cells were observed at all.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Cell, Dataset, FeatureKind, FeatureSchema, RawSeries};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoricalAggregator {
    /// Most frequently observed value; ties break toward the value
    /// observed earliest in the window.
    Mode,
    /// Last observed value in the window.
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarizationConfig {
    /// Window length p, in the dataset's time units.
    pub window_len: f64,
    pub categorical: CategoricalAggregator,
}

impl Default for SummarizationConfig {
    fn default() -> Self {
        Self {
            window_len: 2.0,
            categorical: CategoricalAggregator::Mode,
        }
    }
}

/// Summarized k×(n+1) value matrix plus its missing mask. Column order is
/// schema order followed by the entry-count column. Values at masked cells
/// are fillers and must never influence downstream computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryMatrix {
    k: usize,
    n_cols: usize,
    values: Vec<f64>,
    mask: Vec<u8>,
}

impl SummaryMatrix {
    pub fn all_missing(k: usize, n_cols: usize) -> Self {
        Self {
            k,
            n_cols,
            values: vec![0.0; k * n_cols],
            mask: vec![0; k * n_cols],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Total column count n+1 (features plus entry count).
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn entry_count_col(&self) -> usize {
        self.n_cols - 1
    }

    pub fn value(&self, window: usize, col: usize) -> f64 {
        self.values[window * self.n_cols + col]
    }

    pub fn mask(&self, window: usize, col: usize) -> u8 {
        self.mask[window * self.n_cols + col]
    }

    pub fn is_observed(&self, window: usize, col: usize) -> bool {
        self.mask(window, col) == 1
    }

    pub fn set(&mut self, window: usize, col: usize, value: f64, observed: bool) {
        let i = window * self.n_cols + col;
        self.values[i] = value;
        self.mask[i] = u8::from(observed);
    }

    /// Overwrite the filler stored behind a masked cell without touching
    /// the mask. Downstream output must be invariant to this.
    pub fn set_masked_filler(&mut self, window: usize, col: usize, value: f64) {
        let i = window * self.n_cols + col;
        debug_assert_eq!(self.mask[i], 0);
        self.values[i] = value;
    }

    /// Row-major flattened mask (the token-sequence mask M̄).
    pub fn flat_mask(&self) -> &[u8] {
        &self.mask
    }
}

pub fn summarize(
    raw: &RawSeries,
    cfg: &SummarizationConfig,
    schema: &FeatureSchema,
    observation_window: f64,
) -> Result<SummaryMatrix> {
    let p = cfg.window_len;
    if !(p > 0.0) {
        return Err(Error::Config("window length must be positive".into()));
    }
    if p > observation_window {
        return Err(Error::Config(format!(
            "window length {p} exceeds observation window {observation_window}"
        )));
    }
    let k = (observation_window / p).floor() as usize;
    let n = schema.len();
    let mut out = SummaryMatrix::all_missing(k, n + 1);

    // Entry count is defined (zero) even for an empty series.
    for w in 0..k {
        out.set(w, n, 0.0, true);
    }
    if raw.rows() == 0 {
        return Ok(out);
    }

    let t1 = raw.timestamps[0];
    // The final interval is [t₁+(k−1)p, t₁+T) and absorbs the remainder
    // when T is not a multiple of p; a row at exactly t₁+T is folded into
    // it as well.
    let window_of = |t: f64| -> usize { (((t - t1) / p).floor() as usize).min(k - 1) };

    let mut row_count = vec![0usize; k];
    for &t in &raw.timestamps {
        row_count[window_of(t)] += 1;
    }
    for w in 0..k {
        out.set(w, n, row_count[w] as f64, true);
    }

    for (j, desc) in schema.features().iter().enumerate() {
        match desc.kind {
            FeatureKind::Numerical => {
                let mut sum = vec![0.0f64; k];
                let mut cnt = vec![0usize; k];
                for row in 0..raw.rows() {
                    if let Cell::Number(v) = raw.cell(row, j) {
                        let w = window_of(raw.timestamps[row]);
                        sum[w] += v;
                        cnt[w] += 1;
                    }
                }
                for w in 0..k {
                    if cnt[w] > 0 {
                        out.set(w, j, sum[w] / cnt[w] as f64, true);
                    }
                }
            }
            FeatureKind::Categorical => {
                let vocab = schema.vocab_len(j);
                // counts[w][c], first_seen[w][c] = earliest row observing c.
                let mut counts = vec![vec![0usize; vocab]; k];
                let mut first_seen = vec![vec![usize::MAX; vocab]; k];
                let mut last = vec![None::<usize>; k];
                for row in 0..raw.rows() {
                    if let Cell::Category(c) = raw.cell(row, j) {
                        let w = window_of(raw.timestamps[row]);
                        counts[w][c] += 1;
                        first_seen[w][c] = first_seen[w][c].min(row);
                        last[w] = Some(c);
                    }
                }
                for w in 0..k {
                    let agg = match cfg.categorical {
                        CategoricalAggregator::Last => last[w],
                        CategoricalAggregator::Mode => {
                            let best = (0..vocab)
                                .filter(|&c| counts[w][c] > 0)
                                .min_by_key(|&c| {
                                    (std::cmp::Reverse(counts[w][c]), first_seen[w][c])
                                });
                            best
                        }
                    };
                    if let Some(c) = agg {
                        out.set(w, j, c as f64, true);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn summarize_dataset(
    ds: &Dataset,
    cfg: &SummarizationConfig,
) -> Result<Vec<SummaryMatrix>> {
    ds.samples
        .iter()
        .map(|s| summarize(s, cfg, &ds.schema, ds.observation_window))
        .collect()
}

/// Per-column statistics fitted on training summaries only. Numerical
/// columns (including entry count) carry mean/std over observed cells;
/// categorical columns carry the global mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub modes: Vec<usize>,
    pub n_cols: usize,
}

impl Normalizer {
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }
}

const STD_FLOOR: f64 = 1e-12;

pub fn fit_normalizer(
    train: &[SummaryMatrix],
    schema: &FeatureSchema,
) -> Result<Normalizer> {
    let n_cols = schema.len() + 1;
    if let Some(bad) = train.iter().find(|m| m.n_cols() != n_cols) {
        return Err(Error::Shape(format!(
            "summary has {} columns, schema implies {n_cols}",
            bad.n_cols()
        )));
    }
    let mut means = vec![0.0; n_cols];
    let mut stds = vec![1.0; n_cols];
    let mut modes = vec![0usize; n_cols];

    for col in 0..n_cols {
        let categorical = col < schema.len()
            && schema.features()[col].kind == FeatureKind::Categorical;
        if categorical {
            let vocab = schema.vocab_len(col);
            let mut counts = vec![0usize; vocab];
            for m in train {
                for w in 0..m.k() {
                    if m.is_observed(w, col) {
                        counts[m.value(w, col) as usize] += 1;
                    }
                }
            }
            // Most frequent category; ties toward the smaller index.
            modes[col] = (0..vocab)
                .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
                .unwrap_or(0);
        } else {
            let mut sum = 0.0;
            let mut count = 0usize;
            for m in train {
                for w in 0..m.k() {
                    if m.is_observed(w, col) {
                        sum += m.value(w, col);
                        count += 1;
                    }
                }
            }
            if count == 0 {
                // Declared fallback: mean 0, std 1.
                continue;
            }
            let mean = sum / count as f64;
            let mut var = 0.0;
            for m in train {
                for w in 0..m.k() {
                    if m.is_observed(w, col) {
                        let d = m.value(w, col) - mean;
                        var += d * d;
                    }
                }
            }
            let std = (var / count as f64).sqrt();
            means[col] = mean;
            stds[col] = if std < STD_FLOOR { 1.0 } else { std };
        }
    }
    Ok(Normalizer {
        means,
        stds,
        modes,
        n_cols,
    })
}

/// Z-score observed numerical cells. With `impute` set, additionally fill
/// missing numerical cells with 0 (the normalized global mean), missing
/// categorical cells with the global mode, and force the mask to all-ones
/// so downstream masking is disabled.
pub fn apply_normalizer(
    sm: &SummaryMatrix,
    norm: &Normalizer,
    schema: &FeatureSchema,
    impute: bool,
) -> Result<SummaryMatrix> {
    if sm.n_cols() != norm.n_cols() {
        return Err(Error::Shape(format!(
            "summary has {} columns, normalizer has {}",
            sm.n_cols(),
            norm.n_cols()
        )));
    }
    let mut out = sm.clone();
    for col in 0..sm.n_cols() {
        let categorical =
            col < schema.len() && schema.features()[col].kind == FeatureKind::Categorical;
        for w in 0..sm.k() {
            if sm.is_observed(w, col) {
                if !categorical {
                    let z = (sm.value(w, col) - norm.means[col]) / norm.stds[col];
                    out.set(w, col, z, true);
                }
            } else if impute {
                if categorical {
                    out.set(w, col, norm.modes[col] as f64, true);
                } else {
                    out.set(w, col, 0.0, true);
                }
            }
        }
    }
    Ok(out)
}

/// Fraction of masked-out cells over the n feature columns (the appended
/// entry-count column is excluded).
pub fn missing_rate(matrices: &[SummaryMatrix]) -> Result<f64> {
    if matrices.is_empty() {
        return Err(Error::Data("missing rate of an empty list".into()));
    }
    let mut missing = 0usize;
    let mut total = 0usize;
    for m in matrices {
        let n = m.n_cols() - 1;
        for w in 0..m.k() {
            for col in 0..n {
                total += 1;
                missing += usize::from(!m.is_observed(w, col));
            }
        }
    }
    Ok(missing as f64 / total as f64)
}

/// CSV export: one row per (sample, window), each feature column paired
/// with a ".mask" column. Missing cells serialize as empty fields.
pub fn write_summaries_csv(
    entries: &[(String, SummaryMatrix)],
    schema: &FeatureSchema,
    w: impl Write,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["sample_id".to_string(), "window".to_string()];
    let mut names: Vec<String> = schema.features().iter().map(|f| f.name.clone()).collect();
    names.push("__entry_count".into());
    for name in &names {
        header.push(name.clone());
        header.push(format!("{name}.mask"));
    }
    wtr.write_record(&header)
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    for (id, sm) in entries {
        for win in 0..sm.k() {
            let mut rec = vec![id.clone(), win.to_string()];
            for col in 0..sm.n_cols() {
                if sm.is_observed(win, col) {
                    rec.push(format!("{}", sm.value(win, col)));
                    rec.push("1".into());
                } else {
                    rec.push(String::new());
                    rec.push("0".into());
                }
            }
            wtr.write_record(&rec)
                .map_err(|e| Error::Data(format!("csv: {e}")))?;
        }
    }
    wtr.flush()?;
    Ok(())
}
