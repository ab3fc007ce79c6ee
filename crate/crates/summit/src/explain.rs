//! Rollout attention over recorded stacks, with a revision for masked
//! inputs, and the per-(window, feature) importance map it induces.
//!
//! Plain rollout folds residual connections in as Aᵢ = 0.5Wᵢ + 0.5I and
//! multiplies Ã = A_N···A₁. For inputs with missing tokens the first
//! stack's factor is replaced by A₁′ = rownorm(W₁ + diag(M̄)): masked
//! tokens get no residual self-loop, so their columns stay exactly zero
//! through the whole product. Later stacks are left untouched, matching
//! the fact that masking is applied only in the first attention stack.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::data::FeatureSchema;
use crate::model::AttentionTrace;
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutVariant {
    Original,
    Revised,
}

impl std::str::FromStr for RolloutVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Self::Original),
            "revised" => Ok(Self::Revised),
            other => Err(Error::Config(format!("unknown rollout variant '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub matrix: Tensor<f64>,
    pub variant: RolloutVariant,
    /// Rows of A₁′ that were all-zero with a zero diagonal (guarded
    /// all-masked queries), zeroed rather than normalized.
    pub guarded_rows: usize,
}

fn residual_mix(w: &Tensor<f64>) -> Tensor<f64> {
    let l = w.rows();
    let mut a = tensor::scale(w, 0.5);
    for i in 0..l {
        let v = a.at(i, i) + 0.5;
        a.set(i, i, v);
    }
    a
}

/// Divide each row by its sum; all-zero rows stay zero and are counted.
fn rownorm(m: &Tensor<f64>) -> (Tensor<f64>, usize) {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = m.clone();
    let mut guarded = 0usize;
    for r in 0..rows {
        let sum: f64 = m.row_slice(r).iter().sum();
        if sum == 0.0 {
            guarded += 1;
            continue;
        }
        for c in 0..cols {
            out.set(r, c, m.at(r, c) / sum);
        }
    }
    (out, guarded)
}

fn fold_product(factors_first_to_last: Vec<Tensor<f64>>) -> Result<Tensor<f64>> {
    let mut iter = factors_first_to_last.into_iter();
    let mut acc = iter
        .next()
        .ok_or_else(|| Error::Shape("rollout of an empty trace".into()))?;
    for a in iter {
        // Later stacks multiply from the left.
        acc = tensor::matmul(&a, &acc)?;
    }
    Ok(acc)
}

/// Ã = A_N···A₁ with Aᵢ = 0.5Wᵢ + 0.5I.
pub fn rollout(trace: &AttentionTrace) -> Result<RolloutResult> {
    if trace.stacks.is_empty() {
        return Err(Error::Shape("rollout of an empty trace".into()));
    }
    let factors = trace.stacks.iter().map(residual_mix).collect();
    Ok(RolloutResult {
        matrix: fold_product(factors)?,
        variant: RolloutVariant::Original,
        guarded_rows: 0,
    })
}

/// Ã′ = A_N···A₂·A₁′ with A₁′ = rownorm(W₁ + diag(M̄)).
pub fn revised_rollout(trace: &AttentionTrace, mask: &[u8]) -> Result<RolloutResult> {
    if trace.stacks.is_empty() {
        return Err(Error::Shape("rollout of an empty trace".into()));
    }
    let w1 = &trace.stacks[0];
    if w1.rows() != mask.len() {
        return Err(Error::Shape(format!(
            "mask length {} does not match trace width {}",
            mask.len(),
            w1.rows()
        )));
    }
    let mut first = w1.clone();
    for (i, &m) in mask.iter().enumerate() {
        if m == 1 {
            let v = first.at(i, i) + 1.0;
            first.set(i, i, v);
        }
    }
    let (a1, guarded) = rownorm(&first);
    let mut factors = vec![a1];
    factors.extend(trace.stacks[1..].iter().map(residual_mix));
    Ok(RolloutResult {
        matrix: fold_product(factors)?,
        variant: RolloutVariant::Revised,
        guarded_rows: guarded,
    })
}

/// Column means of a rollout reshaped to windows × columns, with total
/// ranks (1 = highest importance, ties broken by flat index).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub k: usize,
    pub n_cols: usize,
    /// Row-major k×(n+1) column-mean attention.
    pub importance: Vec<f64>,
    /// Row-major k×(n+1) ranks, a permutation of 1..=k(n+1).
    pub ranks: Vec<usize>,
}

pub fn importance_map(r: &RolloutResult, k: usize, n_cols: usize) -> Result<ImportanceMap> {
    let l = r.matrix.rows();
    if l != k * n_cols || r.matrix.cols() != l {
        return Err(Error::Shape(format!(
            "rollout is {:?}, expected {l}×{l} with k·(n+1) = {}",
            r.matrix.shape(),
            k * n_cols
        )));
    }
    let mut importance = vec![0.0f64; l];
    for c in 0..l {
        let mut s = 0.0;
        for row in 0..l {
            s += r.matrix.at(row, c);
        }
        importance[c] = s / l as f64;
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let mut ranks = vec![0usize; l];
    for (rank0, &flat) in order.iter().enumerate() {
        ranks[flat] = rank0 + 1;
    }
    Ok(ImportanceMap {
        k,
        n_cols,
        importance,
        ranks,
    })
}

impl ImportanceMap {
    pub fn importance_at(&self, window: usize, col: usize) -> f64 {
        self.importance[window * self.n_cols + col]
    }

    pub fn rank_at(&self, window: usize, col: usize) -> usize {
        self.ranks[window * self.n_cols + col]
    }

    /// Mean rank per column, the Fig-style column ordering key.
    pub fn mean_rank_per_column(&self) -> Vec<f64> {
        (0..self.n_cols)
            .map(|c| {
                (0..self.k).map(|w| self.rank_at(w, c) as f64).sum::<f64>() / self.k as f64
            })
            .collect()
    }
}

fn column_names(schema: &FeatureSchema, n_cols: usize) -> Result<Vec<String>> {
    if schema.len() + 1 != n_cols {
        return Err(Error::Shape(format!(
            "schema has {} features, map has {} columns",
            schema.len(),
            n_cols
        )));
    }
    let mut names: Vec<String> = schema.features().iter().map(|f| f.name.clone()).collect();
    names.push("__entry_count".into());
    Ok(names)
}

/// CSV rows: window, feature, importance, rank.
pub fn write_importance_csv(
    map: &ImportanceMap,
    schema: &FeatureSchema,
    w: impl Write,
) -> Result<()> {
    let names = column_names(schema, map.n_cols)?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["window", "feature", "importance", "rank"])
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    for win in 0..map.k {
        for (col, name) in names.iter().enumerate() {
            wtr.write_record(&[
                win.to_string(),
                name.clone(),
                format!("{}", map.importance_at(win, col)),
                map.rank_at(win, col).to_string(),
            ])
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Standalone SVG heat map with per-cell rank labels. Columns are ordered
/// by ascending mean rank (most important first).
pub fn write_importance_svg(
    map: &ImportanceMap,
    schema: &FeatureSchema,
    mut w: impl Write,
) -> Result<()> {
    let names = column_names(schema, map.n_cols)?;
    let mean_ranks = map.mean_rank_per_column();
    let mut col_order: Vec<usize> = (0..map.n_cols).collect();
    col_order.sort_by(|&a, &b| mean_ranks[a].total_cmp(&mean_ranks[b]).then(a.cmp(&b)));

    let cell = 44usize;
    let label_h = 90usize;
    let label_w = 60usize;
    let width = label_w + map.n_cols * cell;
    let height = label_h + map.k * cell;
    let max_imp = map
        .importance
        .iter()
        .copied()
        .fold(f64::MIN_POSITIVE, f64::max);

    writeln!(w, r#"<?xml version="1.0" encoding="UTF-8"?>"#)?;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )?;
    writeln!(
        w,
        r#"<style>text{{font-family:monospace;font-size:11px}}</style>"#
    )?;
    for (x_slot, &col) in col_order.iter().enumerate() {
        let x = label_w + x_slot * cell + cell / 2;
        writeln!(
            w,
            r#"<text x="{x}" y="{y}" transform="rotate(-60 {x} {y})" text-anchor="start">{name}</text>"#,
            y = label_h - 8,
            name = xml_escape(&names[col])
        )?;
    }
    for win in 0..map.k {
        let y = label_h + win * cell;
        writeln!(
            w,
            r#"<text x="4" y="{ty}">w{win}</text>"#,
            ty = y + cell / 2 + 4
        )?;
        for (x_slot, &col) in col_order.iter().enumerate() {
            let x = label_w + x_slot * cell;
            let imp = map.importance_at(win, col);
            // Light for low attention, dark for high.
            let shade = (255.0 * (1.0 - (imp / max_imp).clamp(0.0, 1.0))) as u8;
            writeln!(
                w,
                r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="black"/>"#
            )?;
            let text_fill = if shade < 96 { "white" } else { "black" };
            writeln!(
                w,
                r#"<text x="{tx}" y="{ty}" text-anchor="middle" fill="{text_fill}">{rank}</text>"#,
                tx = x + cell / 2,
                ty = y + cell / 2 + 4,
                rank = map.rank_at(win, col)
            )?;
        }
    }
    writeln!(w, "</svg>")?;
    Ok(())
}

/// Persist a trace in the binary tensor container (kind "trace").
pub fn trace_to_container(trace: &AttentionTrace) -> Container {
    let mut tensors: Vec<(String, Tensor<f32>)> = trace
        .stacks
        .iter()
        .enumerate()
        .map(|(i, w)| (format!("stack.{i:04}"), w.cast()))
        .collect();
    let mask: Vec<f32> = trace.mask.iter().map(|&m| m as f32).collect();
    tensors.push((
        "mask".into(),
        Tensor::matrix(1, mask.len(), mask).expect("sized"),
    ));
    Container {
        kind: "trace".into(),
        meta: serde_json::json!({
            "n_stacks": trace.stacks.len(),
            "guarded_rows": trace.guarded_rows,
        }),
        tensors,
    }
}

pub fn trace_from_container(c: &Container) -> Result<AttentionTrace> {
    if c.kind != "trace" {
        return Err(Error::Data(format!(
            "expected a trace container, found kind '{}'",
            c.kind
        )));
    }
    let n_stacks = c.meta["n_stacks"]
        .as_u64()
        .ok_or_else(|| Error::Data("trace meta lacks n_stacks".into()))? as usize;
    let guarded_rows = c.meta["guarded_rows"].as_u64().unwrap_or(0) as usize;
    let mask_t = c.tensor("mask")?;
    let mask: Vec<u8> = mask_t.data().iter().map(|&v| (v != 0.0) as u8).collect();
    let mut stacks = Vec::with_capacity(n_stacks);
    for i in 0..n_stacks {
        stacks.push(c.tensor(&format!("stack.{i:04}"))?.cast());
    }
    Ok(AttentionTrace {
        stacks,
        mask,
        guarded_rows,
    })
}
