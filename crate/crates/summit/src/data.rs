//! Dataset schema, the JSON-lines on-disk format, and stratified splitting.
//!
//! File layout: line 1 is a header object
//! `{"schema":[{"name","kind","categories"?}...],"observation_window":T}`;
//! every following line is one sample
//! `{"id","label","event_time"?,"events":[{"t","feature","value"},...]}`.
//! Missing cells are simply unlisted — never encoded as a sentinel number.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::seed::derive_seed;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numerical,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDesc {
    pub name: String,
    pub kind: FeatureKind,
    /// Ordered category vocabulary; present iff the feature is categorical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

/// Ordered feature descriptors. Feature order is fixed for a dataset's
/// lifetime; it determines column order everywhere downstream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureSchema {
    features: Vec<FeatureDesc>,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureDesc>) -> Result<Self> {
        let schema = Self { features };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Data(format!("duplicate feature name '{}'", f.name)));
            }
            match (f.kind, &f.categories) {
                (FeatureKind::Categorical, Some(v)) if v.is_empty() => {
                    return Err(Error::Data(format!(
                        "categorical feature '{}' has an empty vocabulary",
                        f.name
                    )))
                }
                (FeatureKind::Categorical, None) => {
                    return Err(Error::Data(format!(
                        "categorical feature '{}' lacks a vocabulary",
                        f.name
                    )))
                }
                (FeatureKind::Numerical, Some(_)) => {
                    return Err(Error::Data(format!(
                        "numerical feature '{}' must not declare categories",
                        f.name
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn features(&self) -> &[FeatureDesc] {
        &self.features
    }

    /// Number of features n (excluding the appended entry-count column).
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn vocab_len(&self, feature: usize) -> usize {
        self.features[feature]
            .categories
            .as_ref()
            .map_or(0, |v| v.len())
    }
}

/// One observed-or-missing grid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cell {
    Missing,
    Number(f64),
    Category(usize),
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }
}

/// One sample: timestamped, partially observed feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub id: String,
    /// Ascending timestamps, one per row.
    pub timestamps: Vec<f64>,
    /// Row-major m×n grid.
    cells: Vec<Cell>,
    n_features: usize,
    pub label: u8,
    pub event_time: Option<f64>,
}

impl RawSeries {
    pub fn new(
        id: impl Into<String>,
        timestamps: Vec<f64>,
        cells: Vec<Cell>,
        n_features: usize,
        label: u8,
        event_time: Option<f64>,
    ) -> Result<Self> {
        if timestamps.len() * n_features != cells.len() {
            return Err(Error::Data(format!(
                "grid size {} does not match {} rows × {} features",
                cells.len(),
                timestamps.len(),
                n_features
            )));
        }
        Ok(Self {
            id: id.into(),
            timestamps,
            cells,
            n_features,
            label,
            event_time,
        })
    }

    pub fn rows(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn cell(&self, row: usize, feature: usize) -> Cell {
        self.cells[row * self.n_features + feature]
    }

    pub fn cell_mut(&mut self, row: usize, feature: usize) -> &mut Cell {
        &mut self.cells[row * self.n_features + feature]
    }

    pub fn validate(&self, schema: &FeatureSchema, observation_window: f64) -> Result<()> {
        if self.n_features != schema.len() {
            return Err(Error::Data(format!(
                "sample '{}': {} features, schema has {}",
                self.id,
                self.n_features,
                schema.len()
            )));
        }
        if self.label > 1 {
            return Err(Error::Data(format!(
                "sample '{}': label must be 0 or 1",
                self.id
            )));
        }
        if let Some(t) = self.event_time {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::Data(format!(
                    "sample '{}': event_time must be a positive real",
                    self.id
                )));
            }
        }
        for w in self.timestamps.windows(2) {
            if w[1] < w[0] {
                return Err(Error::Data(format!(
                    "sample '{}': timestamps not monotone ({} after {})",
                    self.id, w[1], w[0]
                )));
            }
        }
        if let (Some(&first), Some(&last)) = (self.timestamps.first(), self.timestamps.last()) {
            if !first.is_finite() || !last.is_finite() {
                return Err(Error::Data(format!(
                    "sample '{}': non-finite timestamp",
                    self.id
                )));
            }
            if last - first > observation_window {
                return Err(Error::Data(format!(
                    "sample '{}': span {} exceeds observation window {}",
                    self.id,
                    last - first,
                    observation_window
                )));
            }
        }
        for row in 0..self.rows() {
            for (j, desc) in schema.features().iter().enumerate() {
                match (self.cell(row, j), desc.kind) {
                    (Cell::Missing, _) => {}
                    (Cell::Number(v), FeatureKind::Numerical) => {
                        if !v.is_finite() {
                            return Err(Error::Data(format!(
                                "sample '{}': non-finite value for '{}'",
                                self.id, desc.name
                            )));
                        }
                    }
                    (Cell::Category(c), FeatureKind::Categorical) => {
                        if c >= schema.vocab_len(j) {
                            return Err(Error::Data(format!(
                                "sample '{}': category {} out of vocabulary for '{}'",
                                self.id, c, desc.name
                            )));
                        }
                    }
                    (cell, kind) => {
                        return Err(Error::Data(format!(
                            "sample '{}': cell {cell:?} does not match {kind:?} feature '{}'",
                            self.id, desc.name
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub observation_window: f64,
    pub samples: Vec<RawSeries>,
    pub provenance: String,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if !(self.observation_window > 0.0) {
            return Err(Error::Data("observation window must be positive".into()));
        }
        for s in &self.samples {
            s.validate(&self.schema, self.observation_window)?;
        }
        Ok(())
    }

    pub fn prevalence(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.label == 1).count() as f64 / self.samples.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Wire structs for the JSON-lines format.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderWire {
    schema: Vec<FeatureDesc>,
    observation_window: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    provenance: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventWire {
    t: f64,
    feature: String,
    value: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleWire {
    id: String,
    label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    event_time: Option<f64>,
    events: Vec<EventWire>,
}

fn data_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("line {line}: {msg}"))
}

/// Parse a dataset from any reader in the JSON-lines format. Errors name
/// the offending line (1-based).
pub fn read_dataset(reader: impl BufRead) -> Result<Dataset> {
    let mut lines = reader.lines();
    let header_line = match lines.next() {
        Some(l) => l?,
        None => return Err(Error::Data("empty file: missing header line".into())),
    };
    let header: HeaderWire = serde_json::from_str(&header_line)
        .map_err(|e| data_err(1, format!("malformed header: {e}")))?;
    let schema = FeatureSchema::new(header.schema).map_err(|e| data_err(1, e))?;
    if !header.observation_window.is_finite() || header.observation_window <= 0.0 {
        return Err(data_err(1, "observation_window must be a positive real"));
    }

    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: SampleWire = serde_json::from_str(&line)
            .map_err(|e| data_err(line_no, format!("malformed sample: {e}")))?;
        let sample = sample_from_wire(wire, &schema).map_err(|e| data_err(line_no, e))?;
        sample
            .validate(&schema, header.observation_window)
            .map_err(|e| data_err(line_no, e))?;
        samples.push(sample);
    }
    Ok(Dataset {
        schema,
        observation_window: header.observation_window,
        samples,
        provenance: header.provenance,
    })
}

fn sample_from_wire(wire: SampleWire, schema: &FeatureSchema) -> Result<RawSeries> {
    let n = schema.len();
    let mut timestamps: Vec<f64> = Vec::new();
    let mut cells: Vec<Cell> = Vec::new();
    for ev in &wire.events {
        if !ev.t.is_finite() {
            return Err(Error::Data(format!(
                "sample '{}': non-finite timestamp",
                wire.id
            )));
        }
        let j = schema.index_of(&ev.feature).ok_or_else(|| {
            Error::Data(format!(
                "sample '{}': unknown feature name '{}'",
                wire.id, ev.feature
            ))
        })?;
        match timestamps.last() {
            Some(&last) if ev.t < last => {
                return Err(Error::Data(format!(
                    "sample '{}': timestamps not monotone ({} after {})",
                    wire.id, ev.t, last
                )))
            }
            // Events sharing a timestamp form one row; a repeated
            // (t, feature) pair keeps the last listed value.
            Some(&last) if ev.t == last => {}
            _ => {
                timestamps.push(ev.t);
                cells.extend(std::iter::repeat(Cell::Missing).take(n));
            }
        }
        let row = timestamps.len() - 1;
        let cell = match schema.features()[j].kind {
            FeatureKind::Numerical => Cell::Number(ev.value),
            FeatureKind::Categorical => {
                let vocab = schema.vocab_len(j);
                if ev.value.fract() != 0.0 || ev.value < 0.0 || ev.value >= vocab as f64 {
                    return Err(Error::Data(format!(
                        "sample '{}': category {} out of vocabulary for '{}' (size {vocab})",
                        wire.id, ev.value, ev.feature
                    )));
                }
                Cell::Category(ev.value as usize)
            }
        };
        cells[row * n + j] = cell;
    }
    RawSeries::new(
        wire.id,
        timestamps,
        cells,
        n,
        wire.label,
        wire.event_time,
    )
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(BufReader::new(file))
}

/// Serialize in the canonical format: header first, then one sample per
/// line with events ordered by (row, feature index). Byte output is a
/// deterministic function of the dataset.
pub fn write_dataset(ds: &Dataset, mut w: impl Write) -> Result<()> {
    let header = HeaderWire {
        schema: ds.schema.features().to_vec(),
        observation_window: ds.observation_window,
        provenance: ds.provenance.clone(),
    };
    let hline = serde_json::to_string(&header)
        .map_err(|e| Error::Data(format!("serialize header: {e}")))?;
    writeln!(w, "{hline}")?;
    for s in &ds.samples {
        let mut events = Vec::new();
        for row in 0..s.rows() {
            for (j, desc) in ds.schema.features().iter().enumerate() {
                let value = match s.cell(row, j) {
                    Cell::Missing => continue,
                    Cell::Number(v) => v,
                    Cell::Category(c) => c as f64,
                };
                events.push(EventWire {
                    t: s.timestamps[row],
                    feature: desc.name.clone(),
                    value,
                });
            }
        }
        let wire = SampleWire {
            id: s.id.clone(),
            label: s.label,
            event_time: s.event_time,
            events,
        };
        let line = serde_json::to_string(&wire)
            .map_err(|e| Error::Data(format!("serialize sample '{}': {e}", s.id)))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(ds, &mut buf)?;
    std::fs::write(path.as_ref(), buf)?;
    Ok(())
}

/// Per-class stratified split into (train, test). Per-class test counts
/// are `round(test_fraction · n_class)`; the partition is exhaustive,
/// disjoint, and deterministic per seed.
pub fn split_stratified(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0 < test_fraction && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must be in (0,1), got {test_fraction}"
        )));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, s) in ds.samples.iter().enumerate() {
        by_class[s.label as usize].push(i);
    }
    if by_class[0].is_empty() || by_class[1].is_empty() {
        return Err(Error::Data(
            "stratified split requires both classes present".into(),
        ));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "stratified-split"));
    let mut test_idx = Vec::new();
    let mut train_idx = Vec::new();
    for class in [0usize, 1] {
        let mut idx = by_class[class].clone();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        if n_test == 0 || n_test == idx.len() {
            return Err(Error::Data(format!(
                "class {class} has too few samples ({}) for a non-empty split at fraction {test_fraction}",
                idx.len()
            )));
        }
        test_idx.extend_from_slice(&idx[..n_test]);
        train_idx.extend_from_slice(&idx[n_test..]);
    }
    test_idx.sort_unstable();
    train_idx.sort_unstable();

    let subset = |indices: &[usize]| Dataset {
        schema: ds.schema.clone(),
        observation_window: ds.observation_window,
        samples: indices.iter().map(|&i| ds.samples[i].clone()).collect(),
        provenance: ds.provenance.clone(),
    };
    Ok((subset(&train_idx), subset(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_schema() -> FeatureSchema {
        FeatureSchema::new(vec![
            FeatureDesc {
                name: "hr".into(),
                kind: FeatureKind::Numerical,
                categories: None,
            },
            FeatureDesc {
                name: "sex".into(),
                kind: FeatureKind::Categorical,
                categories: Some(vec!["f".into(), "m".into()]),
            },
        ])
        .unwrap()
    }

    fn toy_dataset() -> Dataset {
        let schema = toy_schema();
        let s0 = RawSeries::new(
            "s0",
            vec![0.0, 1.5],
            vec![
                Cell::Number(70.0),
                Cell::Category(1),
                Cell::Number(72.5),
                Cell::Missing,
            ],
            2,
            0,
            None,
        )
        .unwrap();
        let s1 = RawSeries::new(
            "s1",
            vec![0.25],
            vec![Cell::Missing, Cell::Category(0)],
            2,
            1,
            Some(3.5),
        )
        .unwrap();
        Dataset {
            schema,
            observation_window: 4.0,
            samples: vec![s0, s1],
            provenance: "test".into(),
        }
    }

    #[test]
    fn well_formed_file_loads() {
        let ds = toy_dataset();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let loaded = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(loaded.samples.len(), 2);
        assert_eq!(loaded, ds);
    }

    #[test]
    fn non_monotone_timestamps_name_the_sample() {
        let text = concat!(
            r#"{"schema":[{"name":"hr","kind":"numerical"}],"observation_window":10.0}"#,
            "\n",
            r#"{"id":"bad1","label":0,"events":[{"t":3.0,"feature":"hr","value":1.0},{"t":1.0,"feature":"hr","value":2.0}]}"#,
            "\n"
        );
        let err = read_dataset(text.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad1") && msg.contains("monotone"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn unknown_feature_and_bad_category_are_rejected() {
        let header = r#"{"schema":[{"name":"sex","kind":"categorical","categories":["f","m"]}],"observation_window":10.0}"#;
        let unknown = format!(
            "{header}\n{}",
            r#"{"id":"x","label":0,"events":[{"t":0.0,"feature":"nope","value":1.0}]}"#
        );
        assert!(read_dataset(unknown.as_bytes())
            .unwrap_err()
            .to_string()
            .contains("unknown feature"));
        let bad_cat = format!(
            "{header}\n{}",
            r#"{"id":"x","label":0,"events":[{"t":0.0,"feature":"sex","value":2.0}]}"#
        );
        assert!(read_dataset(bad_cat.as_bytes())
            .unwrap_err()
            .to_string()
            .contains("out of vocabulary"));
    }

    #[test]
    fn save_is_deterministic_and_a_fixed_point() {
        let ds = toy_dataset();
        let mut a = Vec::new();
        write_dataset(&ds, &mut a).unwrap();
        let mut b = Vec::new();
        write_dataset(&ds, &mut b).unwrap();
        assert_eq!(a, b);

        let reloaded = read_dataset(a.as_slice()).unwrap();
        let mut c = Vec::new();
        write_dataset(&reloaded, &mut c).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn empty_sample_list_serializes_to_header_only() {
        let ds = Dataset {
            schema: toy_schema(),
            observation_window: 4.0,
            samples: vec![],
            provenance: String::new(),
        };
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn stratified_split_is_exact_and_deterministic() {
        let schema = FeatureSchema::new(vec![FeatureDesc {
            name: "v".into(),
            kind: FeatureKind::Numerical,
            categories: None,
        }])
        .unwrap();
        let mut samples = Vec::new();
        for i in 0..100 {
            let label = u8::from(i < 10);
            samples.push(
                RawSeries::new(
                    format!("s{i}"),
                    vec![0.0],
                    vec![Cell::Number(i as f64)],
                    1,
                    label,
                    None,
                )
                .unwrap(),
            );
        }
        let ds = Dataset {
            schema,
            observation_window: 1.0,
            samples,
            provenance: String::new(),
        };
        let (train, test) = split_stratified(&ds, 0.2, 7).unwrap();
        assert_eq!(test.samples.iter().filter(|s| s.label == 1).count(), 2);
        assert_eq!(test.samples.iter().filter(|s| s.label == 0).count(), 18);
        assert_eq!(train.samples.len(), 80);

        // Disjoint and exhaustive.
        let mut ids: Vec<&str> = train
            .samples
            .iter()
            .chain(test.samples.iter())
            .map(|s| s.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 100);

        let (train2, test2) = split_stratified(&ds, 0.2, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }
}
