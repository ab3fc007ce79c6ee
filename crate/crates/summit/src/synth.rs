//! Synthetic irregular multivariate time series with a known label rule.
//!
//! Event times follow a homogeneous Poisson process over the observation
//! window; cells are dropped independently per feature to hit the
//! missing-rate target. Labels follow a two-feature threshold rule over
//! whole-window means of the first two numerical features, calibrated by
//! empirical quantiles so the realized prevalence is exact, then corrupted
//! by count-preserving label noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Cell, Dataset, FeatureDesc, FeatureKind, FeatureSchema, RawSeries};
use crate::seed::{derive_seed, derive_seed_indexed};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_numerical: usize,
    pub n_categorical: usize,
    /// Target fraction of missing cells in the raw grids, in [0, 1).
    pub missing_rate: f64,
    pub observation_window: f64,
    pub mean_events_per_sample: f64,
    /// Positive-class prevalence in (0, 1).
    pub prevalence: f64,
    /// Fraction of labels corrupted by count-preserving flips.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            n_numerical: 6,
            n_categorical: 2,
            missing_rate: 0.75,
            observation_window: 48.0,
            mean_events_per_sample: 10.0,
            prevalence: 0.1,
            label_noise: 0.05,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_numerical + self.n_categorical;
        if n == 0 {
            return Err(Error::Config("zero features".into()));
        }
        if self.n_numerical < 2 {
            return Err(Error::Config(
                "the label rule needs at least two numerical features".into(),
            ));
        }
        if n == 1 && self.missing_rate > 0.0 {
            return Err(Error::Config(
                "a single feature cannot satisfy a positive missing-rate target".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config(format!(
                "missing_rate must be in [0,1), got {}",
                self.missing_rate
            )));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Config(format!(
                "prevalence must be in (0,1), got {}",
                self.prevalence
            )));
        }
        if self.prevalence * (self.n_samples as f64) < 1.0 {
            return Err(Error::Config(
                "prevalence × n_samples must be at least 1".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label_noise must be in [0,0.5), got {}",
                self.label_noise
            )));
        }
        if !(self.observation_window > 0.0) || !(self.mean_events_per_sample >= 0.0) {
            return Err(Error::Config(
                "observation window and event rate must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn schema(&self) -> FeatureSchema {
        let mut features = Vec::new();
        for j in 0..self.n_numerical {
            features.push(FeatureDesc {
                name: format!("num_{j}"),
                kind: FeatureKind::Numerical,
                categories: None,
            });
        }
        for j in 0..self.n_categorical {
            let vocab = 2 + j % 3;
            features.push(FeatureDesc {
                name: format!("cat_{j}"),
                kind: FeatureKind::Categorical,
                categories: Some((0..vocab).map(|c| format!("c{c}")).collect()),
            });
        }
        FeatureSchema::new(features).expect("generated schema is valid")
    }
}

/// Rows that lose every cell are dropped (they are unrepresentable in the
/// event format), which lowers the realized missing rate below the per-cell
/// drop probability. Solve (q − qⁿ)/(1 − qⁿ) = target for the drop
/// probability q that lands the realized rate on target.
fn conditional_drop_rate(target: f64, n_features: usize) -> f64 {
    if target == 0.0 {
        return 0.0;
    }
    let n = n_features as i32;
    let realized = |q: f64| (q - q.powi(n)) / (1.0 - q.powi(n));
    let (mut lo, mut hi) = (target, 1.0 - 1e-12);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if realized(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Whole-window mean of a feature's observed values, `None` when the
/// feature was never observed.
pub fn window_mean(s: &RawSeries, feature: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for row in 0..s.rows() {
        if let Cell::Number(v) = s.cell(row, feature) {
            sum += v;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Fraction of missing cells over all raw grid cells.
pub fn raw_missing_rate(ds: &Dataset) -> f64 {
    let mut missing = 0usize;
    let mut total = 0usize;
    for s in &ds.samples {
        for row in 0..s.rows() {
            for j in 0..s.n_features() {
                total += 1;
                missing += usize::from(s.cell(row, j).is_missing());
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        missing as f64 / total as f64
    }
}

/// Threshold so that exactly `count` of the given values exceed it.
/// Values absent (`None`) never exceed any threshold.
fn threshold_for_count(values: &[Option<f64>], count: usize) -> f64 {
    let mut present: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    present.sort_by(|a, b| b.total_cmp(a));
    if count == 0 || present.is_empty() {
        return f64::INFINITY;
    }
    let count = count.min(present.len());
    if count == present.len() {
        present[count - 1] - 1.0
    } else {
        0.5 * (present[count - 1] + present[count])
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let schema = cfg.schema();
    let n = schema.len();
    let drop_rate = conditional_drop_rate(cfg.missing_rate, n);
    let event_rate = cfg.mean_events_per_sample / cfg.observation_window;

    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let mut rng =
            ChaCha20Rng::seed_from_u64(derive_seed_indexed(cfg.seed, "synth-sample", i as u64));
        samples.push(generate_sample(cfg, &schema, i, drop_rate, event_rate, &mut rng)?);
    }

    assign_labels(cfg, &mut samples)?;

    Ok(Dataset {
        schema,
        observation_window: cfg.observation_window,
        samples,
        provenance: format!(
            "synthetic: seed={} n={} missing={} prevalence={}",
            cfg.seed, cfg.n_samples, cfg.missing_rate, cfg.prevalence
        ),
    })
}

fn generate_sample(
    cfg: &SynthConfig,
    schema: &FeatureSchema,
    index: usize,
    drop_rate: f64,
    event_rate: f64,
    rng: &mut ChaCha20Rng,
) -> Result<RawSeries> {
    let n = schema.len();

    // Homogeneous Poisson event times over [0, T).
    let mut times = Vec::new();
    if event_rate > 0.0 {
        let gap = Exp::new(event_rate)
            .map_err(|e| Error::Config(format!("bad event rate: {e}")))?;
        let mut t = gap.sample(rng);
        while t < cfg.observation_window {
            times.push(t);
            t += gap.sample(rng);
        }
    }

    // Per-sample latent level per numerical feature; observations scatter
    // around it. Categorical features have a per-sample dominant category.
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let jitter = Normal::new(0.0, 0.25).expect("valid normal");
    let latents: Vec<f64> = (0..cfg.n_numerical).map(|_| unit.sample(rng)).collect();
    let dominant: Vec<usize> = (0..cfg.n_categorical)
        .map(|j| rng.random_range(0..schema.vocab_len(cfg.n_numerical + j)))
        .collect();

    let mut timestamps = Vec::new();
    let mut cells = Vec::new();
    for &t in &times {
        let mut row = vec![Cell::Missing; n];
        let mut any = false;
        for (j, cell) in row.iter_mut().enumerate() {
            if rng.random_range(0.0..1.0) < drop_rate {
                continue;
            }
            any = true;
            *cell = if j < cfg.n_numerical {
                Cell::Number(latents[j] + jitter.sample(rng))
            } else {
                let cat_j = j - cfg.n_numerical;
                let vocab = schema.vocab_len(j);
                let c = if rng.random_range(0.0..1.0) < 0.8 {
                    dominant[cat_j]
                } else {
                    rng.random_range(0..vocab)
                };
                Cell::Category(c)
            };
        }
        // A row with no surviving cell has no event representation; skip it.
        if any {
            timestamps.push(t);
            cells.extend(row);
        }
    }

    RawSeries::new(format!("synth_{index}"), timestamps, cells, n, 0, None)
}

/// Label rule: positive iff mean(num_0) > θ₀ or mean(num_1) > θ₁, with
/// thresholds picked from empirical quantiles so the pre-noise positive
/// count is exactly round(prevalence·n). Noise then flips equally many
/// positives and negatives, preserving the count.
fn assign_labels(cfg: &SynthConfig, samples: &mut [RawSeries]) -> Result<()> {
    let n = samples.len();
    let target_pos = (cfg.prevalence * n as f64).round() as usize;
    let s0: Vec<Option<f64>> = samples.iter().map(|s| window_mean(s, 0)).collect();
    let s1: Vec<Option<f64>> = samples.iter().map(|s| window_mean(s, 1)).collect();

    // Split the positive mass evenly between the two rule branches:
    // P(A ∪ B) = prevalence with P(A) = 1 − √(1 − prevalence).
    let a_count = (n as f64 * (1.0 - (1.0 - cfg.prevalence).sqrt())).round() as usize;
    let a_count = a_count.min(target_pos);
    let theta0 = threshold_for_count(&s0, a_count);
    let in_a: Vec<bool> = s0.iter().map(|v| v.is_some_and(|x| x > theta0)).collect();
    let n_a = in_a.iter().filter(|&&b| b).count();

    let rest: Vec<Option<f64>> = s1
        .iter()
        .zip(&in_a)
        .map(|(v, &a)| if a { None } else { *v })
        .collect();
    let b_count = target_pos.saturating_sub(n_a);
    let theta1 = threshold_for_count(&rest, b_count);

    for ((sample, &a), r) in samples.iter_mut().zip(&in_a).zip(&rest) {
        sample.label = u8::from(a || r.is_some_and(|x| x > theta1));
    }

    let n_pos = samples.iter().filter(|s| s.label == 1).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::Config(
            "degenerate label assignment; increase n_samples".into(),
        ));
    }

    // Count-preserving noise: flip k positives down and k negatives up.
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, "label-noise"));
    let k = ((cfg.label_noise * n as f64) / 2.0).round() as usize;
    let k = k.min(n_pos - 1).min(n - n_pos - 1);
    let mut pos_idx: Vec<usize> = (0..n).filter(|&i| samples[i].label == 1).collect();
    let mut neg_idx: Vec<usize> = (0..n).filter(|&i| samples[i].label == 0).collect();
    pos_idx.shuffle(&mut rng);
    neg_idx.shuffle(&mut rng);
    for &i in pos_idx.iter().take(k) {
        samples[i].label = 0;
    }
    for &i in neg_idx.iter().take(k) {
        samples[i].label = 1;
    }

    // Event times for the c-index: positives get an event uniformly inside
    // the horizon, negatives are censored at the horizon.
    let mut time_rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, "event-times"));
    let horizon = cfg.observation_window;
    for sample in samples.iter_mut() {
        sample.event_time = Some(if sample.label == 1 {
            // random_range never yields 1.0, so this lands in (0, horizon].
            horizon * (1.0 - time_rng.random_range(0.0..1.0))
        } else {
            horizon
        });
    }
    Ok(())
}
