//! Canned end-to-end scenarios: seeded synthetic runs whose verdicts gate
//! releases. Exact invariants (masking, determinism) are hard gates;
//! paired quality comparisons are directional claims evaluated on medians
//! over seeds, with per-seed outcomes reported alongside.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{split_stratified, Dataset};
use crate::embed::EvatVariant;
use crate::explain::{importance_map, revised_rollout, rollout};
use crate::model::{LossConfig, ModelConfig};
use crate::seed::derive_seed;
use crate::summarize::{missing_rate, summarize_dataset, CategoricalAggregator, SummarizationConfig};
use crate::synth::{generate_synthetic, SynthConfig};
use crate::train::{evaluate, train, TrainConfig, TrainedModel};
use crate::{Error, Result};

/// The reference synthetic task: 10k samples, prevalence 0.1, summary
/// missing rate 0.75 under eight 6-unit windows. The event density is
/// calibrated so the window-level missing rate matches the cell-level
/// target: a feature survives in a window with probability
/// 1 − exp(−λ_raw·(1−q)), which equals 1 − q at λ_raw = −ln(q)/(1−q) ≈
/// 1.344 rows per window for q = 0.75, i.e. ≈ 10.75 raw rows per sample.
pub fn canned_synth() -> SynthConfig {
    SynthConfig {
        n_samples: 10_000,
        n_numerical: 6,
        n_categorical: 2,
        missing_rate: 0.75,
        observation_window: 48.0,
        mean_events_per_sample: 10.75,
        prevalence: 0.1,
        label_noise: 0.05,
        seed: 7,
    }
}

pub fn canned_summarization() -> SummarizationConfig {
    SummarizationConfig {
        window_len: 6.0,
        categorical: CategoricalAggregator::Mode,
    }
}

pub fn canned_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        num_head: 2,
        ff_dim: 64,
        num_layer: 2,
        classifier_down_factor: 2,
        max_seq_len: 128,
    }
}

pub fn canned_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 256,
        max_epochs: 50,
        eval_every: 5,
        patience: 30,
        ..TrainConfig::default()
    }
}

/// Budget-reduced cousin of the canned task for the 30-run paired
/// comparisons.
fn reduced_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        n_samples: 2500,
        n_numerical: 4,
        n_categorical: 1,
        missing_rate: 0.6,
        observation_window: 48.0,
        mean_events_per_sample: 11.0,
        prevalence: 0.15,
        label_noise: 0.05,
        seed,
    }
}

fn reduced_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        num_head: 2,
        ff_dim: 32,
        num_layer: 1,
        classifier_down_factor: 2,
        max_seq_len: 64,
    }
}

fn reduced_train(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 256,
        max_epochs: 20,
        eval_every: 5,
        patience: 15,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub name: String,
    pub passed: bool,
    /// Soft outcomes report directional claims; a false `passed` on a
    /// hard outcome gates the release.
    pub soft: bool,
    pub details: Vec<String>,
    pub wall_secs: f64,
}

pub const SCENARIOS: [&str; 4] = [
    "sanity-learnable",
    "masking-exactness",
    "paired-claims",
    "rollout-divergence",
];

pub fn run_scenario(name: &str) -> Result<ScenarioOutcome> {
    let start = Instant::now();
    let mut outcome = match name {
        "sanity-learnable" => sanity_learnable(),
        "masking-exactness" => masking_exactness(),
        "paired-claims" => paired_claims(),
        "rollout-divergence" => rollout_divergence(),
        other => Err(Error::Config(format!(
            "unknown scenario '{other}'; available: {}",
            SCENARIOS.join(", ")
        ))),
    }?;
    outcome.wall_secs = start.elapsed().as_secs_f64();
    Ok(outcome)
}

pub fn run_all() -> Result<Vec<ScenarioOutcome>> {
    SCENARIOS.iter().map(|n| run_scenario(n)).collect()
}

fn train_on(
    ds: &Dataset,
    model: ModelConfig,
    tc: &TrainConfig,
    variant: EvatVariant,
) -> Result<TrainedModel> {
    train(
        model,
        LossConfig::default(),
        canned_summarization(),
        variant,
        tc,
        ds,
    )
}

/// Full pipeline on the canned task; gates on test AUPRC ≥ 0.40
/// (4× prevalence) plus the generator's realized-rate contracts.
fn sanity_learnable() -> Result<ScenarioOutcome> {
    let synth = canned_synth();
    let ds = generate_synthetic(&synth)?;
    let mut details = Vec::new();
    let mut passed = true;

    let realized_prev = ds.prevalence();
    details.push(format!("realized prevalence {realized_prev:.4}"));
    passed &= (realized_prev - synth.prevalence).abs() <= 0.01;

    let summaries = summarize_dataset(&ds, &canned_summarization())?;
    let rate = missing_rate(&summaries)?;
    details.push(format!("summary missing rate {rate:.4}"));
    passed &= (rate - synth.missing_rate).abs() <= 0.02;

    let (train_ds, test_ds) = split_stratified(&ds, 0.2, derive_seed(synth.seed, "test-split"))?;
    let trained = train_on(&train_ds, canned_model(), &canned_train(), EvatVariant::Scane)?;
    details.push(format!(
        "best val auprc {:?} at epoch {:?}",
        trained.best_val_auprc, trained.history.best_epoch
    ));
    let report = evaluate(&trained, &test_ds, 0.5, 0, synth.seed)?;
    details.push(format!(
        "test auprc {:.4}, auroc {:.4}, accuracy {:.4}",
        report.auprc.point, report.auroc.point, report.accuracy.point
    ));
    passed &= report.auprc.point >= 0.40;

    Ok(ScenarioOutcome {
        name: "sanity-learnable".into(),
        passed,
        soft: false,
        details,
        wall_secs: 0.0,
    })
}

/// Imputation independence: with masking on, rewriting the filler stored
/// behind every masked cell must leave each probability bit-identical.
fn masking_exactness() -> Result<ScenarioOutcome> {
    let synth = SynthConfig {
        n_samples: 400,
        ..canned_synth()
    };
    let ds = generate_synthetic(&synth)?;
    let tc = TrainConfig {
        max_epochs: 2,
        eval_every: 2,
        patience: 2,
        ..canned_train()
    };
    let trained = train_on(&ds, reduced_model(), &tc, EvatVariant::Scane)?;

    let raw = summarize_dataset(&ds, &trained.summarization)?;
    let mut mismatches = 0usize;
    let mut perturbed_cells = 0usize;
    for sm in &raw {
        let base = crate::summarize::apply_normalizer(
            sm,
            &trained.normalizer,
            &ds.schema,
            false,
        )?;
        let (p0, _) = trained.model.predict(&trained.params, &base, false)?;
        let mut poked = base.clone();
        for w in 0..poked.k() {
            for c in 0..poked.n_cols() {
                if !poked.is_observed(w, c) {
                    poked.set_masked_filler(w, c, 12345.678);
                    perturbed_cells += 1;
                }
            }
        }
        let (p1, _) = trained.model.predict(&trained.params, &poked, false)?;
        if p0.to_bits() != p1.to_bits() {
            mismatches += 1;
        }
    }
    let details = vec![format!(
        "{} samples, {perturbed_cells} masked cells perturbed, {mismatches} probability mismatches",
        raw.len()
    )];
    Ok(ScenarioOutcome {
        name: "masking-exactness".into(),
        passed: mismatches == 0,
        soft: false,
        details,
        wall_secs: 0.0,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Paired directional claims over 5 seeds on the reduced task: the scaled
/// embedding's median test AUPRC is not below any naive variant's, and
/// masked training is not below mean/mode-imputed training.
fn paired_claims() -> Result<ScenarioOutcome> {
    let seeds = [101u64, 102, 103, 104, 105];
    let variants = [
        EvatVariant::Scane,
        EvatVariant::IndexConcat,
        EvatVariant::IndexFusion,
        EvatVariant::OnehotConcat,
        EvatVariant::OnehotFusion,
    ];
    let mut details = Vec::new();
    let mut by_variant: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
    let mut imputed_runs: Vec<f64> = Vec::new();

    for &seed in &seeds {
        let ds = generate_synthetic(&reduced_synth(seed))?;
        let (train_ds, test_ds) = split_stratified(&ds, 0.2, derive_seed(seed, "test-split"))?;
        let tc = reduced_train(seed);
        for (vi, &variant) in variants.iter().enumerate() {
            let trained = train_on(&train_ds, reduced_model(), &tc, variant)?;
            let auprc = evaluate(&trained, &test_ds, 0.5, 0, seed)?.auprc.point;
            details.push(format!("seed {seed} {}: test auprc {auprc:.4}", variant.name()));
            by_variant[vi].push(auprc);
        }
        let imputed_tc = TrainConfig { impute: true, ..tc };
        let trained = train_on(&train_ds, reduced_model(), &imputed_tc, EvatVariant::Scane)?;
        let auprc = evaluate(&trained, &test_ds, 0.5, 0, seed)?.auprc.point;
        details.push(format!("seed {seed} scane+impute: test auprc {auprc:.4}"));
        imputed_runs.push(auprc);
    }

    let medians: Vec<f64> = by_variant
        .iter()
        .map(|v| median(&mut v.clone()))
        .collect();
    let imputed_median = median(&mut imputed_runs.clone());
    let scane_median = medians[0];
    let mut passed = true;
    for (vi, &variant) in variants.iter().enumerate().skip(1) {
        let ok = scane_median >= medians[vi];
        details.push(format!(
            "median scane {scane_median:.4} vs {} {:.4}: {}",
            variant.name(),
            medians[vi],
            if ok { "holds" } else { "violated" }
        ));
        passed &= ok;
    }
    let ok = scane_median >= imputed_median;
    details.push(format!(
        "median masked {scane_median:.4} vs imputed {imputed_median:.4}: {}",
        if ok { "holds" } else { "violated" }
    ));
    passed &= ok;

    Ok(ScenarioOutcome {
        name: "paired-claims".into(),
        passed,
        soft: true,
        details,
        wall_secs: 0.0,
    })
}

/// On inputs with at least 30% masked tokens and two stacks, original and
/// revised rollout rankings should differ somewhere; identical-ranking
/// samples are reported, not failed.
fn rollout_divergence() -> Result<ScenarioOutcome> {
    let synth = SynthConfig {
        n_samples: 64,
        ..canned_synth()
    };
    let ds = generate_synthetic(&synth)?;
    let tc = TrainConfig {
        max_epochs: 2,
        eval_every: 2,
        patience: 2,
        ..canned_train()
    };
    let trained = train_on(&ds, canned_model(), &tc, EvatVariant::Scane)?;
    let summaries = summarize_dataset(&ds, &trained.summarization)?;

    let mut considered = 0usize;
    let mut diverged = 0usize;
    let mut details = Vec::new();
    for (i, sm) in summaries.iter().enumerate() {
        let normed = crate::summarize::apply_normalizer(
            sm,
            &trained.normalizer,
            &ds.schema,
            false,
        )?;
        let masked_frac = normed.flat_mask().iter().filter(|&&m| m == 0).count() as f64
            / normed.flat_mask().len() as f64;
        if masked_frac < 0.30 {
            continue;
        }
        considered += 1;
        let (_, trace) = trained.model.predict(&trained.params, &normed, true)?;
        let trace = trace.expect("requested trace");
        let orig = importance_map(&rollout(&trace)?, normed.k(), normed.n_cols())?;
        let revised = importance_map(
            &revised_rollout(&trace, &trace.mask)?,
            normed.k(),
            normed.n_cols(),
        )?;
        if orig.ranks != revised.ranks {
            diverged += 1;
        } else {
            details.push(format!("sample {i}: identical rankings (reported)"));
        }
        if considered >= 20 {
            break;
        }
    }
    details.insert(
        0,
        format!("{diverged}/{considered} heavily-masked samples diverged"),
    );
    Ok(ScenarioOutcome {
        name: "rollout-divergence".into(),
        passed: considered > 0 && diverged >= 1,
        soft: true,
        details,
        wall_secs: 0.0,
    })
}

pub fn write_json(outcomes: &[ScenarioOutcome], w: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(w, outcomes)
        .map_err(|e| Error::Data(format!("serialize verdicts: {e}")))?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// JUnit-style XML for CI consumption.
pub fn write_junit_xml(outcomes: &[ScenarioOutcome], mut w: impl Write) -> Result<()> {
    let failures = outcomes.iter().filter(|o| !o.passed).count();
    let total_time: f64 = outcomes.iter().map(|o| o.wall_secs).sum();
    writeln!(w, r#"<?xml version="1.0" encoding="UTF-8"?>"#)?;
    writeln!(
        w,
        r#"<testsuite name="bench" tests="{}" failures="{failures}" time="{total_time:.3}">"#,
        outcomes.len()
    )?;
    for o in outcomes {
        writeln!(
            w,
            r#"  <testcase name="{}" time="{:.3}">"#,
            xml_escape(&o.name),
            o.wall_secs
        )?;
        if !o.passed {
            writeln!(
                w,
                r#"    <failure message="{}"/>"#,
                xml_escape(&o.details.join("; "))
            )?;
        }
        writeln!(
            w,
            "    <system-out>{}</system-out>",
            xml_escape(&o.details.join("\n"))
        )?;
        writeln!(w, "  </testcase>")?;
    }
    writeln!(w, "</testsuite>")?;
    Ok(())
}
