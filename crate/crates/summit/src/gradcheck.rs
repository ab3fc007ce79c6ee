//! Finite-difference verification of analytic gradients.
//!
//! Central differences in f64 sit around 1e-10 relative error for the
//! shapes used here, so a 1e-4 tolerance separates real backward-rule bugs
//! from numerical noise by several orders of magnitude.

use std::collections::BTreeMap;

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Named trainable tensors with deterministic (path-sorted) iteration.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<F> {
    params: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<F>) {
        self.params.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<F>> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<F>> {
        self.params.get_mut(path)
    }

    pub fn require(&self, path: &str) -> Result<&Tensor<F>> {
        self.params
            .get(path)
            .ok_or_else(|| Error::Shape(format!("missing parameter {path}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.data().len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (path, t) in &self.params {
            t.validate_finite()
                .map_err(|e| Error::Numeric(format!("parameter {path}: {e}")))?;
        }
        Ok(())
    }
}

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Maximum relative error per parameter path.
    pub per_param: BTreeMap<String, f64>,
    pub global_max: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Path holding the worst error.
    pub worst_path: Option<String>,
}

impl GradReport {
    fn from_errors(per_param: BTreeMap<String, f64>, tolerance: f64) -> Self {
        let (worst_path, global_max) = per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (Some(k.clone()), *v))
            .unwrap_or((None, 0.0));
        Self {
            pass: global_max < tolerance,
            per_param,
            global_max,
            tolerance,
            worst_path,
        }
    }
}

/// When both the analytic and the finite-difference gradient are tiny,
/// relative error is measured against this floor instead of the gradient
/// magnitude, so sub-roundoff gradients do not produce spurious failures.
const REL_ERROR_FLOOR: f64 = 1e-4;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Check analytic gradients of a scalar loss against central differences.
///
/// `eval(params, want_grads)` must return the loss value and, when asked,
/// the analytic gradient for every parameter (missing entries are treated
/// as zero). The function is called twice per scalar parameter, once per
/// perturbation direction.
pub fn grad_check<E>(eval: E, params: &ParamSet<f64>, eps: f64, tol: f64) -> Result<GradReport>
where
    E: Fn(&ParamSet<f64>, bool) -> Result<(f64, Option<ParamSet<f64>>)>,
{
    let (loss0, grads) = eval(params, true)?;
    if !loss0.is_finite() {
        return Err(Error::Numeric(format!(
            "loss is non-finite ({loss0}) at the unperturbed point"
        )));
    }
    let grads = grads.ok_or_else(|| {
        Error::Numeric("gradient evaluation returned no analytic gradients".into())
    })?;

    let mut per_param = BTreeMap::new();
    let mut work = params.clone();
    let paths: Vec<String> = params.paths().cloned().collect();
    for path in paths {
        let n = params.require(&path)?.data().len();
        let zero = Tensor::new(
            params.require(&path)?.shape().to_vec(),
            vec![0.0; n],
        )?;
        let analytic = grads.get(&path).unwrap_or(&zero).clone();
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = params.require(&path)?.data()[i];

            work.get_mut(&path).unwrap().data_mut()[i] = orig + eps;
            let (lp, _) = eval(&work, false)?;
            work.get_mut(&path).unwrap().data_mut()[i] = orig - eps;
            let (lm, _) = eval(&work, false)?;
            work.get_mut(&path).unwrap().data_mut()[i] = orig;

            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite while perturbing parameter {path}[{i}]"
                )));
            }
            let fd = (lp - lm) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], fd));
        }
        per_param.insert(path, worst);
    }
    Ok(GradReport::from_errors(per_param, tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let mut params = ParamSet::new();
        params.insert("theta", Tensor::scalar(3.0));
        let report = grad_check(
            |p, want| {
                let th = p.require("theta")?.item()?;
                let grads = want.then(|| {
                    let mut g = ParamSet::new();
                    g.insert("theta", Tensor::scalar(2.0 * th));
                    g
                });
                Ok((th * th, grads))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.global_max < 1e-8);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut params = ParamSet::new();
        params.insert("theta", Tensor::scalar(3.0));
        let report = grad_check(
            |p, want| {
                let th = p.require("theta")?.item()?;
                let grads = want.then(|| {
                    let mut g = ParamSet::new();
                    // Deliberately doubled.
                    g.insert("theta", Tensor::scalar(4.0 * th));
                    g
                });
                Ok((th * th, grads))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(0.0));
        let err = grad_check(
            |p, want| {
                let w = p.require("w")?.item()?;
                // Finite at 0, NaN as soon as w is perturbed negative.
                let loss = if w < 0.0 { f64::NAN } else { w.sqrt() };
                let grads = want.then(|| {
                    let mut g = ParamSet::new();
                    g.insert("w", Tensor::scalar(0.0));
                    g
                });
                Ok((loss, grads))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("w[0]"), "got: {err}");
    }

    /// Run a gradient check of `build` (tape graph from named leaves) on
    /// `n_seeds` random parameter draws.
    fn check_graph<B>(params_spec: &[(&str, usize, usize, f64, f64)], n_seeds: u64, build: B)
    where
        B: Fn(&mut Tape<f64>, &BTreeMap<String, crate::tape::NodeId>) -> Result<crate::tape::NodeId>,
    {
        for seed in 0..n_seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = ParamSet::new();
            for (name, r, c, lo, hi) in params_spec {
                params.insert(*name, rand_tensor(&mut rng, *r, *c, *lo, *hi));
            }
            let report = grad_check(
                |p, want| {
                    let mut tape = Tape::new();
                    let mut ids = BTreeMap::new();
                    for (path, t) in p.iter() {
                        ids.insert(path.clone(), tape.param(t.clone()));
                    }
                    let loss_id = build(&mut tape, &ids)?;
                    let loss = tape.value(loss_id).item()?;
                    let grads = if want {
                        let g = tape.backward(loss_id, 1.0)?;
                        let mut out = ParamSet::new();
                        for (path, id) in &ids {
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
                "seed {seed}: max rel err {} at {:?}",
                report.global_max, report.worst_path
            );
        }
    }

    /// Mixes columns with a fixed constant so losses are not symmetric in
    /// the output entries (a plain sum has zero gradient through softmax).
    fn mixed_sum(tape: &mut Tape<f64>, y: crate::tape::NodeId) -> Result<crate::tape::NodeId> {
        let cols = tape.value(y).cols();
        let weights: Vec<f64> = (0..cols).map(|c| 0.3 + 0.7 * (c as f64).sin()).collect();
        let w = tape.constant(Tensor::matrix(cols, 1, weights)?);
        let mixed = tape.matmul(y, w)?;
        Ok(tape.sum_all(mixed))
    }

    #[test]
    fn matmul_gradients() {
        check_graph(
            &[("a", 3, 4, -1.0, 1.0), ("b", 4, 2, -1.0, 1.0)],
            20,
            |tape, ids| {
                let c = tape.matmul(ids["a"], ids["b"])?;
                mixed_sum(tape, c)
            },
        );
    }

    #[test]
    fn add_and_scale_gradients() {
        check_graph(
            &[("a", 3, 3, -1.0, 1.0), ("b", 3, 3, -1.0, 1.0)],
            20,
            |tape, ids| {
                let s = tape.add(ids["a"], ids["b"])?;
                let sc = tape.scale(s, -2.5);
                mixed_sum(tape, sc)
            },
        );
    }

    #[test]
    fn add_row_gradients() {
        check_graph(
            &[("a", 4, 3, -1.0, 1.0), ("row", 1, 3, -1.0, 1.0)],
            20,
            |tape, ids| {
                let s = tape.add_row(ids["a"], ids["row"])?;
                mixed_sum(tape, s)
            },
        );
    }

    #[test]
    fn softmax_gradients() {
        check_graph(&[("x", 4, 5, -2.0, 2.0)], 20, |tape, ids| {
            let s = tape.softmax_rows(ids["x"])?;
            mixed_sum(tape, s)
        });
    }

    #[test]
    fn gelu_gradients() {
        check_graph(&[("x", 4, 4, -3.0, 3.0)], 20, |tape, ids| {
            let g = tape.gelu(ids["x"]);
            mixed_sum(tape, g)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        check_graph(
            &[
                ("x", 4, 6, -2.0, 2.0),
                ("gain", 1, 6, 0.5, 1.5),
                ("bias", 1, 6, -0.5, 0.5),
            ],
            20,
            |tape, ids| {
                let ln = tape.layer_norm(ids["x"], ids["gain"], ids["bias"], 1e-5)?;
                mixed_sum(tape, ln)
            },
        );
    }

    #[test]
    fn mean_rows_gradients() {
        check_graph(&[("x", 5, 3, -1.0, 1.0)], 20, |tape, ids| {
            let m = tape.mean_rows(ids["x"])?;
            mixed_sum(tape, m)
        });
    }

    #[test]
    fn transpose_slice_concat_stack_gradients() {
        check_graph(
            &[("x", 4, 6, -1.0, 1.0), ("y", 4, 2, -1.0, 1.0)],
            20,
            |tape, ids| {
                let t = tape.transpose(ids["x"])?;
                let back = tape.transpose(t)?;
                let left = tape.slice_cols(back, 0, 3)?;
                let right = tape.slice_cols(back, 3, 3)?;
                let cat = tape.concat_cols(&[left, ids["y"], right])?;
                let stacked = tape.stack_rows(&[cat, cat])?;
                mixed_sum(tape, stacked)
            },
        );
    }

    #[test]
    fn mask_rows_gradients() {
        check_graph(&[("x", 5, 3, -1.0, 1.0)], 20, |tape, ids| {
            let m = tape.mask_rows(ids["x"], &[1, 0, 1, 0, 1])?;
            mixed_sum(tape, m)
        });
    }

    #[test]
    fn scaled_gather_gradients() {
        check_graph(&[("table", 3, 4, -1.0, 1.0)], 20, |tape, ids| {
            let picks = vec![
                Some((0, 1.5)),
                None,
                Some((2, -0.5)),
                Some((0, 2.0)),
                Some((1, 0.25)),
            ];
            let g = tape.scaled_gather(ids["table"], picks)?;
            mixed_sum(tape, g)
        });
    }

    #[test]
    fn sigmoid_focal_loss_gradients() {
        for gamma in [0.0, 1.0, 2.0] {
            check_graph(&[("logits", 6, 1, -2.0, 2.0)], 20, move |tape, ids| {
                let p = tape.sigmoid(ids["logits"]);
                tape.focal_loss(p, &[1, 0, 0, 1, 0, 1], 0.25, gamma)
            });
        }
    }

    #[test]
    fn softmax_row_sums_on_masked_scale_inputs() {
        // Kernel property at extreme logit ranges.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut data = vec![0.0; 12];
            for v in data.iter_mut() {
                *v = if rng.random_range(0.0..1.0) < 0.3 {
                    -1e9
                } else {
                    rng.random_range(-100.0..100.0)
                };
            }
            // Keep at least one live entry per row.
            for r in 0..3 {
                data[r * 4] = rng.random_range(-100.0..100.0);
            }
            let m = Tensor::matrix(3, 4, data).unwrap();
            let s = tensor::softmax_rows(&m).unwrap();
            for r in 0..3 {
                let sum: f64 = s.row_slice(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }
}
