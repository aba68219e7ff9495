//! Central-difference gradient verification at f64 precision.
//!
//! The model under test is rebuilt by a closure from an explicit parameter
//! list, so the checker can rerun the forward pass with single-coordinate
//! perturbations. The closure must be deterministic (no dropout unless the
//! mask is fixed by the caller).

use std::collections::HashSet;

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::CounterRng;

#[derive(Debug, Clone)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub h: f64,
    /// Relative tolerance `|a−n| / max(|a|,|n|)`.
    pub rel_tol: f64,
    /// Absolute floor under which any difference passes (kills noise when
    /// both gradients are ~0).
    pub abs_floor: f64,
    /// Cap on coordinates sampled per parameter tensor.
    pub max_per_param: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts { h: 1e-5, rel_tol: 1e-4, abs_floor: 1e-8, max_per_param: 16, seed: 7 }
    }
}

#[derive(Debug, Clone)]
pub struct GradFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of coordinates compared.
    pub checked: usize,
    pub failures: Vec<GradFailure>,
    /// Worst relative error among coordinates whose absolute difference
    /// exceeded the floor; 0.0 when every difference was below it.
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn is_pass(&self) -> bool {
        self.failures.is_empty()
    }

    /// Panic with a readable digest if any coordinate failed.
    pub fn assert_pass(&self) {
        if self.is_pass() {
            return;
        }
        let mut msg = format!(
            "gradient check failed on {}/{} coordinates (max rel err {:.3e}):",
            self.failures.len(),
            self.checked,
            self.max_rel_err
        );
        for f in self.failures.iter().take(10) {
            msg.push_str(&format!(
                "\n  {}[{}]: analytic {:.6e} vs numeric {:.6e}",
                f.param, f.index, f.analytic, f.numeric
            ));
        }
        if self.failures.len() > 10 {
            msg.push_str(&format!("\n  ... and {} more", self.failures.len() - 10));
        }
        panic!("{}", msg);
    }
}

fn sample_indices(numel: usize, cap: usize, rng: &mut CounterRng) -> Vec<usize> {
    if numel <= cap {
        return (0..numel).collect();
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(cap);
    while out.len() < cap {
        let i = rng.below(numel);
        if seen.insert(i) {
            out.push(i);
        }
    }
    out
}

/// Compare tape gradients against central finite differences for every
/// named parameter. `f` rebuilds the forward pass and returns the scalar
/// loss; it is called `1 + 2·checked` times.
pub fn check_gradients<F>(
    f: F,
    params: &[(String, Tensor<f64>)],
    opts: &GradCheckOpts,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[(String, Tensor<f64>)]) -> Result<Var<'t, f64>>,
{
    // Analytic pass.
    let tape: Tape<f64> = Tape::new();
    let loss = f(&tape, params)?;
    tape.backward(loss)?;
    let analytic: Vec<Option<Tensor<f64>>> = params.iter().map(|(_, t)| tape.grad(t)).collect();
    drop(tape);

    let eval = |ps: &[(String, Tensor<f64>)]| -> Result<f64> {
        let tape: Tape<f64> = Tape::new();
        let loss = f(&tape, ps)?;
        Ok(loss.value().item())
    };

    let mut checked = 0usize;
    let mut failures = Vec::new();
    let mut max_rel = 0.0f64;
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let mut rng = CounterRng::new(opts.seed).derive_named(name);
        for idx in sample_indices(tensor.numel(), opts.max_per_param, &mut rng) {
            let perturbed = |delta: f64| -> Result<f64> {
                let mut data = tensor.as_slice().to_vec();
                data[idx] += delta;
                let mut ps = params.to_vec();
                ps[pi].1 = Tensor::new(tensor.shape().to_vec(), data)?;
                eval(&ps)
            };
            let numeric = (perturbed(opts.h)? - perturbed(-opts.h)?) / (2.0 * opts.h);
            let a = analytic[pi].as_ref().map(|g| g.as_slice()[idx]).unwrap_or(0.0);
            checked += 1;
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > 0.0 { diff / scale } else { 0.0 };
            // Track the worst relative error only over differences large
            // enough to matter; a true zero gradient against finite-difference
            // noise of 1e-12 has rel ≈ 1 but says nothing about correctness.
            if diff > opts.abs_floor {
                max_rel = max_rel.max(rel);
            }
            if diff > opts.abs_floor && rel > opts.rel_tol {
                failures.push(GradFailure { param: name.clone(), index: idx, analytic: a, numeric });
            }
        }
    }
    Ok(GradCheckReport { checked, failures, max_rel_err: max_rel })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_expression_passes() {
        // loss = sum(softmax(x·W)·proj) + sum((x·W)²-ish nonlinearities)
        let mut rng = CounterRng::new(11);
        let params = vec![
            ("x".to_string(), Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, &mut rng)),
            ("w".to_string(), Tensor::rand_uniform(vec![5, 4], -1.0, 1.0, &mut rng)),
        ];
        let proj = Tensor::rand_uniform(vec![3, 5], 0.1, 1.0, &mut rng);
        let report = check_gradients(
            |tape, ps| {
                let x = tape.param(&ps[0].1)?;
                let w = tape.param(&ps[1].1)?;
                let h = x.matmul(w, true)?.gelu()?.softmax_last()?;
                h.mul(tape.constant(&proj)?)?.sum_all()
            },
            &params,
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert!(report.checked >= 20);
        report.assert_pass();
    }

    #[test]
    fn kink_at_zero_is_caught() {
        // relu is non-differentiable at exactly 0; the one-sided analytic
        // gradient disagrees with the symmetric difference there, and the
        // checker must notice.
        let params = vec![("x".to_string(), Tensor::from_f64s(vec![1], &[0.0]).unwrap())];
        let report = check_gradients(
            |tape, ps| tape.param(&ps[0].1)?.relu()?.sum_all(),
            &params,
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert!(!report.is_pass());
    }

    #[test]
    fn unused_parameter_with_zero_numeric_gradient_passes() {
        let params = vec![
            ("used".to_string(), Tensor::from_f64s(vec![2], &[0.5, -0.25]).unwrap()),
            ("unused".to_string(), Tensor::from_f64s(vec![2], &[1.0, 1.0]).unwrap()),
        ];
        let report = check_gradients(
            |tape, ps| {
                let x = tape.param(&ps[0].1)?;
                let _ = tape.param(&ps[1].1)?;
                x.mul(x)?.sum_all()
            },
            &params,
            &GradCheckOpts::default(),
        )
        .unwrap();
        report.assert_pass();
    }
}
