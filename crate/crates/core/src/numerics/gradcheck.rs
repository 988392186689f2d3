//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::Tensor;

/// Entries whose analytic and numeric gradients are both below this magnitude
/// are compared in absolute rather than relative terms.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
    /// Lower bound on the relative-error denominator.
    pub denominator_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries_per_tensor: None,
            seed: 0,
            denominator_floor: DENOMINATOR_FLOOR,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Entries left out because a perturbation crossed a relu or abs kink.
    pub skipped_at_kinks: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, DENOMINATOR_FLOOR)
}

pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(loss_fn: &F, tensors: &[Tensor]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = tensors.iter().map(|t| g.param(t.clone())).collect();
    let out = loss_fn(&mut g, &ids)?;
    Ok((g.value(out).item(), g.kink_signs()))
}

/// Compares tape gradients of `loss_fn` with central differences.
///
/// `loss_fn` receives one leaf per entry of `params` (in order) and must
/// return a single-element node. An entry whose perturbation flips the side
/// of any relu or abs input is not differentiable at the step size and is
/// counted as skipped instead of compared.
pub fn grad_check<F>(
    loss_fn: F,
    params: &[(String, Tensor)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if opts.step <= 0.0 || !opts.step.is_finite() {
        return Err(Error::config("step", "must be positive"));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = loss_fn(&mut g, &ids)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::Numerical("loss is not finite at the base point".into()));
    }
    let grads = g.backward(out)?;
    let base_signs = g.kink_signs();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        tolerance: opts.tolerance,
        tensors: Vec::with_capacity(params.len()),
    };

    for (ti, (name, _)) in params.iter().enumerate() {
        let analytic = grads.wrt(ids[ti]);
        let len = tensors[ti].len();
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(max) if max < len => {
                let mut picked = sample(&mut rng, len, max).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..len).collect(),
        };
        let mut worst: f64 = 0.0;
        let mut skipped = 0;
        for &e in &entries {
            let orig = tensors[ti].data()[e];
            tensors[ti].data_mut()[e] = orig + opts.step;
            let (plus, plus_signs) = evaluate(&loss_fn, &tensors)?;
            tensors[ti].data_mut()[e] = orig - opts.step;
            let (minus, minus_signs) = evaluate(&loss_fn, &tensors)?;
            tensors[ti].data_mut()[e] = orig;
            if plus_signs != base_signs || minus_signs != base_signs {
                skipped += 1;
                continue;
            }
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss when perturbing {name}[{e}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error_floored(analytic.data()[e], numeric, opts.denominator_floor));
        }
        report.tensors.push(TensorCheck {
            name: name.clone(),
            checked: entries.len() - skipped,
            skipped_at_kinks: skipped,
            max_rel_err: worst,
        });
    }
    Ok(report)
}
