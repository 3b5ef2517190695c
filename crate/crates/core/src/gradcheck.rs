//! Reverse-mode gradients against central finite differences.
//!
//! A non-scalar output is reduced to `L = Σ R ⊙ out` with a fixed random
//! projection `R`, so every output element contributes to the check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const MAX_ELEMENTS: usize = 10_000;

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: DEFAULT_STEP,
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks the gradient of `op` with respect to every element of every input.
///
/// `op` builds its output from the given leaves; it is replayed on a fresh
/// tape for each perturbation.
pub fn grad_check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    op: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let total: usize = inputs.iter().map(Tensor::len).sum();
    if total > MAX_ELEMENTS {
        return Err(Error::invalid(format!(
            "grad_check({name}): {total} input elements exceed the limit of {MAX_ELEMENTS}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut projection: Option<Tensor<f64>> = None;

    let mut objective = |values: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = op(&mut tape, &leaves)?;
        let weights = projection
            .get_or_insert_with(|| Tensor::uniform(tape.shape(out), 1.0, &mut rng))
            .clone();
        let loss = tape.weighted_sum(out, weights)?;
        let value = tape.value(loss).data()[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        Ok((
            value,
            leaves
                .iter()
                .zip(values)
                .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
                .collect(),
        ))
    };

    let (_, analytic) = objective(inputs, true)?;
    for (i, g) in analytic.iter().enumerate() {
        if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                op: name.to_string(),
                input: i,
                index,
            });
        }
    }

    let mut report = GradCheckReport {
        op: name.to_string(),
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        tolerance: cfg.tolerance,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            let (hi, lo) = (orig + cfg.step, orig - cfg.step);
            work[i].data_mut()[k] = hi;
            let (plus, _) = objective(&work, false)?;
            work[i].data_mut()[k] = lo;
            let (minus, _) = objective(&work, false)?;
            work[i].data_mut()[k] = orig;

            // Divide by the step as represented, not the nominal 2h.
            let numeric = (plus - minus) / (hi - lo);
            if !numeric.is_finite() {
                return Err(Error::NonFiniteGradient {
                    op: name.to_string(),
                    input: i,
                    index: k,
                });
            }
            let err = relative_error(analytic[i].data()[k], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, k);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
