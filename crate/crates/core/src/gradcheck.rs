//! Central-difference verification of tape gradients.
//!
//! The checked fragment is reduced to a scalar through a fixed random
//! projection `Σ r ⊙ out`. Each numeric derivative divides by the step that was
//! actually realized in floating point, `(x + h) - (x - h)`, so fragments that
//! are exactly linear (identity, sums) reproduce their analytic gradient bit for
//! bit.
//!
//! Central differences are only meaningful where the fragment is smooth over
//! the whole stencil. The tape fingerprints every relu mask and max-pool
//! argmax; when either end of the stencil lands on a different piece than the
//! base point, the step is shrunk tenfold (at most [`MAX_REFINEMENTS`] times)
//! for that coordinate only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference half step.
pub const STEP: f64 = 1e-3;

/// How often a stencil crossing a kink is retried with a smaller step.
pub const MAX_REFINEMENTS: usize = 3;

/// Gradients smaller than this are treated as this large when normalizing.
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    /// `max |analytic - numeric|` over the tensor, divided by the larger of the
    /// two gradients' max-norms.
    pub max_rel_error: f64,
    /// Coordinates whose stencil crossed a kink at the nominal step.
    pub refined: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_error() < self.tolerance
    }
}

/// Checks `fragment` with respect to every tensor in `inputs`.
///
/// `fragment` receives one leaf per input (all requiring grad) and must return
/// its output; it may be called many times and must be deterministic.
pub fn grad_check<F>(
    inputs: &[(String, Tensor)],
    mut fragment: F,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    fn eval<F>(fragment: &mut F, values: &[Tensor]) -> Result<(Tensor, Option<u64>)>
    where
        F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::with_kink_tracking();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = fragment(&mut tape, &vars)?;
        Ok((tape.value(out).clone(), tape.kink_signature()))
    }

    let values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (base, base_kinks) = eval(&mut fragment, &values)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection = Tensor::randn(base.shape(), 1.0, &mut rng);

    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = fragment(&mut tape, &vars)?;
        let r = tape.constant(projection.clone());
        let weighted = tape.mul(out, r)?;
        let loss = tape.sum(weighted)?;
        let mut grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.take(v)).collect::<Vec<_>>()
    };

    let mut tensors = Vec::with_capacity(inputs.len());
    let mut perturbed = values.clone();
    for (ti, (name, t)) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.len()];
        let mut refined = 0;
        for (i, n) in numeric.iter_mut().enumerate() {
            let x = t.data()[i];
            let mut step = STEP;
            for attempt in 0..=MAX_REFINEMENTS {
                let (xp, xm) = (x + step, x - step);
                perturbed[ti].data_mut()[i] = xp;
                let (up, up_kinks) = eval(&mut fragment, &perturbed)?;
                perturbed[ti].data_mut()[i] = xm;
                let (down, down_kinks) = eval(&mut fragment, &perturbed)?;
                perturbed[ti].data_mut()[i] = x;
                let realized = xp - xm;
                *n = projection
                    .data()
                    .iter()
                    .zip(up.data().iter().zip(down.data()))
                    .map(|(r, (u, d))| r * ((u - d) / realized))
                    .sum();
                if up_kinks == base_kinks && down_kinks == base_kinks {
                    break;
                }
                if attempt == 0 {
                    refined += 1;
                }
                step /= 10.0;
            }
        }
        let a = analytic[ti].data();
        let scale = a
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = a
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let max_rel_error = if diff == 0.0 {
            0.0
        } else {
            diff / scale.max(SCALE_FLOOR)
        };
        tensors.push(TensorCheck {
            name: name.clone(),
            len: t.len(),
            max_rel_error,
            refined,
        });
    }
    Ok(GradCheckReport { tensors, tolerance })
}
