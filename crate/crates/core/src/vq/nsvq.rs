//! Noise-substituted quantization.
//!
//! The surrogate replaces the hard quantization error `t_q - t` by a random
//! direction of identical length, `t + ‖t - z‖ · e/‖e‖`. Unlike the argmin it
//! is differentiable in both the input and the selected entry.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Codebook, VqError};

#[derive(Debug, Clone, PartialEq)]
pub struct NsvqSample {
    pub surrogate: Vec<f64>,
    pub index: usize,
    /// Hard quantization distance `‖t - z_index‖`.
    pub distance: f64,
    /// The unit direction `e/‖e‖` that was drawn; needed for the backward pass.
    pub unit_noise: Vec<f64>,
}

fn unit_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let e: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            return e.into_iter().map(|v| v / n).collect();
        }
    }
}

/// `t + ‖t - z‖ · u` for a fixed unit direction `u`.
pub fn nsvq_forward(t: &[f64], z: &[f64], unit_noise: &[f64]) -> Vec<f64> {
    let d = t.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    t.iter().zip(unit_noise).map(|(a, u)| a + d * u).collect()
}

/// Quantize `t` and return the noise-substituted surrogate. Records one use
/// of the selected entry.
pub fn quantize_nsvq<R: Rng + ?Sized>(t: &[f32], cb: &Codebook, rng: &mut R) -> Result<NsvqSample, VqError> {
    let hard = cb.quantize_hard(t)?;
    let unit_noise = unit_gaussian(cb.dim(), rng);
    let surrogate = t
        .iter()
        .zip(&unit_noise)
        .map(|(a, u)| f64::from(*a) + hard.distance * u)
        .collect();
    Ok(NsvqSample {
        surrogate,
        index: hard.index,
        distance: hard.distance,
        unit_noise,
    })
}

/// Gradients of a loss with respect to the input `t` and the selected entry
/// `z`, given the upstream gradient at the surrogate.
///
/// With `r = t - z`, `d = ‖r‖` and `s = u · upstream`:
/// `∂L/∂z = -(r/d)·s` and `∂L/∂t = upstream + (r/d)·s`. At `d = 0` the
/// gradient passes straight through to `t` and `z` receives nothing.
pub fn nsvq_backward(
    t: &[f64],
    z: &[f64],
    unit_noise: &[f64],
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), VqError> {
    let dim = t.len();
    for got in [z.len(), unit_noise.len(), upstream.len()] {
        if got != dim {
            return Err(VqError::DimensionMismatch { expected: dim, got });
        }
    }
    let r: Vec<f64> = t.iter().zip(z).map(|(a, b)| a - b).collect();
    let d = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if d == 0.0 {
        return Ok((upstream.to_vec(), vec![0.0; dim]));
    }
    let s: f64 = unit_noise.iter().zip(upstream).map(|(u, g)| u * g).sum();
    let grad_t = upstream.iter().zip(&r).map(|(g, ri)| g + ri / d * s).collect();
    let grad_z = r.iter().map(|ri| -ri / d * s).collect();
    Ok((grad_t, grad_z))
}
