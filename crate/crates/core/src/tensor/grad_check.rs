//! Central finite differences vs autodiff, in 64-bit precision.

use rand::seq::index::sample;
use rand::Rng;

use super::{Tape, Tensor, VarId};
use crate::error::{Error, Result};

/// Build a scalar loss on the tape from the given parameter leaves.
pub type LossBuilder<'a> = dyn Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId> + 'a;

fn eval_loss(f: &LossBuilder, params: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    Ok(v)
}

fn relative_error(ad: f64, fd: f64) -> f64 {
    // The denominator floor keeps central-difference truncation noise
    // (~1e-10 absolute at eps = 1e-5) from dominating coordinates whose
    // true gradient is near zero; a wrong backward rule still shows up as
    // an O(1) relative error at this scale.
    let denom = ad.abs().max(fd.abs()).max(1e-4);
    (ad - fd).abs() / denom
}

/// Worst relative error between autodiff and central finite differences over
/// every coordinate of every parameter.
pub fn grad_check(f: &LossBuilder, params: &[Tensor<f64>], eps: f64) -> Result<f64> {
    grad_check_impl(f, params, eps, None, &mut rand::rngs::mock::StepRng::new(0, 1))
}

/// Same check, but probing only `coords_per_param` random coordinates of each
/// parameter tensor. Full sweeps over large models are quadratic in parameter
/// count; sampling keeps the model-level check tractable.
pub fn grad_check_sampled<R: Rng>(
    f: &LossBuilder,
    params: &[Tensor<f64>],
    eps: f64,
    coords_per_param: usize,
    rng: &mut R,
) -> Result<f64> {
    grad_check_impl(f, params, eps, Some(coords_per_param), rng)
}

fn grad_check_impl<R: Rng>(
    f: &LossBuilder,
    params: &[Tensor<f64>],
    eps: f64,
    coords_per_param: Option<usize>,
    rng: &mut R,
) -> Result<f64> {
    // Autodiff gradients at the unperturbed point.
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    tape.check_finite(loss, "grad_check loss")?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, id) in ids.iter().enumerate() {
        let zero = Tensor::zeros(params[pi].shape());
        let ad_grad = grads.get(*id).unwrap_or(&zero);
        let n = params[pi].len();
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for ci in coords {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let up = eval_loss(f, &work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let down = eval_loss(f, &work)?;
            work[pi].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * eps);
            let err = relative_error(ad_grad.data()[ci], fd);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
