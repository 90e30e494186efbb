use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Worst relative error between reverse-mode and central-difference gradients
/// over every element of every input.
pub fn grad_check<C>(closure: C, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    C: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    grad_check_sampled(closure, inputs, eps, usize::MAX, 0)
}

/// Like [`grad_check`] but probes at most `per_input` random coordinates of each input.
pub fn grad_check_sampled<C>(
    closure: C,
    inputs: &[Tensor<f64>],
    eps: f64,
    per_input: usize,
    seed: u64,
) -> Result<f64>
where
    C: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars = xs.iter().map(|t| g.constant(t)).collect::<Result<Vec<_>>>()?;
        Ok(closure(&g, &vars)?.item())
    };

    let g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_requires_grad(true)))
        .collect::<Result<Vec<_>>>()?;
    let out = closure(&g, &vars)?;
    if out.numel() != 1 {
        return Err(Error::Usage(format!(
            "grad_check closure must return a scalar, got {:?}",
            out.shape()
        )));
    }
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let n = inputs[k].numel();
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if per_input >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_input).into_vec()
        };
        for i in coords {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}
