use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `params`.
///
/// Each coordinate is perturbed by `±step` in turn; `f` is evaluated
/// `2 * n` times, so this is only suitable as a test oracle on small models.
pub fn finite_difference_grad<F>(mut f: F, params: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Usage(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let up = f(&work)?;
            work[p].data_mut()[i] = orig - step;
            let down = f(&work)?;
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over all coordinates.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_difference_grad(|p| Ok(p[0].data()[0].powi(2)), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let params = [Tensor::vector(vec![1.0, 2.0, 3.0])];
        let g = finite_difference_grad(|_| Ok(7.0), &params, 1e-5).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_difference_grad(|_| Ok(0.0), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
