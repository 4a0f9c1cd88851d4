use super::Tensor;
use crate::error::{Error, Result};

/// Relative error used for gradient comparisons.
pub fn rel_error(a: f64, n: f64) -> f64 {
    rel_error_floor(a, n, 1e-8)
}

/// Relative error whose denominator never drops below `floor`, so entries
/// that are truly zero are judged by absolute difference.
pub fn rel_error_floor(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` at `params`,
/// entry by entry, and returns the largest relative error.
pub fn grad_check<F>(f: F, params: &[Tensor], analytic: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> f64,
{
    grad_check_floor(f, params, analytic, eps, 1e-8)
}

/// [`grad_check`] with an explicit denominator floor (see [`rel_error_floor`]).
pub fn grad_check_floor<F>(mut f: F, params: &[Tensor], analytic: &[Tensor], eps: f64, floor: f64) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::Shape("one analytic gradient per parameter required".into()));
    }
    let base = f(params);
    if !base.is_finite() {
        return Err(Error::Numerical("loss is not finite at the check point".into()));
    }
    let mut probe: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::Shape(format!(
                "gradient {pi} shape {:?} != parameter shape {:?}",
                grad.shape(),
                params[pi].shape()
            )));
        }
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            probe[pi].data_mut()[j] = orig + eps;
            let up = f(&probe);
            probe[pi].data_mut()[j] = orig - eps;
            let down = f(&probe);
            probe[pi].data_mut()[j] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss not finite when perturbing parameter {pi}[{j}]"
                )));
            }
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_error_floor(grad.data()[j], numeric, floor));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
        let f = |p: &[Tensor]| 0.5 * p[0].data().iter().map(|v| v * v).sum::<f64>();
        let err = grad_check(f, &[theta.clone()], &[theta], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let theta = Tensor::vector(vec![0.3, -1.2]);
        let f = |p: &[Tensor]| 0.5 * p[0].data().iter().map(|v| v * v).sum::<f64>();
        let wrong = Tensor::vector(vec![-0.3, -1.2]);
        assert!(grad_check(f, &[theta], &[wrong], 1e-5).unwrap() > 0.5);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let theta = Tensor::vector(vec![1.0]);
        let f = |_: &[Tensor]| f64::NAN;
        assert!(matches!(
            grad_check(f, &[theta.clone()], &[theta], 1e-5),
            Err(Error::Numerical(_))
        ));
    }
}
