use super::Tensor;

/// Denominator floor for [`relative_error`]. Central differences at step
/// 1e-5 on O(1) losses carry roughly 1e-10 of roundoff, so gradients below
/// this floor are compared in absolute terms.
const ABS_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Worst relative error between `analytic` and central differences of `f`
/// over every coordinate of every tensor in `point`.
pub fn grad_check<F>(f: F, point: &[Tensor], analytic: &[Tensor], step: f64) -> f64
where
    F: Fn(&[Tensor]) -> f64,
{
    let coords: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(t, tensor)| (0..tensor.len()).map(move |i| (t, i)))
        .collect();
    grad_check_coords(f, point, analytic, step, &coords)
}

/// Like [`grad_check`] but only over the listed `(tensor, flat index)` pairs.
pub fn grad_check_coords<F>(f: F, point: &[Tensor], analytic: &[Tensor], step: f64, coords: &[(usize, usize)]) -> f64
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = point.to_vec();
    let mut worst = 0.0f64;
    for &(t, i) in coords {
        let numeric = central_difference(&f, &mut work, t, i, step);
        worst = worst.max(relative_error(analytic[t].data()[i], numeric));
    }
    worst
}

/// `(f(x + step e) - f(x - step e)) / 2 step` along flat index `i` of
/// tensor `t`. `work` is restored before returning.
pub fn central_difference<F>(f: F, work: &mut [Tensor], t: usize, i: usize, step: f64) -> f64
where
    F: Fn(&[Tensor]) -> f64,
{
    let orig = work[t].data()[i];
    work[t].data_mut()[i] = orig + step;
    let plus = f(work);
    work[t].data_mut()[i] = orig - step;
    let minus = f(work);
    work[t].data_mut()[i] = orig;
    (plus - minus) / (2.0 * step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(vec![3, 4], |i| i as f64 * 0.37 - 1.0);
        let err = grad_check(|p| p[0].sum(), std::slice::from_ref(&x), &[Tensor::full(vec![3, 4], 1.0)], 1e-5);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function() {
        let x = Tensor::from_fn(vec![5], |i| i as f64);
        let err = grad_check(|_| 4.2, &[x], &[Tensor::zeros(vec![5])], 1e-5);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |p: &[Tensor]| p[0].data().iter().map(|v| v * v).sum::<f64>();
        let wrong = Tensor::from_vec(vec![2], vec![2.0, 3.0]).unwrap();
        assert!(grad_check(f, &[x], &[wrong], 1e-5) > 0.2);
    }
}
