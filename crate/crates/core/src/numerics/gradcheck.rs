use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Compares an analytic gradient against central differences of `f` at `x`.
///
/// Returns the worst coordinate of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn check_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor) -> f64 {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape must match input");
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;

        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_quadratic() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
        let err = check_gradient(|v| v.dot(v), &x, &x.scale(2.0));
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = check_gradient(|v| v.dot(v), &x, &x);
        assert!(err > 0.1);
    }
}
