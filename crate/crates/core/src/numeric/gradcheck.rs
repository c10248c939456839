use super::tensor::Tensor;

/// Maximum relative error between `analytic_grad` and central differences of `f`
/// at `x`, using `max(1e-8, |g_i|)` as the denominator.
pub fn finite_difference_check<F>(f: F, x: &Tensor, analytic_grad: &Tensor, h: f64) -> f64
where
    F: Fn(&Tensor) -> f64,
{
    assert_eq!(x.dims(), analytic_grad.dims(), "gradient dims must match input");
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let g = analytic_grad.data()[i];
        worst = worst.max((numeric - g).abs() / g.abs().max(1e-8));
    }
    worst
}

/// Variant that tolerates near-zero gradient entries: the denominator is
/// `max(abs_floor, |g_i|)`. Used where cancellations leave entries at
/// round-off level and a pure relative test would divide noise by noise.
pub fn finite_difference_check_floored<F>(
    f: F,
    x: &Tensor,
    analytic_grad: &Tensor,
    h: f64,
    abs_floor: f64,
) -> f64
where
    F: Fn(&Tensor) -> f64,
{
    assert_eq!(x.dims(), analytic_grad.dims(), "gradient dims must match input");
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let g = analytic_grad.data()[i];
        worst = worst.max((numeric - g).abs() / g.abs().max(abs_floor));
    }
    worst
}
