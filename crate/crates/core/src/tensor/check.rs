use super::{Graph, Result, Tensor, TensorError, Var};

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Largest relative error between the tape gradient of `f` at `x` and the
/// central difference `(f(x+h) − f(x−h)) / 2h`, over every coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, h, &coords)
}

/// [`finite_diff_check`] restricted to the listed flat coordinates.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut g = Graph::new();
    let xv = g.param(x.detached());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).expect("leaf was marked differentiable").to_vec();

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut worst: f64 = 0.0;
    for &i in coords {
        if i >= x.numel() {
            return Err(TensorError::IndexOutOfRange {
                what: "finite-difference coordinate",
                index: i,
                bound: x.numel(),
            });
        }
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
