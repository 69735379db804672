//! Independent numerical oracles for the test suites (unit and integration).
//! Nothing here is used by any production code path.

/// Adaptive embedded Runge–Kutta–Fehlberg 4(5) integration of a scalar ODE
/// y' = f(t, y) from `t0` to `t1`, local tolerance `tol` (relative to |y|+1).
pub fn rk45(f: impl Fn(f64, f64) -> f64, y0: f64, t0: f64, t1: f64, tol: f64) -> f64 {
    let mut t = t0;
    let mut y = y0;
    let mut h = (t1 - t0).max(1e-12) / 100.0;
    while t < t1 - 1e-14 {
        h = h.min(t1 - t);
        let k1 = f(t, y);
        let k2 = f(t + 0.25 * h, y + 0.25 * h * k1);
        let k3 = f(t + 0.375 * h, y + h * (0.09375 * k1 + 0.28125 * k2));
        let k4 = f(
            t + 12.0 / 13.0 * h,
            y + h * (1932.0 / 2197.0 * k1 - 7200.0 / 2197.0 * k2 + 7296.0 / 2197.0 * k3),
        );
        let k5 = f(
            t + h,
            y + h * (439.0 / 216.0 * k1 - 8.0 * k2 + 3680.0 / 513.0 * k3 - 845.0 / 4104.0 * k4),
        );
        let k6 = f(
            t + 0.5 * h,
            y + h * (-8.0 / 27.0 * k1 + 2.0 * k2 - 3544.0 / 2565.0 * k3 + 1859.0 / 4104.0 * k4
                - 11.0 / 40.0 * k5),
        );
        let y4 = y + h * (25.0 / 216.0 * k1 + 1408.0 / 2565.0 * k3 + 2197.0 / 4104.0 * k4 - 0.2 * k5);
        let y5 = y + h
            * (16.0 / 135.0 * k1 + 6656.0 / 12825.0 * k3 + 28561.0 / 56430.0 * k4 - 9.0 / 50.0 * k5
                + 2.0 / 55.0 * k6);
        let err = (y5 - y4).abs() / (y.abs() + 1.0);
        if err <= tol * h.max(1e-30) || h < 1e-12 {
            t += h;
            y = y5;
        }
        let safety = 0.9 * (tol * h / err.max(1e-300)).powf(0.25);
        h *= safety.clamp(0.2, 5.0);
    }
    y
}

/// Exhaustive multilevel coefficient-grid minimization of the quadratic
/// f(c) = cᵀ H c − 2 rᵀ c + s with H symmetric positive definite.
///
/// The search starts on a box guaranteed to contain the minimizer (radius
/// √(f(0)/λ_min) around the origin, since f ≥ 0) and refines the grid until
/// its effective spacing √(λ_max/λ_min)·δ drops below `target`, so the
/// returned point is within `target` of the true minimizer per coordinate.
pub fn grid_min_quadratic(
    h: &nalgebra::DMatrix<f64>,
    r: &nalgebra::DVector<f64>,
    s: f64,
    target: f64,
) -> nalgebra::DVector<f64> {
    let n = h.nrows();
    assert!(n >= 1 && n <= 3, "exhaustive search only feasible for n <= 3");
    let eigs = nalgebra::SymmetricEigen::new(h.clone()).eigenvalues;
    let lmin = eigs.iter().copied().fold(f64::MAX, f64::min);
    let lmax = eigs.iter().copied().fold(f64::MIN, f64::max);
    assert!(lmin > 0.0, "quadratic form must be positive definite");
    let sqrt_cond = (lmax / lmin).sqrt();

    let f = |c: &nalgebra::DVector<f64>| (c.transpose() * h * c)[(0, 0)] - 2.0 * r.dot(c) + s;
    let mut center = nalgebra::DVector::zeros(n);
    let mut half = (f(&center).max(0.0) / lmin).sqrt() + target;
    // points per dimension chosen so the per-level argmin drift
    // δ·√cond stays below a quarter of the box
    let points = ((8.0 * sqrt_cond).ceil() as usize + 1).clamp(17, 129);
    loop {
        let delta = 2.0 * half / (points - 1) as f64;
        let mut best = (center.clone(), f64::MAX);
        let mut idx = vec![0usize; n];
        loop {
            let mut c = center.clone();
            for (d, &i) in idx.iter().enumerate() {
                c[d] += -half + i as f64 * delta;
            }
            let v = f(&c);
            if v < best.1 {
                best = (c, v);
            }
            // odometer over the n-dimensional grid
            let mut d = 0;
            loop {
                if d == n {
                    break;
                }
                idx[d] += 1;
                if idx[d] < points {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == n {
                break;
            }
        }
        center = best.0;
        if delta * sqrt_cond.max(1.0) <= target {
            return center;
        }
        half = (half / 2.0).max(delta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk45_integrates_exponential_decay() {
        let y = rk45(|_, p| -2.0 * p, 3.0, 0.0, 1.5, 1e-10);
        let exact = 3.0 * (-3.0f64).exp();
        assert!((y - exact).abs() < 1e-8 * exact.abs().max(1.0));
    }

    #[test]
    fn rk45_handles_forced_linear_ode() {
        // y' = sin(t) − y, y(0) = 0 → y = (sin t − cos t + e^{−t}) / 2
        let y = rk45(|t, y| t.sin() - y, 0.0, 0.0, 2.0, 1e-11);
        let exact = (2.0f64.sin() - 2.0f64.cos() + (-2.0f64).exp()) / 2.0;
        assert!((y - exact).abs() < 1e-8);
    }

    #[test]
    fn grid_search_finds_quadratic_minimizer() {
        // f = (c − c*)ᵀ H (c − c*) with a known, ill-scaled H
        let h = nalgebra::DMatrix::from_row_slice(3, 3, &[4.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 0.05]);
        let c_star = nalgebra::DVector::from_column_slice(&[-12.5, 3.75, 40.0]);
        let r = &h * &c_star;
        let s = (c_star.transpose() * &h * &c_star)[(0, 0)];
        let c = grid_min_quadratic(&h, &r, s, 1e-3);
        for k in 0..3 {
            assert!((c[k] - c_star[k]).abs() <= 1e-3, "coord {k}: {} vs {}", c[k], c_star[k]);
        }
    }
}
