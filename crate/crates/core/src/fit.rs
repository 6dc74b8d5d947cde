//! Levenberg-Marquardt for small dense least-squares problems.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Converged when every |δp_i| < xtol·max(|p_i|, scale_i).
    pub xtol: f64,
    pub initial_lambda: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: 100,
            xtol: 1e-8,
            initial_lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: Vec<f64>,
    pub residuals: Vec<f64>,
    pub jacobian: DMatrix<f64>,
    /// Σ r²
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LmResult {
    /// Parameter covariance s²(JᵀJ)⁻¹ with s² = RSS/(n - m), or `None` if singular.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        let n = self.residuals.len();
        let m = self.params.len();
        if n <= m {
            return None;
        }
        let jtj = self.jacobian.transpose() * &self.jacobian;
        let inv = jtj.try_inverse()?;
        Some(inv * (self.rss / (n - m) as f64))
    }
}

/// Minimizes Σ r(p)² starting at `p0`.
///
/// `model(p)` returns the residual vector and its Jacobian ∂r/∂p (n × m).
/// `scale` gives the magnitude below which a parameter step is judged in
/// absolute rather than relative terms.
pub fn levenberg_marquardt<F>(p0: &[f64], scale: &[f64], opts: LmOptions, model: F) -> LmResult
where
    F: Fn(&[f64]) -> (Vec<f64>, DMatrix<f64>),
{
    let m = p0.len();
    let mut p = p0.to_vec();
    let (mut r, mut j) = model(&p);
    let mut rss: f64 = r.iter().map(|x| x * x).sum();
    let mut lambda = opts.initial_lambda;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let jt = j.transpose();
        let a = &jt * &j;
        let g = &jt * DVector::from_column_slice(&r);
        let dmax = (0..m).map(|i| a[(i, i)]).fold(0.0, f64::max);
        let mut accepted = false;
        let mut tiny_step = false;
        while lambda < 1e16 {
            let mut damped = a.clone();
            for i in 0..m {
                damped[(i, i)] += lambda * a[(i, i)].max(1e-12 * dmax).max(f64::MIN_POSITIVE);
            }
            let Some(delta) = damped.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 4.0;
                continue;
            };
            tiny_step = (0..m).all(|i| delta[i].abs() < opts.xtol * p[i].abs().max(scale[i]));
            let trial: Vec<f64> = (0..m).map(|i| p[i] + delta[i]).collect();
            let (rt, jtr) = model(&trial);
            let rss_t: f64 = rt.iter().map(|x| x * x).sum();
            if rss_t.is_finite() && rss_t <= rss {
                p = trial;
                r = rt;
                j = jtr;
                rss = rss_t;
                lambda = (lambda / 3.0).max(1e-15);
                accepted = true;
                break;
            }
            if tiny_step {
                break;
            }
            lambda *= 4.0;
        }
        if tiny_step {
            converged = true;
            break;
        }
        if !accepted {
            break;
        }
    }
    LmResult {
        params: p,
        residuals: r,
        jacobian: j,
        rss,
        iterations,
        converged,
    }
}

/// First time `y` falls to `level`·y[0], linearly interpolated.
pub fn first_crossing(t: &[f64], y: &[f64], level: f64) -> Option<f64> {
    let y0 = *y.first()?;
    let target = level * y0;
    for k in 1..y.len() {
        if y[k] <= target && y[k - 1] > target {
            let f = (y[k - 1] - target) / (y[k - 1] - y[k]);
            return Some(t[k - 1] + f * (t[k] - t[k - 1]));
        }
    }
    None
}

/// Least-squares fit of A·e^{-t/τ}; returns (A, τ).
pub fn fit_exponential(t: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let tau0 = first_crossing(t, y, (-1.0f64).exp()).unwrap_or(*t.last()?).max(1e-6);
    let res = levenberg_marquardt(&[y[0].max(1e-6), tau0], &[1.0, tau0], LmOptions::default(), |p| {
        let mut r = Vec::with_capacity(t.len());
        let mut j = DMatrix::zeros(t.len(), 2);
        for (k, (&tk, &yk)) in t.iter().zip(y).enumerate() {
            let e = (-tk / p[1]).exp();
            r.push(p[0] * e - yk);
            j[(k, 0)] = e;
            j[(k, 1)] = p[0] * e * tk / (p[1] * p[1]);
        }
        (r, j)
    });
    (res.params[1] > 0.0 && res.params[1].is_finite()).then_some((res.params[0], res.params[1]))
}
