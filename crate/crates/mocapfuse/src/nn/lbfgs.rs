//! Limited-memory BFGS with Armijo backtracking.
//!
//! Used both for the per-frame pose refinement (a single iteration per call)
//! and as a generic minimizer in tests.

/// Outcome of a minimization run.
#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub point: Vec<f64>,
    pub value: f64,
    /// Iterations that actually moved the point.
    pub iterations: usize,
    /// Set when backtracking exhausted its budget; the point returned is the
    /// best one seen, which for a first-iteration failure is the input.
    pub line_search_failed: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 25;
const GRAD_TOL: f64 = 1e-12;
const CURVATURE_TOL: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `objective` (value and gradient) starting at `x0`, running at
/// most `iterations` quasi-Newton steps with a curvature history of
/// `history` pairs.
pub fn lbfgs_minimize<F>(
    mut objective: F,
    x0: &[f64],
    iterations: usize,
    history: usize,
) -> LbfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = objective(&x);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut done = 0;
    let mut failed = false;

    for iter in 0..iterations {
        let gnorm = norm(&g);
        if gnorm < GRAD_TOL {
            break;
        }

        // Two-loop recursion for d = -H g.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            alpha[i] = rho_hist[i] * dot(&s_hist[i], &d);
            for k in 0..n {
                d[k] -= alpha[i] * y_hist[i][k];
            }
        }
        if m > 0 {
            let sy = dot(&s_hist[m - 1], &y_hist[m - 1]);
            let yy = dot(&y_hist[m - 1], &y_hist[m - 1]);
            if yy > 0.0 {
                let gamma = sy / yy;
                for v in d.iter_mut() {
                    *v *= gamma;
                }
            }
        }
        for i in 0..m {
            let beta = rho_hist[i] * dot(&y_hist[i], &d);
            for k in 0..n {
                d[k] += (alpha[i] - beta) * s_hist[i][k];
            }
        }

        let mut dg = dot(&d, &g);
        if dg >= 0.0 {
            // History produced a non-descent direction; fall back to steepest.
            d = g.iter().map(|v| -v).collect();
            dg = -dot(&g, &g);
        }

        let mut t = if iter == 0 && m == 0 {
            1.0 / gnorm.max(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            let (ft, gt) = objective(&xt);
            if ft.is_finite() && ft <= fx + ARMIJO_C1 * t * dg {
                accepted = Some((xt, ft, gt));
                break;
            }
            t *= 0.5;
        }

        let Some((xn, fn_, gn)) = accepted else {
            failed = true;
            break;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > CURVATURE_TOL * norm(&s) * norm(&y) {
            if s_hist.len() == history {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            rho_hist.push(1.0 / sy);
            s_hist.push(s);
            y_hist.push(y);
        }
        x = xn;
        fx = fn_;
        g = gn;
        done = iter + 1;
    }

    LbfgsResult {
        point: x,
        value: fx,
        iterations: done,
        line_search_failed: failed,
    }
}
