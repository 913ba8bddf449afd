//! BFGS minimization with Armijo backtracking.

#[derive(Clone, Copy, Debug)]
pub(crate) struct BfgsOptions {
    /// Convergence when the gradient max-norm falls to this value.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Largest change of any coordinate in one step.
    pub max_step: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    #[cfg_attr(not(test), allow(dead_code))]
    pub trace: Vec<f64>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimize `f`. The callback writes the gradient and returns the value, or
/// `None` where the objective cannot be evaluated (treated as `+∞`).
pub(crate) fn minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Option<BfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> Option<f64>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g).filter(|v| v.is_finite())?;
    if g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut h = identity(n);
    let mut fresh = true;
    let mut trace = vec![fx];
    let mut iterations = 0;
    let mut gn = vec![0.0; n];
    let mut xn = vec![0.0; n];

    while iterations < opts.max_iterations {
        if max_abs(&g) <= opts.tolerance {
            return Some(BfgsResult { x, f: fx, grad: g, iterations, converged: true, trace });
        }
        let mut p: Vec<f64> = (0..n).map(|i| -(0..n).map(|j| h[i * n + j] * g[j]).sum::<f64>()).collect();
        let mut slope: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            h = identity(n);
            fresh = true;
            p = g.iter().map(|v| -v).collect();
            slope = -g.iter().map(|v| v * v).sum::<f64>();
        }
        let longest = max_abs(&p);
        let mut t = if longest > opts.max_step { opts.max_step / longest } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..n {
                xn[i] = x[i] + t * p[i];
            }
            if let Some(v) = f(&xn, &mut gn) {
                if v.is_finite() && v <= fx + 1e-4 * t * slope && gn.iter().all(|x| x.is_finite()) {
                    accepted = Some(v);
                    break;
                }
            }
            t *= 0.5;
        }
        let Some(fnew) = accepted else {
            if fresh {
                break;
            }
            // Restart from steepest descent once before giving up.
            h = identity(n);
            fresh = true;
            continue;
        };
        iterations += 1;
        let s: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| gn[i] - g[i]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 * max_abs(&s) * max_abs(&y) && sy > 0.0 {
            if fresh {
                let yy: f64 = y.iter().map(|v| v * v).sum();
                let scale = sy / yy;
                h.iter_mut().for_each(|v| *v *= scale);
                fresh = false;
            }
            // H ← (I − ρ s y') H (I − ρ y s') + ρ s s'
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        x.copy_from_slice(&xn);
        g.copy_from_slice(&gn);
        fx = fnew;
        trace.push(fx);
    }
    let converged = max_abs(&g) <= opts.tolerance;
    Some(BfgsResult { x, f: fx, grad: g, iterations, converged, trace })
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}
