//! Marker trajectories, the current-value hazard and its integral.
//!
//! Under the current-value association with linear-in-time designs the log
//! hazard on baseline piece `j` is `log λ0_j + A + C u`, so every piece of the
//! cumulative hazard is an exponential-of-linear integral with a closed form.

use super::params::ParameterVector;
use super::spec::{ResolvedModel, ResolvedTerm};
use crate::dataset::{LongitudinalObservation, MarkerFamily};
use crate::error::ModelError;

/// `J_n = ∫_0^Δ v^n e^{C v} dv` for `n = 0, 1, 2`.
fn shifted_moments(c: f64, delta: f64) -> [f64; 3] {
    let x = c * delta;
    if x.abs() < 0.5 {
        // Series in C: J_n = Σ_m C^m Δ^{n+m+1} / (m! (n+m+1)).
        let mut out = [0.0; 3];
        for (n, o) in out.iter_mut().enumerate() {
            let mut term = delta.powi(n as i32 + 1);
            let mut sum = term / (n as f64 + 1.0);
            for m in 1..40 {
                term *= x / m as f64;
                let add = term / (n + m + 1) as f64;
                sum += add;
                if add.abs() <= 1e-17 * sum.abs() {
                    break;
                }
            }
            *o = sum;
        }
        out
    } else {
        let ex = x.exp();
        let j0 = x.exp_m1() / c;
        let j1 = (delta * ex - j0) / c;
        let j2 = (delta * delta * ex - 2.0 * j1) / c;
        [j0, j1, j2]
    }
}

/// `K_n = ∫_l^r u^n e^{A + C u} du` for `n = 0, 1, 2`.
pub(crate) fn exp_linear_moments(a: f64, c: f64, l: f64, r: f64) -> [f64; 3] {
    let [j0, j1, j2] = shifted_moments(c, r - l);
    let e = (a + c * l).exp();
    [e * j0, e * (l * j0 + j1), e * (l * l * j0 + 2.0 * l * j1 + j2)]
}

/// Weighted sums over pieces of `λ0_j K_n` on `[0, t]`: `S0 = Λ(t)`,
/// `S1 = ∂Λ/∂C`, `S2 = ∂²Λ/∂C²`. When `per_piece` is given it receives
/// each piece's contribution to `Λ(t)`.
pub(crate) fn cumulative_moments(
    knots: &[f64],
    baseline: &[f64],
    a: f64,
    c: f64,
    t: f64,
    order: usize,
    mut per_piece: Option<&mut [f64]>,
) -> [f64; 3] {
    let mut s = [0.0; 3];
    let mut lower = 0.0;
    let last = knots.len() - 1;
    for (j, (&knot, &lam)) in knots.iter().zip(baseline).enumerate() {
        if lower >= t {
            break;
        }
        let upper = if j == last { t } else { knot.min(t) };
        let k = if order == 0 {
            [(a + c * lower).exp() * shifted_moments_0(c, upper - lower), 0.0, 0.0]
        } else {
            exp_linear_moments(a, c, lower, upper)
        };
        s[0] += lam * k[0];
        s[1] += lam * k[1];
        s[2] += lam * k[2];
        if let Some(pp) = per_piece.as_deref_mut() {
            pp[j] = lam * k[0];
        }
        lower = knot;
    }
    s
}

/// `∫_l^r λ0(u) e^{A + C u} du` over the baseline pieces.
pub(crate) fn interval_cumhaz(knots: &[f64], baseline: &[f64], a: f64, c: f64, l: f64, r: f64) -> f64 {
    let mut total = 0.0;
    let mut lower: f64 = 0.0;
    let last = knots.len() - 1;
    for (j, (&knot, &lam)) in knots.iter().zip(baseline).enumerate() {
        let upper = if j == last { f64::INFINITY } else { knot };
        let lo = lower.max(l);
        let hi = upper.min(r);
        if hi > lo {
            total += lam * (a + c * lo).exp() * shifted_moments_0(c, hi - lo);
        }
        lower = knot;
        if lower >= r {
            break;
        }
    }
    total
}

/// `∫_0^Δ e^{C v} dv`, stable for small `C Δ`.
#[inline]
fn shifted_moments_0(c: f64, delta: f64) -> f64 {
    let x = c * delta;
    if x.abs() < 1e-8 {
        delta * (1.0 + 0.5 * x)
    } else {
        x.exp_m1() / c
    }
}

/// Index of the baseline piece active at time `t` (the last piece extends
/// beyond the last knot).
pub(crate) fn piece_index(knots: &[f64], t: f64) -> usize {
    knots.iter().position(|&k| t <= k).unwrap_or(knots.len() - 1)
}

fn check_b(model: &ResolvedModel, b: &[f64]) -> Result<(), ModelError> {
    if b.len() != model.re_dim {
        return Err(ModelError::DimensionMismatch { expected: model.re_dim, got: b.len() });
    }
    Ok(())
}

/// Intercept and slope of `m_k(u) = a + c u` for marker slot `k`.
pub(crate) fn marker_line(
    model: &ResolvedModel,
    p: &ParameterVector,
    k: usize,
    b: &[f64],
    covariates: &[f64],
) -> (f64, f64) {
    let m = &model.markers[k];
    let (mut a, mut c) = m.fixed_intercept_slope(&p.markers[k].beta, covariates);
    if let Some(i) = m.re_intercept {
        a += b[i];
    }
    if let Some(i) = m.re_time {
        c += b[i];
    }
    (a, c)
}

/// Coefficients `(A, C)` of the log relative hazard `A + C u`.
pub(crate) fn hazard_line(model: &ResolvedModel, p: &ParameterVector, b: &[f64], covariates: &[f64]) -> (f64, f64) {
    let mut a: f64 = model.survival_covariates.iter().zip(&p.gamma).map(|(&i, g)| g * covariates[i]).sum();
    let mut c = 0.0;
    for (k, alpha) in p.alpha.iter().enumerate() {
        let (ak, ck) = marker_line(model, p, k, b, covariates);
        a += alpha * ak;
        c += alpha * ck;
    }
    (a, c)
}

/// `m_k(t) = W(t)'β_k + Z(t)'b_k` for marker slot `marker`. For binary markers
/// this is the logit of the success probability.
pub fn linear_predictor(
    model: &ResolvedModel,
    params: &ParameterVector,
    b: &[f64],
    marker: usize,
    covariates: &[f64],
    t: f64,
) -> Result<f64, ModelError> {
    check_b(model, b)?;
    let m = model
        .markers
        .get(marker)
        .ok_or_else(|| ModelError::InvalidSpec(format!("model has no marker slot {marker}")))?;
    let mut eta = 0.0;
    for (term, beta) in m.fixed.iter().zip(&params.markers[marker].beta) {
        eta += beta
            * match term {
                ResolvedTerm::Intercept => 1.0,
                ResolvedTerm::Time => t,
                ResolvedTerm::Covariate(i) => covariates[*i],
            };
    }
    for (j, term) in m.random.iter().enumerate() {
        let z = if matches!(term, ResolvedTerm::Time) { t } else { 1.0 };
        eta += z * b[m.re_offset + j];
    }
    Ok(eta)
}

/// `Σ_j log f(Y_j | b)` over the given observations of one marker.
pub fn marker_loglik(
    model: &ResolvedModel,
    params: &ParameterVector,
    b: &[f64],
    marker: usize,
    covariates: &[f64],
    observations: &[LongitudinalObservation],
) -> Result<f64, ModelError> {
    let mut ll = 0.0;
    for o in observations {
        let eta = linear_predictor(model, params, b, marker, covariates, o.time)?;
        ll += match model.markers[marker].family {
            MarkerFamily::Gaussian => {
                let v = params.markers[marker].variance.unwrap_or(1.0);
                let r = o.value - eta;
                -0.5 * (2.0 * std::f64::consts::PI * v).ln() - r * r / (2.0 * v)
            }
            MarkerFamily::Binary => o.value * eta - softplus(eta),
        };
    }
    Ok(ll)
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `λ(t | b) = λ0(t) exp(x'γ + Σ_k α_k m_k(t))`.
pub fn hazard(
    model: &ResolvedModel,
    params: &ParameterVector,
    b: &[f64],
    covariates: &[f64],
    t: f64,
) -> Result<f64, ModelError> {
    check_b(model, b)?;
    let (a, c) = hazard_line(model, params, b, covariates);
    Ok(params.baseline[piece_index(&model.knots, t)] * (a + c * t).exp())
}

/// `Λ(t | b) = ∫_0^t λ(u | b) du`, summed piece by piece in closed form.
pub fn cumulative_hazard(
    model: &ResolvedModel,
    params: &ParameterVector,
    b: &[f64],
    covariates: &[f64],
    t: f64,
) -> Result<f64, ModelError> {
    check_b(model, b)?;
    if t <= 0.0 {
        return Ok(0.0);
    }
    let (a, c) = hazard_line(model, params, b, covariates);
    Ok(cumulative_moments(&model.knots, &params.baseline, a, c, t, 0, None)[0])
}
