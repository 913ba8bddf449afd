//! Per-subject integrand `h(b) = log L_Y(b) + δ log λ(T|b) − Λ(T|b) + log φ(b)`
//! with its derivatives in `b`, the adaptive quadrature around its mode, and
//! the parameter gradient of the integrated likelihood.
//!
//! Gaussian markers are reduced to sufficient statistics once per subject, so
//! evaluating their contribution at a quadrature node costs `O(q²)` whatever
//! the number of measurements.

use std::f64::consts::{LN_2, PI};

use super::hazard::{cumulative_moments, piece_index, softplus};
use super::params::{packed, ParameterLayout, ParameterVector};
use super::quadrature::TensorGrid;
use super::spec::{ResolvedModel, ResolvedTerm};
use crate::dataset::{LongitudinalObservation, MarkerFamily, SubjectId};
use crate::linalg::{at, back_sub_t, chol_inverse, cholesky, forward_sub, log_det_chol, Mat6, Vec6, MAX_RE};

#[derive(Clone, Debug)]
pub(crate) struct GaussStats {
    n: usize,
    p: usize,
    q: usize,
    wtw: Vec<f64>,
    wtz: Vec<f64>,
    ztz: [f64; 4],
    wty: Vec<f64>,
    zty: [f64; 2],
    yty: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct BinaryRows {
    p: usize,
    q: usize,
    w: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) enum MarkerData {
    Gaussian(GaussStats),
    Binary(BinaryRows),
}

/// Data of one subject reduced to what the integrand needs. `time` and
/// `event` are `(T*, δ)` for likelihood work and `(s, false)` for prediction.
#[derive(Clone, Debug)]
pub(crate) struct SubjectData {
    pub id: SubjectId,
    pub time: f64,
    pub event: bool,
    pub piece: usize,
    pub covariates: Vec<f64>,
    markers: Vec<MarkerData>,
}

impl SubjectData {
    pub fn new(
        model: &ResolvedModel,
        id: SubjectId,
        time: f64,
        event: bool,
        covariates: &[f64],
        observations: &[LongitudinalObservation],
    ) -> Self {
        let markers = model
            .markers
            .iter()
            .map(|m| {
                let p = m.n_fixed();
                let q = m.n_random();
                let mut wrow = vec![0.0; p];
                let mut zrow = [0.0; 2];
                let rows = observations.iter().filter(|o| o.marker == m.index);
                match m.family {
                    MarkerFamily::Gaussian => {
                        let mut s = GaussStats {
                            n: 0,
                            p,
                            q,
                            wtw: vec![0.0; p * p],
                            wtz: vec![0.0; p * q],
                            ztz: [0.0; 4],
                            wty: vec![0.0; p],
                            zty: [0.0; 2],
                            yty: 0.0,
                        };
                        for o in rows {
                            m.fixed_row(covariates, o.time, &mut wrow);
                            m.random_row(o.time, &mut zrow[..q]);
                            s.n += 1;
                            for i in 0..p {
                                for j in 0..p {
                                    s.wtw[i * p + j] += wrow[i] * wrow[j];
                                }
                                for j in 0..q {
                                    s.wtz[i * q + j] += wrow[i] * zrow[j];
                                }
                                s.wty[i] += wrow[i] * o.value;
                            }
                            for i in 0..q {
                                for j in 0..q {
                                    s.ztz[i * 2 + j] += zrow[i] * zrow[j];
                                }
                                s.zty[i] += zrow[i] * o.value;
                            }
                            s.yty += o.value * o.value;
                        }
                        MarkerData::Gaussian(s)
                    }
                    MarkerFamily::Binary => {
                        let mut r = BinaryRows { p, q, w: Vec::new(), z: Vec::new(), y: Vec::new() };
                        for o in rows {
                            m.fixed_row(covariates, o.time, &mut wrow);
                            m.random_row(o.time, &mut zrow[..q]);
                            r.w.extend_from_slice(&wrow);
                            r.z.extend_from_slice(&zrow);
                            r.y.push(o.value);
                        }
                        MarkerData::Binary(r)
                    }
                }
            })
            .collect();
        Self { id, time, event, piece: piece_index(&model.knots, time), covariates: covariates.to_vec(), markers }
    }
}

/// Parameter-dependent quantities shared by all subjects.
pub(crate) struct ParamCache<'a> {
    pub model: &'a ResolvedModel,
    pub params: &'a ParameterVector,
    pub d: usize,
    l: Mat6,
    binv: Mat6,
    prior_const: f64,
    alpha_int: Vec6,
    alpha_time: Vec6,
    log_baseline: Vec<f64>,
}

impl<'a> ParamCache<'a> {
    pub fn new(model: &'a ResolvedModel, params: &'a ParameterVector) -> Self {
        let d = model.re_dim;
        let l = params.cholesky_mat();
        let binv = chol_inverse(&l, d);
        let mut alpha_int = [0.0; MAX_RE];
        let mut alpha_time = [0.0; MAX_RE];
        for (m, a) in model.markers.iter().zip(&params.alpha) {
            if let Some(i) = m.re_intercept {
                alpha_int[i] = *a;
            }
            if let Some(i) = m.re_time {
                alpha_time[i] = *a;
            }
        }
        Self {
            model,
            params,
            d,
            l,
            binv,
            prior_const: -0.5 * d as f64 * (2.0 * PI).ln() - log_det_chol(&l, d),
            alpha_int,
            alpha_time,
            log_baseline: params.baseline.iter().map(|v| v.ln()).collect(),
        }
    }
}

enum MarkerTerms {
    Gaussian { off: usize, q: usize, ll_const: f64, inv_var: f64, rr: f64, ztr: [f64; 2] },
    Binary { off: usize, eta0: Vec<f64> },
}

/// Mode of the integrand with the Cholesky factor of its negative Hessian.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mode {
    pub b: Vec6,
    pub chol: Mat6,
}

#[derive(Default)]
pub(crate) struct Scratch {
    nodes: Vec<Vec6>,
    vals: Vec<f64>,
    lam: Vec<f64>,
}

/// The integrand of one subject under fixed parameters.
pub(crate) struct SubjectEval<'a> {
    cache: &'a ParamCache<'a>,
    subj: &'a SubjectData,
    a0: f64,
    c0: f64,
    markers: Vec<MarkerTerms>,
}

#[inline]
fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &Vec6, b: &Vec6, d: usize) -> f64 {
    (0..d).map(|i| a[i] * b[i]).sum()
}

impl<'a> SubjectEval<'a> {
    pub fn new(cache: &'a ParamCache<'a>, subj: &'a SubjectData) -> Self {
        let model = cache.model;
        let params = cache.params;
        let mut a0: f64 =
            model.survival_covariates.iter().zip(&params.gamma).map(|(&i, g)| g * subj.covariates[i]).sum();
        let mut c0 = 0.0;
        let mut markers = Vec::with_capacity(model.markers.len());
        for (k, (m, data)) in model.markers.iter().zip(&subj.markers).enumerate() {
            let beta = &params.markers[k].beta;
            let (af, cf) = m.fixed_intercept_slope(beta, &subj.covariates);
            a0 += params.alpha[k] * af;
            c0 += params.alpha[k] * cf;
            markers.push(match data {
                MarkerData::Gaussian(s) => {
                    let var = params.markers[k].variance.unwrap_or(1.0);
                    let p = s.p;
                    let mut bwwb = 0.0;
                    let mut bwy = 0.0;
                    for i in 0..p {
                        bwy += beta[i] * s.wty[i];
                        for j in 0..p {
                            bwwb += beta[i] * s.wtw[i * p + j] * beta[j];
                        }
                    }
                    let mut ztr = [0.0; 2];
                    for j in 0..s.q {
                        ztr[j] = s.zty[j] - (0..p).map(|i| s.wtz[i * s.q + j] * beta[i]).sum::<f64>();
                    }
                    MarkerTerms::Gaussian {
                        off: m.re_offset,
                        q: s.q,
                        ll_const: -0.5 * s.n as f64 * (2.0 * PI * var).ln(),
                        inv_var: 1.0 / var,
                        rr: (s.yty - 2.0 * bwy + bwwb).max(0.0),
                        ztr,
                    }
                }
                MarkerData::Binary(r) => MarkerTerms::Binary {
                    off: m.re_offset,
                    eta0: r
                        .w
                        .chunks_exact(r.p.max(1))
                        .take(r.y.len())
                        .map(|w| w.iter().zip(beta).map(|(a, b)| a * b).sum())
                        .collect(),
                },
            });
        }
        Self { cache, subj, a0, c0, markers }
    }

    fn line(&self, b: &Vec6) -> (f64, f64) {
        let d = self.cache.d;
        (self.a0 + dot(&self.cache.alpha_int, b, d), self.c0 + dot(&self.cache.alpha_time, b, d))
    }

    fn prior(&self, b: &Vec6) -> f64 {
        let u = forward_sub(&self.cache.l, self.cache.d, b);
        self.cache.prior_const - 0.5 * dot(&u, &u, self.cache.d)
    }

    /// `h(b)`.
    pub fn value(&self, b: &Vec6) -> f64 {
        let mut h = self.prior(b);
        for (mt, data) in self.markers.iter().zip(&self.subj.markers) {
            match (mt, data) {
                (MarkerTerms::Gaussian { off, q, ll_const, inv_var, rr, ztr }, MarkerData::Gaussian(s)) => {
                    let bk = &b[*off..*off + *q];
                    let mut rss = *rr;
                    for i in 0..*q {
                        rss -= 2.0 * bk[i] * ztr[i];
                        for j in 0..*q {
                            rss += bk[i] * s.ztz[i * 2 + j] * bk[j];
                        }
                    }
                    h += ll_const - 0.5 * inv_var * rss;
                }
                (MarkerTerms::Binary { off, eta0 }, MarkerData::Binary(r)) => {
                    let bk = &b[*off..*off + r.q];
                    for (j, (&e0, &y)) in eta0.iter().zip(&r.y).enumerate() {
                        let z = &r.z[j * 2..j * 2 + r.q];
                        let eta = e0 + z.iter().zip(bk).map(|(z, b)| z * b).sum::<f64>();
                        h += y * eta - softplus(eta);
                    }
                }
                _ => unreachable!("marker terms and data are built from the same model"),
            }
        }
        let (a, c) = self.line(b);
        let t = self.subj.time;
        if self.subj.event {
            h += self.cache.log_baseline[self.subj.piece] + a + c * t;
        }
        h - cumulative_moments(&self.cache.model.knots, &self.cache.params.baseline, a, c, t, 0, None)[0]
    }

    /// `h(b)` with gradient and Hessian in `b`.
    pub fn value_grad_hess(&self, b: &Vec6, g: &mut Vec6, hess: &mut Mat6) -> f64 {
        let d = self.cache.d;
        *g = [0.0; MAX_RE];
        *hess = [0.0; MAX_RE * MAX_RE];
        let mut h = self.prior(b);
        for i in 0..d {
            for j in 0..d {
                g[i] -= self.cache.binv[at(i, j)] * b[j];
                hess[at(i, j)] = -self.cache.binv[at(i, j)];
            }
        }
        for (mt, data) in self.markers.iter().zip(&self.subj.markers) {
            match (mt, data) {
                (MarkerTerms::Gaussian { off, q, ll_const, inv_var, rr, ztr }, MarkerData::Gaussian(s)) => {
                    let o = *off;
                    let mut rss = *rr;
                    for i in 0..*q {
                        rss -= 2.0 * b[o + i] * ztr[i];
                        let mut zb = 0.0;
                        for j in 0..*q {
                            zb += s.ztz[i * 2 + j] * b[o + j];
                            hess[at(o + i, o + j)] -= inv_var * s.ztz[i * 2 + j];
                        }
                        rss += b[o + i] * zb;
                        g[o + i] += inv_var * (ztr[i] - zb);
                    }
                    h += ll_const - 0.5 * inv_var * rss;
                }
                (MarkerTerms::Binary { off, eta0 }, MarkerData::Binary(r)) => {
                    let o = *off;
                    for (j, (&e0, &y)) in eta0.iter().zip(&r.y).enumerate() {
                        let z = &r.z[j * 2..j * 2 + r.q];
                        let eta = e0 + (0..r.q).map(|i| z[i] * b[o + i]).sum::<f64>();
                        h += y * eta - softplus(eta);
                        let p = expit(eta);
                        let w = p * (1.0 - p);
                        for i in 0..r.q {
                            g[o + i] += (y - p) * z[i];
                            for k in 0..r.q {
                                hess[at(o + i, o + k)] -= w * z[i] * z[k];
                            }
                        }
                    }
                }
                _ => unreachable!("marker terms and data are built from the same model"),
            }
        }
        let (a, c) = self.line(b);
        let t = self.subj.time;
        let ai = &self.cache.alpha_int;
        let at_ = &self.cache.alpha_time;
        let [s0, s1, s2] = cumulative_moments(&self.cache.model.knots, &self.cache.params.baseline, a, c, t, 2, None);
        let ev = if self.subj.event { 1.0 } else { 0.0 };
        if self.subj.event {
            h += self.cache.log_baseline[self.subj.piece] + a + c * t;
        }
        h -= s0;
        for i in 0..d {
            g[i] += ev * (ai[i] + at_[i] * t) - (ai[i] * s0 + at_[i] * s1);
            for j in 0..d {
                hess[at(i, j)] -= ai[i] * ai[j] * s0 + (ai[i] * at_[j] + at_[i] * ai[j]) * s1 + at_[i] * at_[j] * s2;
            }
        }
        h
    }

    /// Newton ascent to the mode of `h`, from `start`.
    pub fn mode(&self, start: &Vec6) -> Option<Mode> {
        let d = self.cache.d;
        let mut b = *start;
        let mut g = [0.0; MAX_RE];
        let mut hess = [0.0; MAX_RE * MAX_RE];
        let mut f = self.value_grad_hess(&b, &mut g, &mut hess);
        if !f.is_finite() {
            b = [0.0; MAX_RE];
            f = self.value_grad_hess(&b, &mut g, &mut hess);
            if !f.is_finite() {
                return None;
            }
        }
        let mut polished = false;
        for _ in 0..200 {
            let mut neg = [0.0; MAX_RE * MAX_RE];
            for i in 0..d * MAX_RE {
                neg[i] = -hess[i];
            }
            let chol = cholesky(&neg, d)?;
            let scale = f.abs().max(1.0);
            let step = back_sub_t(&chol, d, &forward_sub(&chol, d, &g));
            let dec = dot(&g, &step, d);
            if polished || dec <= 1e-18 * scale {
                return Some(Mode { b, chol });
            }
            if dec <= 1e-10 * scale {
                // Inside the quadratic region the ascent is below rounding in
                // `h`, so the line search cannot judge it: take one full step.
                polished = true;
                let mut nb = b;
                for i in 0..d {
                    nb[i] += step[i];
                }
                let mut ng = [0.0; MAX_RE];
                let mut nh = [0.0; MAX_RE * MAX_RE];
                let nf = self.value_grad_hess(&nb, &mut ng, &mut nh);
                if nf.is_finite() && nf >= f - 1e-12 * scale {
                    b = nb;
                    g = ng;
                    hess = nh;
                    f = nf;
                }
                continue;
            }
            let mut t = 1.0;
            loop {
                let mut nb = b;
                for i in 0..d {
                    nb[i] += t * step[i];
                }
                let nf = self.value(&nb);
                if nf.is_finite() && nf >= f + 1e-4 * t * dec {
                    b = nb;
                    break;
                }
                t *= 0.5;
                if t < 1e-12 {
                    return None;
                }
            }
            f = self.value_grad_hess(&b, &mut g, &mut hess);
            if !f.is_finite() {
                return None;
            }
        }
        None
    }

    /// Log of the integral of `e^{h}` by adaptive Gauss–Hermite quadrature
    /// centred at `mode`. Node positions and log integrand values are left in
    /// `scratch` for [`Self::accumulate_gradient`].
    pub fn integrate(&self, grid: &TensorGrid, mode: &Mode, scratch: &mut Scratch) -> f64 {
        let d = self.cache.d;
        scratch.nodes.clear();
        scratch.vals.clear();
        let mut best = f64::NEG_INFINITY;
        for n in 0..grid.len() {
            let z = grid.node(n);
            let mut zz = [0.0; MAX_RE];
            for i in 0..d {
                zz[i] = std::f64::consts::SQRT_2 * z[i];
            }
            let off = back_sub_t(&mode.chol, d, &zz);
            let mut b = mode.b;
            for i in 0..d {
                b[i] += off[i];
            }
            let v = grid.log_weights[n] + self.value(&b);
            best = best.max(v);
            scratch.nodes.push(b);
            scratch.vals.push(v);
        }
        if !best.is_finite() {
            return f64::NEG_INFINITY;
        }
        let sum: f64 = scratch.vals.iter().map(|v| (v - best).exp()).sum();
        0.5 * d as f64 * LN_2 - log_det_chol(&mode.chol, d) + best + sum.ln()
    }

    /// Add this subject's contribution to `∂ℓ/∂θ` using the node weights
    /// left by [`Self::integrate`] (nodes are held fixed).
    pub fn accumulate_gradient(&self, layout: &ParameterLayout, scratch: &mut Scratch, grad: &mut [f64]) {
        let cache = self.cache;
        let model = cache.model;
        let params = cache.params;
        let d = cache.d;
        let t = self.subj.time;
        let n_pieces = model.n_pieces();
        let best = scratch.vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = scratch.vals.iter().map(|v| (v - best).exp()).sum();

        let mut eb = [0.0; MAX_RE];
        let mut ebb = [0.0; MAX_RE * MAX_RE];
        let (mut es0, mut es1) = (0.0, 0.0);
        let mut ebs0 = [0.0; MAX_RE];
        let mut ebs1 = [0.0; MAX_RE];
        scratch.lam.clear();
        scratch.lam.resize(2 * n_pieces, 0.0);
        let (elam, lam) = scratch.lam.split_at_mut(n_pieces);
        let mut binres: Vec<Vec<f64>> = self
            .subj
            .markers
            .iter()
            .map(|m| match m {
                MarkerData::Binary(r) => vec![0.0; r.p],
                MarkerData::Gaussian(_) => Vec::new(),
            })
            .collect();

        for (b, v) in scratch.nodes.iter().zip(&scratch.vals) {
            let p = (v - best).exp() / total;
            if p < 1e-15 {
                continue;
            }
            for i in 0..d {
                eb[i] += p * b[i];
                for j in 0..d {
                    ebb[at(i, j)] += p * b[i] * b[j];
                }
            }
            let (a, c) = self.line(b);
            let [s0, s1, _] = cumulative_moments(&model.knots, &params.baseline, a, c, t, 1, Some(lam));
            es0 += p * s0;
            es1 += p * s1;
            for i in 0..d {
                ebs0[i] += p * s0 * b[i];
                ebs1[i] += p * s1 * b[i];
            }
            for (e, l) in elam.iter_mut().zip(lam.iter()) {
                *e += p * l;
            }
            for ((mt, data), res) in self.markers.iter().zip(&self.subj.markers).zip(binres.iter_mut()) {
                if let (MarkerTerms::Binary { off, eta0 }, MarkerData::Binary(r)) = (mt, data) {
                    for (j, (&e0, &y)) in eta0.iter().zip(&r.y).enumerate() {
                        let z = &r.z[j * 2..j * 2 + r.q];
                        let eta = e0 + (0..r.q).map(|i| z[i] * b[off + i]).sum::<f64>();
                        let w = p * (y - expit(eta));
                        for (acc, wv) in res.iter_mut().zip(&r.w[j * r.p..(j + 1) * r.p]) {
                            *acc += w * wv;
                        }
                    }
                }
            }
        }

        let ev = if self.subj.event { 1.0 } else { 0.0 };
        let cov = &self.subj.covariates;
        for (k, m) in model.markers.iter().enumerate() {
            let beta = &params.markers[k].beta;
            let alpha = params.alpha[k];
            let br = layout.beta[k].clone();
            match (&self.markers[k], &self.subj.markers[k]) {
                (MarkerTerms::Gaussian { off, q, inv_var, rr, ztr, .. }, MarkerData::Gaussian(s)) => {
                    let (o, q, p) = (*off, *q, s.p);
                    for i in 0..p {
                        let wtr = s.wty[i] - (0..p).map(|j| s.wtw[i * p + j] * beta[j]).sum::<f64>();
                        let wtzb: f64 = (0..q).map(|j| s.wtz[i * q + j] * eb[o + j]).sum();
                        grad[br.start + i] += inv_var * (wtr - wtzb);
                    }
                    let mut erss = *rr;
                    for i in 0..q {
                        erss -= 2.0 * eb[o + i] * ztr[i];
                        for j in 0..q {
                            erss += s.ztz[i * 2 + j] * ebb[at(o + j, o + i)];
                        }
                    }
                    if let Some(iv) = layout.log_variance[k] {
                        grad[iv] += -0.5 * s.n as f64 + 0.5 * inv_var * erss;
                    }
                }
                (MarkerTerms::Binary { .. }, MarkerData::Binary(_)) => {
                    for (i, r) in binres[k].iter().enumerate() {
                        grad[br.start + i] += r;
                    }
                }
                _ => unreachable!("marker terms and data are built from the same model"),
            }
            // Survival part through m_k(u).
            for (i, term) in m.fixed.iter().enumerate() {
                grad[br.start + i] += alpha
                    * match term {
                        ResolvedTerm::Intercept => ev - es0,
                        ResolvedTerm::Covariate(c) => cov[*c] * (ev - es0),
                        ResolvedTerm::Time => ev * t - es1,
                    };
            }
            let (af, cf) = m.fixed_intercept_slope(beta, cov);
            let (mut ea, mut eas0) = (af, af * es0);
            let (mut ec, mut ecs1) = (cf, cf * es1);
            if let Some(i) = m.re_intercept {
                ea += eb[i];
                eas0 += ebs0[i];
            }
            if let Some(i) = m.re_time {
                ec += eb[i];
                ecs1 += ebs1[i];
            }
            grad[layout.alpha.start + k] += ev * (ea + ec * t) - eas0 - ecs1;
        }
        for (gi, &c) in layout.gamma.clone().zip(&model.survival_covariates) {
            grad[gi] += cov[c] * (ev - es0);
        }
        for (j, li) in layout.log_baseline.clone().enumerate() {
            grad[li] += if j == self.subj.piece { ev } else { 0.0 } - elam[j];
        }
        // Prior: ∂/∂L = tril(B⁻¹ E[bb'] L^{-T}) − diag(1/L_ii).
        if d > 0 {
            let mut m = [0.0; MAX_RE * MAX_RE];
            for i in 0..d {
                for j in 0..d {
                    m[at(i, j)] = (0..d).map(|k| cache.binv[at(i, k)] * ebb[at(k, j)]).sum();
                }
            }
            for i in 0..d {
                // Row i of M L^{-T} is L^{-1} applied to row i of M.
                let mut row = [0.0; MAX_RE];
                row[..d].copy_from_slice(&m[at(i, 0)..at(i, 0) + d]);
                let x = forward_sub(&cache.l, d, &row);
                for j in 0..=i {
                    let idx = layout.cholesky.start + packed(i, j);
                    if i == j {
                        let lii = cache.l[at(i, i)];
                        grad[idx] += (x[j] - 1.0 / lii) * lii;
                    } else {
                        grad[idx] += x[j];
                    }
                }
            }
        }
    }
}
