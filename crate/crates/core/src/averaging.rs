//! Model averaging of individual risk predictions.
//!
//! The weights minimize the IPCW Brier score of the averaged prediction over
//! the probability simplex. That objective is the convex quadratic
//! `w'Qw − 2c'w + const`; it is solved by accelerated projected gradient and
//! then polished by a primal active-set method on the resulting support, so
//! the returned point satisfies the optimality conditions to rounding error.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SubjectId};
use crate::error::{Error, MetricError};
use crate::joint_model::FittedJointModel;
use crate::metrics::RiskSetFrame;
use crate::prediction::{PredictOptions, Predictor};

/// Predictions `π_ik(s,t)` of every candidate model `k` for every subject `i`
/// at risk at `s`, with their Monte Carlo draw variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub landmark: f64,
    pub window: f64,
    pub subjects: Vec<SubjectId>,
    pub model_ids: Vec<String>,
    /// Row-major `subjects × models`.
    pub values: Vec<f64>,
    pub variances: Vec<f64>,
}

impl PredictionMatrix {
    /// Assemble from per-model columns.
    pub fn from_columns(
        landmark: f64,
        window: f64,
        subjects: Vec<SubjectId>,
        model_ids: Vec<String>,
        columns: &[Vec<f64>],
        variances: &[Vec<f64>],
    ) -> Result<Self, MetricError> {
        let n = subjects.len();
        let k = model_ids.len();
        if n == 0 || k == 0 {
            return Err(MetricError::EmptyMatrix);
        }
        if columns.len() != k || variances.len() != k {
            return Err(MetricError::LengthMismatch(columns.len(), k));
        }
        let mut values = vec![0.0; n * k];
        let mut vars = vec![0.0; n * k];
        for (j, (col, var)) in columns.iter().zip(variances).enumerate() {
            if col.len() != n || var.len() != n {
                return Err(MetricError::LengthMismatch(col.len(), n));
            }
            for i in 0..n {
                values[i * k + j] = col[i].clamp(0.0, 1.0);
                vars[i * k + j] = var[i];
            }
        }
        Ok(Self { landmark, window, subjects, model_ids, values, variances: vars })
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_models(&self) -> usize {
        self.model_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.n_models();
        &self.values[i * k..(i + 1) * k]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_subjects()).map(|i| self.row(i)[j]).collect()
    }

    fn check_frame(&self, frame: &RiskSetFrame) -> Result<(), MetricError> {
        if frame.subjects != self.subjects {
            return Err(MetricError::LengthMismatch(self.n_subjects(), frame.n_at_risk()));
        }
        Ok(())
    }
}

/// One column per model for every subject of `dataset` at risk at `s`.
pub fn build_prediction_matrix(
    models: &[FittedJointModel],
    dataset: &Dataset,
    s: f64,
    t: f64,
    options: &PredictOptions,
) -> Result<PredictionMatrix, Error> {
    let subjects = dataset.at_risk(s);
    if subjects.is_empty() {
        return Err(MetricError::EmptyRiskSet(s).into());
    }
    let histories = subjects.iter().map(|&id| dataset.truncate_history(id, s)).collect::<Result<Vec<_>, _>>()?;
    let mut columns = Vec::with_capacity(models.len());
    let mut variances = Vec::with_capacity(models.len());
    for m in models {
        let predictor = Predictor::new(m, options)?;
        let mut col = Vec::with_capacity(subjects.len());
        let mut var = Vec::with_capacity(subjects.len());
        for h in &histories {
            let p = predictor.predict(h, t)?;
            col.push(p.point);
            var.push(p.draw_variance);
        }
        columns.push(col);
        variances.push(var);
    }
    let ids = models.iter().map(FittedJointModel::model_id).collect();
    Ok(PredictionMatrix::from_columns(s, t, subjects, ids, &columns, &variances)?)
}

/// `BS_w(s,t)`: the IPCW Brier score of the averaged prediction `Σ_k w_k π_ik`.
pub fn weighted_brier(matrix: &PredictionMatrix, w: &[f64], frame: &RiskSetFrame) -> Result<f64, MetricError> {
    matrix.check_frame(frame)?;
    if w.len() != matrix.n_models() {
        return Err(MetricError::LengthMismatch(w.len(), matrix.n_models()));
    }
    let mut survivors = 0.0;
    let mut events = 0.0;
    for i in 0..matrix.n_subjects() {
        let p: f64 = matrix.row(i).iter().zip(w).map(|(a, b)| a * b).sum();
        if frame.is_survivor(i) {
            survivors += p * p;
        } else if frame.event[i] {
            events += (1.0 - p) * (1.0 - p) * frame.weight[i];
        }
    }
    Ok((survivors / frame.survivor_g + events) / matrix.n_subjects() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Added to the diagonal of `Q`; selects the minimum-norm optimum when
    /// columns are collinear.
    pub ridge: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iterations: 20_000, tolerance: 1e-9, ridge: 1e-12 }
    }
}

/// `Q` (row-major, `K × K`), `c` and the constant of the weighted Brier
/// objective `w'Qw − 2c'w + const`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticObjective {
    pub k: usize,
    pub q: Vec<f64>,
    pub c: Vec<f64>,
    pub constant: f64,
}

impl QuadraticObjective {
    pub fn new(matrix: &PredictionMatrix, frame: &RiskSetFrame) -> Result<Self, MetricError> {
        matrix.check_frame(frame)?;
        if frame.weight.iter().all(|w| *w == 0.0) {
            return Err(MetricError::ZeroWeights);
        }
        let k = matrix.n_models();
        let n = matrix.n_subjects() as f64;
        let mut q = vec![0.0; k * k];
        let mut c = vec![0.0; k];
        let mut constant = 0.0;
        for i in 0..matrix.n_subjects() {
            let w = frame.weight[i];
            if w == 0.0 {
                continue;
            }
            let r = matrix.row(i);
            for a in 0..k {
                for b in 0..k {
                    q[a * k + b] += w * r[a] * r[b];
                }
            }
            if frame.event[i] {
                for a in 0..k {
                    c[a] += w * r[a];
                }
                constant += w;
            }
        }
        q.iter_mut().for_each(|v| *v /= n);
        c.iter_mut().for_each(|v| *v /= n);
        Ok(Self { k, q, c, constant: constant / n })
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        let k = self.k;
        let mut v = self.constant;
        for a in 0..k {
            let qa: f64 = (0..k).map(|b| self.q[a * k + b] * w[b]).sum();
            v += w[a] * qa - 2.0 * self.c[a] * w[a];
        }
        v
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let k = self.k;
        (0..k).map(|a| 2.0 * ((0..k).map(|b| self.q[a * k + b] * w[b]).sum::<f64>() - self.c[a])).collect()
    }

    /// Largest violation of the simplex optimality conditions at `w`, with the
    /// multiplier estimated as `μ = w'∇f`: `|∂_k f − μ|` on the support and
    /// `(μ − ∂_k f)₊` off it.
    pub fn kkt_residual(&self, w: &[f64]) -> f64 {
        let g = self.gradient(w);
        let mu: f64 = g.iter().zip(w).map(|(a, b)| a * b).sum();
        g.iter().zip(w).map(|(gk, wk)| if *wk > 0.0 { (gk - mu).abs() } else { (mu - gk).max(0.0) }).fold(0.0, f64::max)
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (j + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Minimize `w'Qw − 2c'w` over the simplex.
pub fn solve_simplex_qp(obj: &QuadraticObjective, options: &SolverOptions) -> (Vec<f64>, usize) {
    let k = obj.k;
    let mut ridged = obj.clone();
    for a in 0..k {
        ridged.q[a * k + a] += options.ridge;
    }
    if k == 1 {
        return (vec![1.0], 0);
    }
    // Lipschitz bound of the gradient from the max absolute row sum.
    let lip =
        2.0 * (0..k).map(|a| (0..k).map(|b| ridged.q[a * k + b].abs()).sum::<f64>()).fold(0.0, f64::max).max(1e-300);
    let mut w = vec![1.0 / k as f64; k];
    let mut y = w.clone();
    let mut tk = 1.0_f64;
    let mut fw = ridged.value(&w);
    let mut iterations = 0;
    while iterations < options.max_iterations {
        iterations += 1;
        let g = ridged.gradient(&y);
        let step: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - b / lip).collect();
        let wn = project_simplex(&step);
        let fnew = ridged.value(&wn);
        if fnew > fw {
            // Restart momentum when the objective goes up.
            y = w.clone();
            tk = 1.0;
            continue;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        y = wn.iter().zip(&w).map(|(a, b)| a + (tk - 1.0) / tn * (a - b)).collect();
        tk = tn;
        w = wn;
        fw = fnew;
        if iterations % 10 == 0 && ridged.kkt_residual(&w) <= options.tolerance {
            break;
        }
    }
    if let Some(polished) = active_set(&ridged, &w) {
        if ridged.value(&polished) <= fw + 1e-15 * fw.abs().max(1.0) {
            w = polished;
        }
    }
    (w, iterations)
}

/// Primal active-set iterations for the simplex QP, started from a feasible
/// `w0`. Returns `None` if the equality-constrained subproblems break down.
fn active_set(obj: &QuadraticObjective, w0: &[f64]) -> Option<Vec<f64>> {
    let k = obj.k;
    let mut w: Vec<f64> = w0.iter().map(|v| if *v > 1e-12 { *v } else { 0.0 }).collect();
    let s: f64 = w.iter().sum();
    if !(s > 0.0) {
        return None;
    }
    w.iter_mut().for_each(|v| *v /= s);
    let mut support: Vec<bool> = w.iter().map(|v| *v > 0.0).collect();
    for _ in 0..(10 * k + 10) {
        let idx: Vec<usize> = (0..k).filter(|&i| support[i]).collect();
        let m = idx.len();
        // [2Q_SS 1; 1' 0] [w_S; −μ] = [2c_S; 1]
        let mut a = DMatrix::<f64>::zeros(m + 1, m + 1);
        let mut rhs = DVector::<f64>::zeros(m + 1);
        for (r, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                a[(r, c)] = 2.0 * obj.q[i * k + j];
            }
            a[(r, m)] = 1.0;
            a[(m, r)] = 1.0;
            rhs[r] = 2.0 * obj.c[i];
        }
        rhs[m] = 1.0;
        let sol = a.lu().solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let target: Vec<f64> = idx.iter().enumerate().map(|(r, _)| sol[r]).collect();
        if target.iter().all(|v| *v >= 0.0) {
            for (r, &i) in idx.iter().enumerate() {
                w[i] = target[r];
            }
            let g = obj.gradient(&w);
            let mu: f64 = g.iter().zip(&w).map(|(a, b)| a * b).sum();
            let entering = (0..k)
                .filter(|&i| !support[i] && g[i] < mu - 1e-15 * mu.abs().max(1.0))
                .min_by(|&a, &b| g[a].total_cmp(&g[b]));
            match entering {
                Some(i) => support[i] = true,
                None => return Some(w),
            }
        } else {
            // Move towards the subproblem solution until a weight hits zero.
            let mut step = 1.0_f64;
            let mut blocking = None;
            for (r, &i) in idx.iter().enumerate() {
                if target[r] < 0.0 {
                    let a = w[i] / (w[i] - target[r]);
                    if a < step {
                        step = a;
                        blocking = Some(i);
                    }
                }
            }
            for (r, &i) in idx.iter().enumerate() {
                w[i] += step * (target[r] - w[i]);
            }
            if let Some(i) = blocking {
                w[i] = 0.0;
                support[i] = false;
            }
            for (r, &i) in idx.iter().enumerate() {
                if target[r] < 0.0 && w[i] <= 1e-15 {
                    w[i] = 0.0;
                    support[i] = false;
                }
            }
            if !support.iter().any(|s| *s) {
                return None;
            }
        }
    }
    None
}

/// Simplex weights minimizing the weighted Brier score.
pub fn solve_weights(matrix: &PredictionMatrix, frame: &RiskSetFrame) -> Result<WeightSolution, MetricError> {
    solve_weights_with(matrix, frame, &SolverOptions::default())
}

pub fn solve_weights_with(
    matrix: &PredictionMatrix,
    frame: &RiskSetFrame,
    options: &SolverOptions,
) -> Result<WeightSolution, MetricError> {
    if matrix.n_subjects() == 0 {
        return Err(MetricError::EmptyRiskSet(matrix.landmark));
    }
    let obj = QuadraticObjective::new(matrix, frame)?;
    let (mut w, iterations) = solve_simplex_qp(&obj, options);
    w.iter_mut().for_each(|v| *v = v.max(0.0));
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    Ok(WeightSolution {
        objective: weighted_brier(matrix, &w, frame)?,
        kkt_residual: obj.kkt_residual(&w),
        weights: w,
        iterations,
    })
}

/// `π_i = Σ_k w_k π_ik`.
pub fn ma_predict(matrix: &PredictionMatrix, solution: &WeightSolution) -> Vec<f64> {
    (0..matrix.n_subjects())
        .map(|i| matrix.row(i).iter().zip(&solution.weights).map(|(a, b)| a * b).sum::<f64>().clamp(0.0, 1.0))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragedPrediction {
    pub subject: SubjectId,
    pub point: f64,
    /// `Σ_k w_k √(Z_ik² + V_ik)`.
    pub se_buckland: f64,
    /// `√(Σ_k w_k (Z_ik² + V_ik))`.
    pub se_burnham: f64,
}

/// Averaged predictions with model-averaging standard errors, where
/// `Z_ik = π_ik − π_i` and `V_ik` is the draw variance of cell `(i, k)`.
pub fn ma_standard_errors(matrix: &PredictionMatrix, solution: &WeightSolution) -> Vec<AveragedPrediction> {
    let points = ma_predict(matrix, solution);
    let k = matrix.n_models();
    let mut clamped = false;
    let out = points
        .iter()
        .enumerate()
        .map(|(i, &point)| {
            let mut buck = 0.0;
            let mut burn = 0.0;
            for j in 0..k {
                let z = matrix.values[i * k + j] - point;
                let mut v = matrix.variances[i * k + j];
                if v < 0.0 {
                    clamped = true;
                    v = 0.0;
                }
                let w = solution.weights[j];
                buck += w * (z * z + v).sqrt();
                burn += w * (z * z + v);
            }
            AveragedPrediction { subject: matrix.subjects[i], point, se_buckland: buck, se_burnham: burn.sqrt() }
        })
        .collect();
    if clamped {
        warn!("negative draw variance clamped to zero");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_lands_on_simplex() {
        let p = project_simplex(&[0.4, 2.0, -1.0]);
        assert_eq!(p, vec![0.0, 1.0, 0.0]);
        let p = project_simplex(&[0.5, 0.5, 0.5]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }
}
