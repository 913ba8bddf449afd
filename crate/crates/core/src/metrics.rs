//! Censoring-robust accuracy metrics for predictions over a window
//! `(s, s+t]`: the censoring Kaplan–Meier curve, inverse-probability-of-
//! censoring weights, time-dependent AUC, Brier score and MSE.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SubjectId};
use crate::error::MetricError;

/// Kaplan–Meier estimate of the probability of remaining uncensored, `Ĝ`.
/// A right-continuous step function starting at 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensoringCurve {
    pub jump_times: Vec<f64>,
    /// `Ĝ` just after each jump.
    pub values: Vec<f64>,
}

impl CensoringCurve {
    /// `Ĝ(u)`.
    pub fn eval(&self, u: f64) -> f64 {
        let n = self.jump_times.partition_point(|&x| x <= u);
        if n == 0 {
            1.0
        } else {
            self.values[n - 1]
        }
    }

    /// Left limit `Ĝ(u−)`.
    pub fn eval_left(&self, u: f64) -> f64 {
        let n = self.jump_times.partition_point(|&x| x < u);
        if n == 0 {
            1.0
        } else {
            self.values[n - 1]
        }
    }
}

/// Kaplan–Meier with the roles of censoring and event swapped. Subjects with
/// `T* ≥ u` are at risk of censoring at `u`.
pub fn censoring_km(dataset: &Dataset) -> CensoringCurve {
    let mut pts: Vec<(f64, bool)> = dataset.subjects().iter().map(|r| (r.observed_time, r.event)).collect();
    censoring_km_from(&mut pts)
}

fn censoring_km_from(pts: &mut [(f64, bool)]) -> CensoringCurve {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut jump_times = Vec::new();
    let mut values = Vec::new();
    let mut g = 1.0;
    let mut at_risk = pts.len();
    let mut i = 0;
    while i < pts.len() {
        let u = pts[i].0;
        let mut censored = 0;
        let mut j = i;
        while j < pts.len() && pts[j].0 == u {
            censored += usize::from(!pts[j].1);
            j += 1;
        }
        if censored > 0 {
            g *= 1.0 - censored as f64 / at_risk as f64;
            jump_times.push(u);
            values.push(g);
        }
        at_risk -= j - i;
        i = j;
    }
    CensoringCurve { jump_times, values }
}

/// Risk set at landmark `s` with outcome indicators and IPCW weights for the
/// window `(s, s+t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskSetFrame {
    pub landmark: f64,
    pub window: f64,
    /// Subjects with `T* > s`, in id order.
    pub subjects: Vec<SubjectId>,
    pub observed_time: Vec<f64>,
    /// `D*_i = 1{s < T*_i ≤ s+t, δ_i = 1}`.
    pub event: Vec<bool>,
    /// `Ψ_i = 1{survivor}/Ĝ((s+t)−|s) + D*_i/Ĝ(T*_i−|s)`.
    pub weight: Vec<f64>,
    /// `Ĝ((s+t)−|s)`; equals `Ĝ(s+t|s)` unless censoring falls exactly at
    /// `s+t`.
    pub survivor_g: f64,
}

impl RiskSetFrame {
    pub fn n_at_risk(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_events(&self) -> usize {
        self.event.iter().filter(|e| **e).count()
    }

    /// Subjects known to be event-free through `s+t`: `T* > s+t`, or
    /// censored exactly at `s+t` (such as at an administrative cutoff).
    pub fn is_survivor(&self, i: usize) -> bool {
        !self.event[i] && self.observed_time[i] >= self.landmark + self.window
    }
}

/// Frame at `(s, t)` with `Ĝ` estimated on the same dataset.
pub fn ipcw_frame(dataset: &Dataset, s: f64, t: f64) -> Result<RiskSetFrame, MetricError> {
    ipcw_frame_with(dataset, &censoring_km(dataset), s, t)
}

/// Frame at `(s, t)` with a given censoring curve.
pub fn ipcw_frame_with(dataset: &Dataset, g: &CensoringCurve, s: f64, t: f64) -> Result<RiskSetFrame, MetricError> {
    let recs: Vec<_> = dataset.subjects().iter().filter(|r| r.observed_time > s).collect();
    if recs.is_empty() {
        return Err(MetricError::EmptyRiskSet(s));
    }
    let gs = g.eval(s);
    let g_end = g.eval_left(s + t);
    if !(gs > 0.0) || !(g_end > 0.0) {
        return Err(MetricError::CensoringExhausted(s + t));
    }
    let survivor_g = g_end / gs;
    let mut frame = RiskSetFrame {
        landmark: s,
        window: t,
        subjects: Vec::with_capacity(recs.len()),
        observed_time: Vec::with_capacity(recs.len()),
        event: Vec::with_capacity(recs.len()),
        weight: Vec::with_capacity(recs.len()),
        survivor_g,
    };
    for r in recs {
        let d = r.event && r.observed_time <= s + t;
        let w = if !d && r.observed_time >= s + t {
            1.0 / survivor_g
        } else if d {
            // Ĝ(T*−) ≥ Ĝ(s+t) > 0 because T* ≤ s+t.
            gs / g.eval_left(r.observed_time)
        } else {
            0.0
        };
        frame.subjects.push(r.subject);
        frame.observed_time.push(r.observed_time);
        frame.event.push(d);
        frame.weight.push(w);
    }
    Ok(frame)
}

fn check_len(pred: &[f64], frame: &RiskSetFrame) -> Result<(), MetricError> {
    if pred.len() != frame.n_at_risk() {
        return Err(MetricError::LengthMismatch(pred.len(), frame.n_at_risk()));
    }
    Ok(())
}

/// IPCW time-dependent AUC: weighted concordance over (case, control) pairs,
/// ties counting one half. `None` when there is no weighted case or no
/// weighted control.
pub fn auc(pred: &[f64], frame: &RiskSetFrame) -> Result<Option<f64>, MetricError> {
    check_len(pred, frame)?;
    let mut controls: Vec<(f64, f64)> = (0..pred.len())
        .filter(|&i| frame.is_survivor(i) && frame.weight[i] > 0.0)
        .map(|i| (pred[i], frame.weight[i]))
        .collect();
    controls.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cum = Vec::with_capacity(controls.len() + 1);
    cum.push(0.0);
    for c in &controls {
        cum.push(cum.last().unwrap() + c.1);
    }
    let wc = *cum.last().unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in (0..pred.len()).filter(|&i| frame.event[i] && frame.weight[i] > 0.0) {
        let lo = controls.partition_point(|c| c.0 < pred[i]);
        let hi = controls.partition_point(|c| c.0 <= pred[i]);
        num += frame.weight[i] * (cum[lo] + 0.5 * (cum[hi] - cum[lo]));
        den += frame.weight[i] * wc;
    }
    Ok((den > 0.0).then(|| num / den))
}

/// IPCW Brier score `(1/N(s)) Σ Ψ_i (D*_i − π_i)²`.
pub fn brier(pred: &[f64], frame: &RiskSetFrame) -> Result<f64, MetricError> {
    check_len(pred, frame)?;
    let n = frame.n_at_risk() as f64;
    let a: f64 = pred
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = if frame.event[i] { 1.0 } else { 0.0 };
            frame.weight[i] * (d - p) * (d - p)
        })
        .sum::<f64>()
        / n;
    let b = brier_two_sum(pred, frame)?;
    debug_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "Brier forms disagree: {a} vs {b}");
    Ok(a)
}

/// The Brier score written as a survivor sum and an event sum, each with its
/// own censoring correction.
pub fn brier_two_sum(pred: &[f64], frame: &RiskSetFrame) -> Result<f64, MetricError> {
    check_len(pred, frame)?;
    let n = frame.n_at_risk() as f64;
    let mut survivors = 0.0;
    let mut events = 0.0;
    for (i, p) in pred.iter().enumerate() {
        if frame.is_survivor(i) {
            survivors += p * p;
        } else if frame.event[i] {
            events += (1.0 - p) * (1.0 - p) * frame.weight[i];
        }
    }
    Ok((survivors / frame.survivor_g + events) / n)
}

/// Mean squared error against true probabilities.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyMatrix);
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}
