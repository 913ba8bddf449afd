//! Experiment orchestration: splits, per-split model fitting, weight
//! estimation on the learning part and scoring on the validation part.
//!
//! Work is parallel over models within a split and over subjects within a
//! prediction batch; every result is merged in a fixed order so reports are
//! byte-identical across thread counts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::averaging::{ma_predict, solve_weights, PredictionMatrix, WeightSolution};
use crate::dataset::{Dataset, SubjectId};
use crate::error::{DataError, Error, ModelError};
use crate::io;
use crate::joint_model::{fit, FitOptions, FittedJointModel, ModelSpec, QuadratureConfig};
use crate::metrics::{auc, brier, ipcw_frame, mse, RiskSetFrame};
use crate::prediction::{PredictOptions, Predictor, RiskPrediction};
use crate::seeds::{derive_seed, real_tag, str_tag};
use crate::simulation::{generate_dataset, replicate_config, ScenarioRequest, SimulatedData};

const SPLIT_TAG: u64 = 0x7370_6c69;
const PREDICT_TAG: u64 = 0x7072_6564;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    OneMarkerModels,
    TwoMarkerModels,
    AllMarkerModel,
    OneMarkerMa,
    TwoMarkerMa,
}

impl Method {
    pub fn is_average(self) -> bool {
        matches!(self, Method::OneMarkerMa | Method::TwoMarkerMa)
    }
}

/// Label of the averaged predictions in reports.
pub const MA1_LABEL: &str = "ma1";
pub const MA2_LABEL: &str = "ma2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generate a fresh dataset per replicate.
    Simulate(ScenarioRequest),
    /// Read one dataset directory; replicates differ only in their splits.
    DataDir(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Holdout { learning_fraction: f64 },
    Kfold { folds: usize },
}

fn default_fit() -> FitOptions {
    FitOptions { quadrature: QuadratureConfig { points: 9, max_nodes: Some(729) }, ..FitOptions::default() }
}

fn default_knots() -> usize {
    5
}

fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub source: DataSource,
    pub methods: Vec<Method>,
    /// One-based marker ids to use; all markers when absent.
    #[serde(default)]
    pub markers: Option<Vec<usize>>,
    pub landmarks: Vec<f64>,
    pub window: f64,
    pub split: Split,
    #[serde(default = "default_one")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_knots")]
    pub knots: usize,
    #[serde(default = "default_fit")]
    pub fit: FitOptions,
    #[serde(default)]
    pub prediction: PredictOptions,
    /// Stop at the first failed fit instead of marking its cells.
    #[serde(default)]
    pub abort_on_failure: bool,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.methods.is_empty() {
            return bad("plan requests no methods");
        }
        if self.landmarks.is_empty() || self.landmarks.iter().any(|s| !(*s >= 0.0)) {
            return bad("landmarks must be nonempty and nonnegative");
        }
        if self.landmarks.windows(2).any(|w| w[1] <= w[0]) {
            return bad("landmarks must be increasing");
        }
        if !(self.window > 0.0 && self.window.is_finite()) {
            return bad("window must be positive");
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        match self.split {
            Split::Holdout { learning_fraction } if !(learning_fraction > 0.0 && learning_fraction < 1.0) => {
                return bad("learning fraction must lie in (0, 1)")
            }
            Split::Kfold { folds } if folds < 2 => return bad("k-fold split needs at least 2 folds"),
            _ => {}
        }
        if self.knots == 0 {
            return bad("knot count must be positive");
        }
        if self.prediction.mc_draws == 0 {
            return bad("mc_draws must be positive");
        }
        Ok(())
    }

    /// Marker ids used by the plan given the dataset's marker count.
    fn marker_ids(&self, n_markers: usize) -> Result<Vec<usize>, Error> {
        let ids = self.markers.clone().unwrap_or_else(|| (1..=n_markers).collect());
        if ids.is_empty() || ids.iter().any(|&k| k == 0 || k > n_markers) {
            return Err(Error::Config(format!("marker ids must lie in 1..={n_markers}")));
        }
        if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
            return Err(Error::Config("duplicate marker ids".into()));
        }
        Ok(ids)
    }

    fn wants(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }
}

/// Candidate model specifications of a plan, in report order.
#[derive(Clone, Debug)]
struct Candidates {
    one: Vec<ModelSpec>,
    two: Vec<ModelSpec>,
    all: Option<ModelSpec>,
}

impl Candidates {
    fn new(plan: &ExperimentPlan, ids: &[usize]) -> Result<Self, Error> {
        let need_one = plan.wants(Method::OneMarkerModels) || plan.wants(Method::OneMarkerMa);
        let need_two = plan.wants(Method::TwoMarkerModels) || plan.wants(Method::TwoMarkerMa);
        let one =
            if need_one { ids.iter().map(|&k| ModelSpec::linear(&[k], plan.knots)).collect() } else { Vec::new() };
        let mut two = Vec::new();
        if need_two {
            if ids.len() < 2 {
                return Err(Error::Config("two-marker methods need at least two markers".into()));
            }
            for (i, &a) in ids.iter().enumerate() {
                for &b in &ids[i + 1..] {
                    two.push(ModelSpec::linear(&[a, b], plan.knots));
                }
            }
        }
        let all = if plan.wants(Method::AllMarkerModel) {
            let spec = ModelSpec::linear(ids, plan.knots);
            let d = spec.random_effect_dim();
            if d > crate::linalg::MAX_RE {
                return Err(ModelError::DimensionCap(d).into());
            }
            Some(spec)
        } else {
            None
        };
        Ok(Self { one, two, all })
    }

    fn unique(&self) -> Vec<ModelSpec> {
        let mut seen = BTreeSet::new();
        self.one.iter().chain(&self.two).chain(&self.all).filter(|s| seen.insert(s.model_id())).cloned().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
    NotEvaluable,
}

/// Metrics of one method at one landmark in one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub method: Method,
    /// Model id for individual models, `ma1`/`ma2` for averages.
    pub label: String,
    pub replicate: usize,
    pub fold: usize,
    pub landmark: f64,
    pub window: f64,
    pub status: CellStatus,
    pub reason: Option<String>,
    pub auc: Option<f64>,
    pub brier: Option<f64>,
    pub mse: Option<f64>,
    pub n_at_risk: usize,
    pub n_events: usize,
    /// Hash of the weight record used, for averaged methods.
    pub weights_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub method: Method,
    pub label: String,
    pub replicate: usize,
    pub fold: usize,
    pub landmark: f64,
    pub window: f64,
    pub model_ids: Vec<String>,
    pub weights: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Candidate models left out because their fit or predictions failed.
    pub dropped: Vec<String>,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub replicate: usize,
    pub fold: usize,
    pub model_id: String,
    pub ok: bool,
    pub converged: bool,
    pub log_likelihood: Option<f64>,
    pub iterations: usize,
    pub reason: Option<String>,
}

/// Mean of per-split weights for one averaged method and landmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanWeights {
    pub label: String,
    pub landmark: f64,
    pub window: f64,
    pub model_ids: Vec<String>,
    pub mean_weights: Vec<f64>,
    pub n_splits: usize,
}

/// Wall-clock seconds per stage, summed over splits. Kept out of the
/// serialized report so that reports are reproducible byte for byte.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub data: f64,
    pub fit: f64,
    pub predict: f64,
    pub weight: f64,
    pub score: f64,
}

impl StageTimings {
    fn add(&mut self, o: &StageTimings) {
        self.data += o.data;
        self.fit += o.fit;
        self.predict += o.predict;
        self.weight += o.weight;
        self.score += o.score;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub plan: ExperimentPlan,
    pub cells: Vec<MetricCell>,
    pub weights: Vec<WeightRecord>,
    /// Weights averaged over splits, reported for information only; scoring
    /// always uses the per-split weights.
    pub mean_weights: Vec<MeanWeights>,
    pub fits: Vec<FitRecord>,
    #[serde(skip)]
    pub timings: StageTimings,
}

/// Hash linking a weight vector to the cells scored with it.
pub fn weight_hash(model_ids: &[String], weights: &[f64]) -> String {
    let mut h = Sha256::new();
    for (id, w) in model_ids.iter().zip(weights) {
        h.update(id.as_bytes());
        h.update([0]);
        h.update(w.to_bits().to_le_bytes());
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// One learning/validation pair.
struct Unit<'a> {
    replicate: usize,
    fold: usize,
    learning: Dataset,
    validation: Dataset,
    truth: Option<&'a SimulatedData>,
}

#[derive(Default)]
struct UnitOutput {
    cells: Vec<MetricCell>,
    weights: Vec<WeightRecord>,
    fits: Vec<FitRecord>,
    timings: StageTimings,
}

type Column = Result<Vec<RiskPrediction>, String>;

fn predict_column(predictor: &Predictor, dataset: &Dataset, ids: &[SubjectId], s: f64, t: f64) -> Column {
    ids.par_iter()
        .map(|&id| {
            let h = dataset.truncate_history(id, s).map_err(|e| e.to_string())?;
            predictor.predict(&h, t).map_err(|e| e.to_string())
        })
        .collect()
}

fn cell(unit: &Unit, method: Method, label: &str, s: f64, t: f64) -> MetricCell {
    MetricCell {
        method,
        label: label.to_string(),
        replicate: unit.replicate,
        fold: unit.fold,
        landmark: s,
        window: t,
        status: CellStatus::Ok,
        reason: None,
        auc: None,
        brier: None,
        mse: None,
        n_at_risk: 0,
        n_events: 0,
        weights_hash: None,
    }
}

fn score(mut c: MetricCell, pred: &[f64], frame: &RiskSetFrame, truth: Option<&[f64]>) -> MetricCell {
    c.n_at_risk = frame.n_at_risk();
    c.n_events = frame.n_events();
    match (auc(pred, frame), brier(pred, frame)) {
        (Ok(a), Ok(b)) => {
            c.auc = a;
            c.brier = Some(b);
            if a.is_none() {
                c.reason = Some("no weighted case or control in the window".into());
            }
        }
        (Err(e), _) | (_, Err(e)) => {
            c.status = CellStatus::Failed;
            c.reason = Some(e.to_string());
            return c;
        }
    }
    if let Some(tr) = truth {
        c.mse = mse(pred, tr).ok();
    }
    c
}

fn failed(mut c: MetricCell, status: CellStatus, reason: impl Into<String>) -> MetricCell {
    c.status = status;
    c.reason = Some(reason.into());
    c
}

fn run_unit(plan: &ExperimentPlan, cands: &Candidates, unit: &Unit) -> Result<UnitOutput, Error> {
    let mut out = UnitOutput::default();
    let t = plan.window;
    let specs = cands.unique();

    // Fit every candidate on the learning part.
    let start = Instant::now();
    let fits: Vec<(String, Result<FittedJointModel, ModelError>)> =
        specs.par_iter().map(|spec| (spec.model_id(), fit(&unit.learning, spec, &plan.fit))).collect();
    out.timings.fit = start.elapsed().as_secs_f64();
    let mut models: BTreeMap<String, Result<FittedJointModel, String>> = BTreeMap::new();
    for (id, r) in fits {
        let rec = FitRecord {
            replicate: unit.replicate,
            fold: unit.fold,
            model_id: id.clone(),
            ok: r.is_ok(),
            converged: r.as_ref().is_ok_and(|m| m.converged),
            log_likelihood: r.as_ref().ok().map(|m| m.log_likelihood),
            iterations: r.as_ref().map_or(0, |m| m.iterations),
            reason: r.as_ref().err().map(|e| e.to_string()),
        };
        if let Err(e) = &r {
            warn!("replicate {} fold {}: fit of {id} failed: {e}", unit.replicate, unit.fold);
            if plan.abort_on_failure {
                return Err(ModelError::InvalidSpec(format!("fit of {id} failed: {e}")).into());
            }
        }
        out.fits.push(rec);
        models.insert(id, r.map_err(|e| e.to_string()));
    }

    // Predictors share their parameter draws across landmarks.
    let predictors: BTreeMap<String, Result<Predictor, String>> = models
        .iter()
        .map(|(id, m)| {
            let p = m.as_ref().map_err(Clone::clone).and_then(|m| {
                let opts = PredictOptions {
                    seed: derive_seed(plan.seed, &[PREDICT_TAG, unit.replicate as u64, unit.fold as u64, str_tag(id)]),
                    ..plan.prediction
                };
                Predictor::new(m, &opts).map_err(|e| e.to_string())
            });
            (id.clone(), p)
        })
        .collect();

    let ma_sets: Vec<(Method, &str, Vec<String>)> =
        [(Method::OneMarkerMa, MA1_LABEL, &cands.one), (Method::TwoMarkerMa, MA2_LABEL, &cands.two)]
            .into_iter()
            .filter(|(m, _, _)| plan.wants(*m))
            .map(|(m, l, specs)| (m, l, specs.iter().map(ModelSpec::model_id).collect()))
            .collect();
    let learning_needed: BTreeSet<String> = ma_sets.iter().flat_map(|(_, _, ids)| ids.iter().cloned()).collect();
    let individual: Vec<(Method, String)> =
        [(Method::OneMarkerModels, &cands.one), (Method::TwoMarkerModels, &cands.two)]
            .into_iter()
            .filter(|(m, _)| plan.wants(*m))
            .flat_map(|(m, specs)| specs.iter().map(move |s| (m, s.model_id())))
            .chain(cands.all.iter().map(|s| (Method::AllMarkerModel, s.model_id())))
            .collect();

    for &s in &plan.landmarks {
        let vframe = ipcw_frame(&unit.validation, s, t);
        let lframe = ipcw_frame(&unit.learning, s, t);
        if let (Ok(v), Ok(l)) = (&vframe, &lframe) {
            let learn: BTreeSet<_> = l.subjects.iter().collect();
            if v.subjects.iter().any(|id| learn.contains(id)) {
                return Err(Error::Config(format!(
                    "validation leakage: learning and validation risk sets overlap at s = {s}"
                )));
            }
        }
        let truth: Option<Vec<f64>> = match (&vframe, unit.truth) {
            (Ok(v), Some(sim)) => sim.true_risks(&v.subjects, s, t),
            _ => None,
        };

        // Validation predictions of every model, learning predictions of MA members.
        let start = Instant::now();
        let mut vpred: BTreeMap<String, Column> = BTreeMap::new();
        let mut lpred: BTreeMap<String, Column> = BTreeMap::new();
        for (id, p) in &predictors {
            let Ok(pr) = p else {
                let reason = p.as_ref().err().cloned().unwrap_or_default();
                vpred.insert(id.clone(), Err(reason.clone()));
                lpred.insert(id.clone(), Err(reason));
                continue;
            };
            vpred.insert(
                id.clone(),
                match &vframe {
                    Ok(v) => predict_column(pr, &unit.validation, &v.subjects, s, t),
                    Err(e) => Err(e.to_string()),
                },
            );
            if learning_needed.contains(id) {
                lpred.insert(
                    id.clone(),
                    match &lframe {
                        Ok(l) => predict_column(pr, &unit.learning, &l.subjects, s, t),
                        Err(e) => Err(e.to_string()),
                    },
                );
            }
        }
        out.timings.predict += start.elapsed().as_secs_f64();

        let start = Instant::now();
        for (method, id) in &individual {
            let c = cell(unit, *method, id, s, t);
            out.cells.push(match (&vframe, &vpred[id]) {
                (Err(e), _) => failed(c, CellStatus::NotEvaluable, e.to_string()),
                (_, Err(e)) => failed(c, CellStatus::Failed, e.clone()),
                (Ok(frame), Ok(p)) => {
                    let points: Vec<f64> = p.iter().map(|r| r.point).collect();
                    score(c, &points, frame, truth.as_deref())
                }
            });
        }
        out.timings.score += start.elapsed().as_secs_f64();

        for (method, label, ids) in &ma_sets {
            let start = Instant::now();
            let c = cell(unit, *method, label, s, t);
            let (vf, lf) = match (&vframe, &lframe) {
                (Ok(v), Ok(l)) => (v, l),
                (Err(e), _) | (_, Err(e)) => {
                    out.cells.push(failed(c, CellStatus::NotEvaluable, e.to_string()));
                    continue;
                }
            };
            let usable: Vec<&String> = ids.iter().filter(|id| lpred[*id].is_ok() && vpred[*id].is_ok()).collect();
            let dropped: Vec<String> = ids.iter().filter(|id| !usable.contains(id)).cloned().collect();
            if usable.is_empty() {
                out.cells.push(failed(c, CellStatus::Failed, "every candidate model failed"));
                continue;
            }
            let matrix = |preds: &BTreeMap<String, Column>, frame: &RiskSetFrame| {
                let cols: Vec<Vec<f64>> =
                    usable.iter().map(|id| preds[*id].as_ref().unwrap().iter().map(|r| r.point).collect()).collect();
                let vars: Vec<Vec<f64>> = usable
                    .iter()
                    .map(|id| preds[*id].as_ref().unwrap().iter().map(|r| r.draw_variance).collect())
                    .collect();
                PredictionMatrix::from_columns(
                    s,
                    t,
                    frame.subjects.clone(),
                    usable.iter().map(|id| id.to_string()).collect(),
                    &cols,
                    &vars,
                )
            };
            let solved: Result<WeightSolution, String> =
                matrix(&lpred, lf).and_then(|m| solve_weights(&m, lf)).map_err(|e| e.to_string());
            out.timings.weight += start.elapsed().as_secs_f64();
            let sol = match solved {
                Ok(sol) => sol,
                Err(e) => {
                    out.cells.push(failed(c, CellStatus::Failed, e));
                    continue;
                }
            };
            let model_ids: Vec<String> = usable.iter().map(|id| id.to_string()).collect();
            let hash = weight_hash(&model_ids, &sol.weights);
            out.weights.push(WeightRecord {
                method: *method,
                label: label.to_string(),
                replicate: unit.replicate,
                fold: unit.fold,
                landmark: s,
                window: t,
                model_ids,
                weights: sol.weights.clone(),
                objective: sol.objective,
                kkt_residual: sol.kkt_residual,
                iterations: sol.iterations,
                dropped,
                hash: hash.clone(),
            });
            let start = Instant::now();
            let scored = match matrix(&vpred, vf) {
                Ok(vm) => {
                    let points = ma_predict(&vm, &sol);
                    let mut c = score(c, &points, vf, truth.as_deref());
                    c.weights_hash = Some(hash);
                    c
                }
                Err(e) => failed(c, CellStatus::Failed, e.to_string()),
            };
            out.cells.push(scored);
            out.timings.score += start.elapsed().as_secs_f64();
        }
    }
    Ok(out)
}

/// Seed of the learning/validation split of a replicate.
pub fn split_seed(plan_seed: u64, replicate: usize) -> u64 {
    derive_seed(plan_seed, &[SPLIT_TAG, replicate as u64])
}

fn split_units<'a>(
    plan: &ExperimentPlan,
    replicate: usize,
    dataset: &Dataset,
    truth: Option<&'a SimulatedData>,
) -> Result<Vec<Unit<'a>>, Error> {
    let seed = split_seed(plan.seed, replicate);
    Ok(match plan.split {
        Split::Holdout { learning_fraction } => {
            let (learning, validation) = dataset.holdout_split(learning_fraction, seed)?;
            vec![Unit { replicate, fold: 0, learning, validation, truth }]
        }
        Split::Kfold { folds } => dataset
            .kfold_split(folds, seed)?
            .into_iter()
            .enumerate()
            .map(|(fold, (learning, validation))| Unit { replicate, fold, learning, validation, truth })
            .collect(),
    })
}

fn mean_weights(records: &[WeightRecord]) -> Vec<MeanWeights> {
    let mut groups: BTreeMap<(String, u64, Vec<String>), Vec<&WeightRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.label.clone(), real_tag(r.landmark), r.model_ids.clone())).or_default().push(r);
    }
    let mut out: Vec<MeanWeights> = groups
        .into_values()
        .map(|rs| {
            let k = rs[0].weights.len();
            let mut mean = vec![0.0; k];
            for r in &rs {
                for (m, w) in mean.iter_mut().zip(&r.weights) {
                    *m += w / rs.len() as f64;
                }
            }
            MeanWeights {
                label: rs[0].label.clone(),
                landmark: rs[0].landmark,
                window: rs[0].window,
                model_ids: rs[0].model_ids.clone(),
                mean_weights: mean,
                n_splits: rs.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.label.cmp(&b.label).then(a.landmark.total_cmp(&b.landmark)));
    out
}

/// Run a plan end to end.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<EvaluationReport, Error> {
    plan.validate()?;
    let mut report = EvaluationReport {
        plan: plan.clone(),
        cells: Vec::new(),
        weights: Vec::new(),
        mean_weights: Vec::new(),
        fits: Vec::new(),
        timings: StageTimings::default(),
    };
    let base = match &plan.source {
        DataSource::Simulate(req) => Some(req.resolve()?),
        DataSource::DataDir(_) => None,
    };
    let fixed = match &plan.source {
        DataSource::DataDir(dir) => Some(io::read_dataset(Path::new(dir))?),
        DataSource::Simulate(_) => None,
    };
    for replicate in 0..plan.replicates {
        let start = Instant::now();
        let sim = match &base {
            Some(config) if plan.replicates == 1 => Some(generate_dataset(config)?),
            Some(config) => Some(generate_dataset(&replicate_config(config, replicate))?),
            None => None,
        };
        let dataset = sim.as_ref().map(|s| &s.dataset).or(fixed.as_ref()).expect("one source is set");
        if dataset.n_events() == 0 {
            return Err(ModelError::NoEvents.into());
        }
        let ids = plan.marker_ids(dataset.n_markers())?;
        let cands = Candidates::new(plan, &ids)?;
        let units = split_units(plan, replicate, dataset, sim.as_ref().filter(|s| s.has_truth()))?;
        report.timings.data += start.elapsed().as_secs_f64();
        for unit in &units {
            info!(
                "replicate {} fold {}: {} learning / {} validation subjects",
                replicate,
                unit.fold,
                unit.learning.n_subjects(),
                unit.validation.n_subjects()
            );
            let out = run_unit(plan, &cands, unit)?;
            report.cells.extend(out.cells);
            report.weights.extend(out.weights);
            report.fits.extend(out.fits);
            report.timings.add(&out.timings);
        }
    }
    report.mean_weights = mean_weights(&report.weights);
    Ok(report)
}

/// Fail early on plans that request an all-marker model above the
/// random-effect dimension cap, without generating or fitting anything.
pub fn check_capabilities(plan: &ExperimentPlan) -> Result<(), Error> {
    plan.validate()?;
    let n_markers = match &plan.source {
        DataSource::Simulate(req) => req.resolve()?.n_markers(),
        DataSource::DataDir(dir) => io::read_markers(&Path::new(dir).join(io::MARKERS_FILE))?.len(),
    };
    let ids = plan.marker_ids(n_markers)?;
    Candidates::new(plan, &ids).map(|_| ())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One row per (method label, landmark).
    MethodLandmark,
    /// One row per method label, pooling landmarks.
    Method,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two values.
    pub sd: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub label: String,
    pub landmark: Option<f64>,
    pub auc: Option<Stat>,
    pub brier: Option<Stat>,
    pub mse: Option<Stat>,
    pub n_failed: usize,
    /// Position by decreasing mean AUC within the landmark (1 = best).
    pub auc_rank: Option<usize>,
}

fn stat(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Some(Stat { mean, sd, n })
}

/// Means and standard deviations across splits and replicates.
pub fn summarize(report: &EvaluationReport, grouping: Grouping) -> Result<Vec<SummaryRow>, Error> {
    if report.cells.is_empty() {
        return Err(Error::Config("empty report".into()));
    }
    let mut order: Vec<(String, Method)> = Vec::new();
    let mut groups: BTreeMap<(String, Option<u64>), Vec<&MetricCell>> = BTreeMap::new();
    for c in &report.cells {
        if !order.iter().any(|(l, _)| *l == c.label) {
            order.push((c.label.clone(), c.method));
        }
        let key = match grouping {
            Grouping::MethodLandmark => Some(real_tag(c.landmark)),
            Grouping::Method => None,
        };
        groups.entry((c.label.clone(), key)).or_default().push(c);
    }
    let mut rows = Vec::new();
    let landmarks: Vec<Option<f64>> = match grouping {
        Grouping::MethodLandmark => report.plan.landmarks.iter().map(|s| Some(*s)).collect(),
        Grouping::Method => vec![None],
    };
    for lm in landmarks {
        let start = rows.len();
        for (label, method) in &order {
            let Some(cells) = groups.get(&(label.clone(), lm.map(real_tag))) else {
                continue;
            };
            let pick = |f: fn(&MetricCell) -> Option<f64>| {
                stat(&cells.iter().filter(|c| c.status == CellStatus::Ok).filter_map(|c| f(c)).collect::<Vec<_>>())
            };
            rows.push(SummaryRow {
                method: *method,
                label: label.clone(),
                landmark: lm,
                auc: pick(|c| c.auc),
                brier: pick(|c| c.brier),
                mse: pick(|c| c.mse),
                n_failed: cells.iter().filter(|c| c.status != CellStatus::Ok).count(),
                auc_rank: None,
            });
        }
        let mut idx: Vec<usize> = (start..rows.len()).filter(|&i| rows[i].auc.is_some()).collect();
        idx.sort_by(|&a, &b| {
            let (x, y) = (rows[a].auc.as_ref().unwrap().mean, rows[b].auc.as_ref().unwrap().mean);
            y.total_cmp(&x).then(a.cmp(&b))
        });
        for (r, i) in idx.into_iter().enumerate() {
            rows[i].auc_rank = Some(r + 1);
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `metrics.csv` rows in report order.
pub fn metrics_csv(report: &EvaluationReport) -> String {
    let mut s = String::from("method,s,t,auc,brier,mse,n_at_risk,n_events,replicate,fold,status,reason\n");
    for c in &report.cells {
        let status = match c.status {
            CellStatus::Ok => "ok",
            CellStatus::Failed => "failed",
            CellStatus::NotEvaluable => "not_evaluable",
        };
        let reason = c.reason.as_deref().unwrap_or("").replace(['"', ',', '\n'], " ");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            c.label,
            c.landmark,
            c.window,
            opt(c.auc),
            opt(c.brier),
            opt(c.mse),
            c.n_at_risk,
            c.n_events,
            c.replicate,
            c.fold,
            status,
            reason
        );
    }
    s
}

const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of a metric's mean against the landmark, one series per
/// method label.
pub fn render_chart(rows: &[SummaryRow], metric: &str) -> Option<String> {
    let get = |r: &SummaryRow| match metric {
        "auc" => r.auc.as_ref().map(|s| s.mean),
        "brier" => r.brier.as_ref().map(|s| s.mean),
        "mse" => r.mse.as_ref().map(|s| s.mean),
        _ => None,
    };
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in rows {
        let (Some(x), Some(y)) = (r.landmark, get(r)) else { continue };
        match series.iter_mut().find(|(l, _)| *l == r.label) {
            Some((_, pts)) => pts.push((x, y)),
            None => series.push((r.label.clone(), vec![(x, y)])),
        }
    }
    if series.is_empty() {
        return None;
    }
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = ((y1 - y0) * 0.1).max(1e-3);
    y0 -= pad;
    y1 += pad;
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 150.0, 30.0, 40.0);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| top + (y1 - y) / (y1 - y0) * (h - top - bottom);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="18" text-anchor="middle">{} by landmark</text>"#, w / 2.0, escape(metric));
    let _ = writeln!(svg, r#"<path d="M{left},{top} V{} H{}" stroke="black" fill="none"/>"#, h - bottom, w - right);
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * f64::from(i) / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.3}</text>"#, left - 5.0, py(y) + 4.0);
    }
    let mut xs: Vec<f64> = rows.iter().filter_map(|r| r.landmark).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in xs {
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#, px(x), h - bottom + 16.0);
    }
    for (i, (label, p)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = p.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" stroke="{colour}" stroke-width="2" fill="none"/>"#, d.join(" "));
        for &(x, y) in p {
            let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{colour}"/>"#, px(x), py(y));
        }
        let ly = top + 16.0 * i as f64;
        let _ =
            writeln!(svg, r#"<rect x="{}" y="{}" width="12" height="3" fill="{colour}"/>"#, w - right + 10.0, ly + 5.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, w - right + 28.0, ly + 10.0, escape(label));
    }
    svg.push_str("</svg>\n");
    Some(svg)
}

fn write_file(path: &Path, text: &str) -> Result<(), DataError> {
    std::fs::write(path, text).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Write `report.json`, `metrics.csv`, `summary.json` and `charts/*.svg`.
/// Returns the paths written.
pub fn write_report(report: &EvaluationReport, dir: &Path) -> Result<Vec<PathBuf>, Error> {
    std::fs::create_dir_all(dir.join("charts"))
        .map_err(|source| DataError::Io { path: dir.display().to_string(), source })?;
    let mut written = Vec::new();
    let path = dir.join("report.json");
    write_file(&path, &json(report))?;
    written.push(path);
    let path = dir.join("metrics.csv");
    write_file(&path, &metrics_csv(report))?;
    written.push(path);
    let rows = summarize(report, Grouping::MethodLandmark)?;
    let path = dir.join("summary.json");
    write_file(&path, &json(&rows))?;
    written.push(path);
    for metric in ["auc", "brier", "mse"] {
        if let Some(svg) = render_chart(&rows, metric) {
            let path = dir.join("charts").join(format!("{metric}.svg"));
            write_file(&path, &svg)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize") + "\n"
}

pub fn read_plan(path: &Path) -> Result<ExperimentPlan, Error> {
    let text =
        std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let plan: ExperimentPlan =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let s = stat(&[0.7, 0.8]).unwrap();
        assert!((s.mean - 0.75).abs() < 1e-15);
        assert!((s.sd.unwrap() - 0.070_710_678_118_654_76).abs() < 1e-12);
        assert!(stat(&[0.7]).unwrap().sd.is_none());
    }

    #[test]
    fn weight_hash_depends_on_bits() {
        let ids = vec!["jm[1]".to_string(), "jm[2]".to_string()];
        assert_eq!(weight_hash(&ids, &[0.5, 0.5]), weight_hash(&ids, &[0.5, 0.5]));
        assert_ne!(weight_hash(&ids, &[0.5, 0.5]), weight_hash(&ids, &[0.5, 0.5 + 1e-16]));
    }
}
