//! CSV/JSON interchange for datasets.
//!
//! * `longitudinal.csv`: `subject_id, marker_id, time, value` (marker ids are
//!   1-based positions in `markers.json`)
//! * `survival.csv`: `subject_id, obs_time, event` followed by one column per
//!   baseline covariate
//! * `markers.json`: `[{"name": ..., "family": "gaussian" | "binary"}, ...]`
//!
//! Reals are written with the shortest representation that parses back to the
//! same `f64`, so write-then-read is exact.

use std::fs::File;
use std::path::Path;

use crate::dataset::{Dataset, LongitudinalObservation, MarkerMeta, SubjectId, SurvivalRecord};
use crate::error::DataError;

pub const LONGITUDINAL_FILE: &str = "longitudinal.csv";
pub const SURVIVAL_FILE: &str = "survival.csv";
pub const MARKERS_FILE: &str = "markers.json";

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

fn csv_err(path: &Path, source: csv::Error) -> DataError {
    DataError::Csv { path: path.display().to_string(), source }
}

fn parse<T: std::str::FromStr>(path: &Path, field: &str, raw: &str) -> Result<T, DataError> {
    raw.trim().parse().map_err(|_| DataError::Invalid(format!("{}: cannot parse {field} from {raw:?}", path.display())))
}

pub fn read_markers(path: &Path) -> Result<Vec<MarkerMeta>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(file).map_err(|source| DataError::Json { path: path.display().to_string(), source })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let markers = read_markers(&dir.join(MARKERS_FILE))?;

    let spath = dir.join(SURVIVAL_FILE);
    let mut rdr = csv::Reader::from_path(&spath).map_err(|e| csv_err(&spath, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(&spath, e))?.clone();
    let expected = ["subject_id", "obs_time", "event"];
    if headers.len() < 3 || headers.iter().take(3).zip(expected).any(|(h, e)| h.trim() != e) {
        return Err(DataError::Invalid(format!(
            "{}: header must start with subject_id,obs_time,event",
            spath.display()
        )));
    }
    let covariate_names: Vec<String> = headers.iter().skip(3).map(|h| h.trim().to_string()).collect();
    let mut subjects = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(&spath, e))?;
        let event: u8 = parse(&spath, "event", &row[2])?;
        if event > 1 {
            return Err(DataError::Invalid(format!("{}: event must be 0 or 1", spath.display())));
        }
        subjects.push(SurvivalRecord {
            subject: SubjectId(parse(&spath, "subject_id", &row[0])?),
            observed_time: parse(&spath, "obs_time", &row[1])?,
            event: event == 1,
            covariates: row.iter().skip(3).map(|v| parse(&spath, "covariate", v)).collect::<Result<_, _>>()?,
        });
    }

    let lpath = dir.join(LONGITUDINAL_FILE);
    let mut rdr = csv::Reader::from_path(&lpath).map_err(|e| csv_err(&lpath, e))?;
    let mut observations = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(&lpath, e))?;
        if row.len() != 4 {
            return Err(DataError::Invalid(format!("{}: expected 4 columns", lpath.display())));
        }
        let marker_id: usize = parse(&lpath, "marker_id", &row[1])?;
        if marker_id == 0 {
            return Err(DataError::UnknownMarker(0));
        }
        observations.push(LongitudinalObservation {
            subject: SubjectId(parse(&lpath, "subject_id", &row[0])?),
            marker: marker_id - 1,
            time: parse(&lpath, "time", &row[2])?,
            value: parse(&lpath, "value", &row[3])?,
        });
    }

    Dataset::new(subjects, observations, markers, covariate_names)
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let mpath = dir.join(MARKERS_FILE);
    let json = serde_json::to_string_pretty(dataset.markers())
        .map_err(|source| DataError::Json { path: mpath.display().to_string(), source })?;
    std::fs::write(&mpath, json + "\n").map_err(|e| io_err(&mpath, e))?;

    let spath = dir.join(SURVIVAL_FILE);
    let mut w = csv::Writer::from_path(&spath).map_err(|e| csv_err(&spath, e))?;
    let mut header = vec!["subject_id".to_string(), "obs_time".into(), "event".into()];
    header.extend(dataset.covariate_names().iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(&spath, e))?;
    for r in dataset.subjects() {
        let mut rec = vec![r.subject.to_string(), r.observed_time.to_string(), u8::from(r.event).to_string()];
        rec.extend(r.covariates.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| csv_err(&spath, e))?;
    }
    w.flush().map_err(|e| io_err(&spath, e))?;

    let lpath = dir.join(LONGITUDINAL_FILE);
    let mut w = csv::Writer::from_path(&lpath).map_err(|e| csv_err(&lpath, e))?;
    w.write_record(["subject_id", "marker_id", "time", "value"]).map_err(|e| csv_err(&lpath, e))?;
    for o in dataset.observations() {
        w.write_record([o.subject.to_string(), (o.marker + 1).to_string(), o.time.to_string(), o.value.to_string()])
            .map_err(|e| csv_err(&lpath, e))?;
    }
    w.flush().map_err(|e| io_err(&lpath, e))?;
    Ok(())
}
