//! Data model, CSV ingestion, and validation for censored IV samples.
//!
//! A sample row is `(log follow-up time, event flag, exposure, confounders,
//! instruments)`. CSV binding is by header name, not column order; the
//! default schema expects `time,status,x,d1..dp,z1..zq`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    /// Observed log follow-up time (`min` of log event and log censoring time).
    pub log_time: f64,
    /// `true` = event observed, `false` = right-censored.
    pub event: bool,
    /// Observed exposure surrogate.
    pub exposure: f64,
    /// Observed confounders, length `p`.
    pub confounders: Vec<f64>,
    /// Instruments, length `q`.
    pub instruments: Vec<f64>,
}

/// A validated collection of subjects with fixed confounder and instrument
/// dimensions. Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoredSample {
    subjects: Vec<Subject>,
    p: usize,
    q: usize,
}

impl CensoredSample {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        let sample = Self::new_relaxed(subjects)?;
        let (n, p, q) = (sample.n(), sample.p, sample.q);
        let required = (1 + q + p) + (2 + p);
        if n < required {
            return Err(Error::TooFewSubjects { n, required });
        }
        Ok(sample)
    }

    /// Like [`CensoredSample::new`] but without the two-stage
    /// identifiability minimum on `n`. Intended for small hand fixtures and
    /// nonparametric estimates that do not involve a regression fit.
    pub fn new_relaxed(subjects: Vec<Subject>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::EmptySample);
        }
        let p = subjects[0].confounders.len();
        let q = subjects[0].instruments.len();
        if q == 0 {
            return Err(Error::InvalidSimConfig(
                "at least one instrument column is required".into(),
            ));
        }
        for (row, s) in subjects.iter().enumerate() {
            let row = row + 1;
            if s.confounders.len() != p || s.instruments.len() != q {
                return Err(Error::NonFiniteValue {
                    row,
                    column: "ragged covariate row".into(),
                });
            }
            if !s.log_time.is_finite() || !s.exposure.is_finite() {
                return Err(Error::NonFiniteValue {
                    row,
                    column: "time/x".into(),
                });
            }
            if s.confounders.iter().chain(s.instruments.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue {
                    row,
                    column: "covariates".into(),
                });
            }
        }
        if !subjects.iter().any(|s| s.event) {
            return Err(Error::ZeroEvents);
        }
        Ok(Self { subjects, p, q })
    }

    fn zip_parts(
        log_times: Vec<f64>,
        events: Vec<bool>,
        exposures: Vec<f64>,
        confounders: Vec<Vec<f64>>,
        instruments: Vec<Vec<f64>>,
    ) -> Vec<Subject> {
        log_times
            .into_iter()
            .zip(events)
            .zip(exposures)
            .zip(confounders)
            .zip(instruments)
            .map(|((((log_time, event), exposure), confounders), instruments)| Subject {
                log_time,
                event,
                exposure,
                confounders,
                instruments,
            })
            .collect()
    }

    /// Builds a sample from parallel column vectors.
    pub fn from_parts(
        log_times: Vec<f64>,
        events: Vec<bool>,
        exposures: Vec<f64>,
        confounders: Vec<Vec<f64>>,
        instruments: Vec<Vec<f64>>,
    ) -> Result<Self> {
        Self::new(Self::zip_parts(
            log_times,
            events,
            exposures,
            confounders,
            instruments,
        ))
    }

    /// [`CensoredSample::from_parts`] without the identifiability minimum.
    pub fn from_parts_relaxed(
        log_times: Vec<f64>,
        events: Vec<bool>,
        exposures: Vec<f64>,
        confounders: Vec<Vec<f64>>,
        instruments: Vec<Vec<f64>>,
    ) -> Result<Self> {
        Self::new_relaxed(Self::zip_parts(
            log_times,
            events,
            exposures,
            confounders,
            instruments,
        ))
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn log_times(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.log_time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.subjects.iter().map(|s| s.event).collect()
    }

    pub fn censoring_fraction(&self) -> f64 {
        let c = self.subjects.iter().filter(|s| !s.event).count();
        c as f64 / self.n() as f64
    }

    /// First-stage design `[1, Z, D]`, row per subject.
    pub fn stage1_design(&self) -> DMatrix<f64> {
        let n = self.n();
        let k = 1 + self.q + self.p;
        DMatrix::from_fn(n, k, |i, j| {
            let s = &self.subjects[i];
            if j == 0 {
                1.0
            } else if j <= self.q {
                s.instruments[j - 1]
            } else {
                s.confounders[j - 1 - self.q]
            }
        })
    }
}

/// CSV column binding. Empty `confounders`/`instruments` lists mean
/// auto-detection of `d1..dp` / `z1..zq` columns from the header.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnSpec {
    pub time: String,
    pub status: String,
    pub exposure: String,
    pub confounders: Vec<String>,
    pub instruments: Vec<String>,
    /// When set, the `time` column is on the raw scale and is
    /// log-transformed at load.
    pub raw_time: bool,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        Self {
            time: "time".into(),
            status: "status".into(),
            exposure: "x".into(),
            confounders: Vec::new(),
            instruments: Vec::new(),
            raw_time: false,
        }
    }
}

impl ColumnSpec {
    pub fn from_json_reader<R: Read>(reader: R) -> Result<Self> {
        Ok(serde_json::from_reader(reader)?)
    }
}

/// Columns with a common prefix and numeric suffix (`d1`, `d2`, ...),
/// ordered by suffix.
fn detect_prefixed(header: &[String], prefix: char) -> Vec<String> {
    let mut found: Vec<(usize, String)> = header
        .iter()
        .filter_map(|h| {
            let rest = h.strip_prefix(prefix)?;
            let idx: usize = rest.parse().ok()?;
            Some((idx, h.clone()))
        })
        .collect();
    found.sort_by_key(|(idx, _)| *idx);
    found.into_iter().map(|(_, name)| name).collect()
}

/// Loads and validates a sample from CSV.
pub fn load_csv<P: AsRef<Path>>(path: P, spec: &ColumnSpec) -> Result<CensoredSample> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, spec)
}

pub fn load_csv_reader<R: Read>(reader: R, spec: &ColumnSpec) -> Result<CensoredSample> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    let confounder_names = if spec.confounders.is_empty() {
        detect_prefixed(&header, 'd')
    } else {
        spec.confounders.clone()
    };
    let instrument_names = if spec.instruments.is_empty() {
        detect_prefixed(&header, 'z')
    } else {
        spec.instruments.clone()
    };

    let time_idx = col(&spec.time)?;
    let status_idx = col(&spec.status)?;
    let x_idx = col(&spec.exposure)?;
    let d_idx: Vec<usize> = confounder_names
        .iter()
        .map(|n| col(n))
        .collect::<Result<_>>()?;
    let z_idx: Vec<usize> = instrument_names
        .iter()
        .map(|n| col(n))
        .collect::<Result<_>>()?;
    if z_idx.is_empty() {
        return Err(Error::MissingColumn("z1".into()));
    }

    let parse = |record: &csv::StringRecord, idx: usize, row: usize, name: &str| -> Result<f64> {
        let raw = record.get(idx).unwrap_or("").trim();
        let v: f64 = raw.parse().map_err(|_| Error::NonNumericCell {
            row,
            column: name.to_string(),
            value: raw.to_string(),
        })?;
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                row,
                column: name.to_string(),
            });
        }
        Ok(v)
    };

    let mut subjects = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let time = parse(&record, time_idx, row, &spec.time)?;
        let status = parse(&record, status_idx, row, &spec.status)?;
        if status != 0.0 && status != 1.0 {
            return Err(Error::InvalidStatus(row));
        }
        let log_time = if spec.raw_time {
            if time <= 0.0 {
                return Err(Error::NonPositiveTime(row));
            }
            time.ln()
        } else {
            time
        };
        let exposure = parse(&record, x_idx, row, &spec.exposure)?;
        let confounders = d_idx
            .iter()
            .zip(&confounder_names)
            .map(|(&idx, name)| parse(&record, idx, row, name))
            .collect::<Result<Vec<f64>>>()?;
        let instruments = z_idx
            .iter()
            .zip(&instrument_names)
            .map(|(&idx, name)| parse(&record, idx, row, name))
            .collect::<Result<Vec<f64>>>()?;
        subjects.push(Subject {
            log_time,
            event: status == 1.0,
            exposure,
            confounders,
            instruments,
        });
    }
    CensoredSample::new(subjects)
}

/// Writes a sample in the standard schema. With `raw_time`, times are
/// exponentiated back to the raw scale; otherwise log times are written
/// verbatim (round-trips bit-exactly with [`load_csv`]).
pub fn write_csv<W: Write>(sample: &CensoredSample, writer: W, raw_time: bool) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["time".to_string(), "status".to_string(), "x".to_string()];
    for j in 1..=sample.p() {
        header.push(format!("d{j}"));
    }
    for j in 1..=sample.q() {
        header.push(format!("z{j}"));
    }
    wtr.write_record(&header)?;
    for s in sample.subjects() {
        let time = if raw_time { s.log_time.exp() } else { s.log_time };
        let mut record = vec![
            format!("{time}"),
            if s.event { "1".to_string() } else { "0".to_string() },
            format!("{}", s.exposure),
        ];
        record.extend(s.confounders.iter().map(|v| format!("{v}")));
        record.extend(s.instruments.iter().map(|v| format!("{v}")));
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Non-fatal data quality findings. Validation is pure: the sample is never
/// mutated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Warning {
    /// Largest observation is censored: the censoring-distribution estimate
    /// has an improper tail.
    ImproperCensoringTail,
    /// More than 75% of subjects are censored.
    HeavyCensoring,
    /// First-stage design `[1, Z, D]` is rank-deficient.
    RankDeficientStage1,
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::ImproperCensoringTail => write!(f, "improper censoring-distribution tail"),
            Warning::HeavyCensoring => write!(f, "censoring fraction exceeds 0.75"),
            Warning::RankDeficientStage1 => write!(f, "first-stage design is rank-deficient"),
        }
    }
}

pub fn validate(sample: &CensoredSample) -> Vec<Warning> {
    let mut warnings = Vec::new();
    let max_time = sample
        .subjects()
        .iter()
        .map(|s| s.log_time)
        .fold(f64::NEG_INFINITY, f64::max);
    let max_all_censored = sample
        .subjects()
        .iter()
        .filter(|s| s.log_time == max_time)
        .all(|s| !s.event);
    if max_all_censored {
        warnings.push(Warning::ImproperCensoringTail);
    }
    if sample.censoring_fraction() > 0.75 {
        warnings.push(Warning::HeavyCensoring);
    }
    let design = sample.stage1_design();
    let k = design.ncols();
    let qr = design.col_piv_qr();
    let r_diag = qr.r().diagonal();
    let tol = r_diag[0].abs() * 1e-10;
    if (0..k).any(|j| r_diag[j].abs() <= tol) {
        warnings.push(Warning::RankDeficientStage1);
    }
    warnings
}
