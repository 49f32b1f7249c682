//! Truncated survival records, dataset validation, and CSV ingestion.
//!
//! A subject is observed only when its event time falls inside its
//! truncation window, `left <= time <= right`. Either side of the window may
//! be absent (`-inf` / `inf` in files), which is kept as an explicit
//! [`Bound::Unbounded`] rather than as a large finite number.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One side of a truncation window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bound {
    /// No truncation on this side (`-inf` on the left, `inf` on the right).
    Unbounded,
    At(f64),
}

impl Bound {
    pub fn is_unbounded(&self) -> bool {
        matches!(self, Bound::Unbounded)
    }

    pub fn finite(&self) -> Option<f64> {
        match *self {
            Bound::Unbounded => None,
            Bound::At(v) => Some(v),
        }
    }

    /// Value for comparisons when this bound sits on the left of a window.
    pub fn as_lower(&self) -> f64 {
        self.finite().unwrap_or(f64::NEG_INFINITY)
    }

    /// Value for comparisons when this bound sits on the right of a window.
    pub fn as_upper(&self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }
}

/// One observed unit `(T, L, R, Z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub time: f64,
    pub left: Bound,
    pub right: Bound,
    pub z: Vec<f64>,
}

impl SubjectRecord {
    pub fn new(time: f64, left: Bound, right: Bound, z: Vec<f64>) -> Self {
        Self { time, left, right, z }
    }

    /// Record with no truncation on either side.
    pub fn untruncated(time: f64, z: Vec<f64>) -> Self {
        Self::new(time, Bound::Unbounded, Bound::Unbounded, z)
    }

    /// True when `left <= time <= right`.
    pub fn is_observable(&self) -> bool {
        self.left.as_lower() <= self.time && self.time <= self.right.as_upper()
    }

    /// Whether `t` lies outside the observation window, using the same
    /// strict comparisons as the E-step (`t < L` or `t > R`).
    #[inline]
    pub fn excludes(&self, t: f64) -> bool {
        t < self.left.as_lower() || t > self.right.as_upper()
    }

    pub fn linear_predictor(&self, beta: &[f64]) -> f64 {
        self.z.iter().zip(beta).map(|(z, b)| z * b).sum()
    }

    fn validate(&self, row: usize, p: usize) -> Result<()> {
        if !(self.time.is_finite() && self.time > 0.0) {
            return Err(Error::NonPositiveTime { row, value: self.time });
        }
        if self.z.len() != p {
            return Err(Error::DimensionMismatch { expected: p, actual: self.z.len() });
        }
        if let Some(i) = self.z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCovariate { row, column: i });
        }
        for b in [self.left, self.right] {
            if let Bound::At(v) = b {
                if v.is_nan() {
                    return Err(Error::TruncationViolation { row });
                }
            }
        }
        if !self.is_observable() {
            return Err(Error::TruncationViolation { row });
        }
        Ok(())
    }
}

/// Which truncation mechanisms are present, derived from sentinel usage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruncationMode {
    Double,
    LeftOnly,
    RightOnly,
    None,
}

impl fmt::Display for TruncationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TruncationMode::Double => "double",
            TruncationMode::LeftOnly => "left-only",
            TruncationMode::RightOnly => "right-only",
            TruncationMode::None => "none",
        };
        f.write_str(s)
    }
}

/// Sorted distinct event times `t_1 < ... < t_d` and `tau = t_d`.
pub fn distinct_failure_times(records: &[SubjectRecord]) -> Result<(Vec<f64>, f64)> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut times: Vec<f64> = records.iter().map(|r| r.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let tau = *times.last().expect("nonempty");
    Ok((times, tau))
}

/// Validated, immutable collection of subject records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncatedDataset {
    records: Vec<SubjectRecord>,
    times: Vec<f64>,
    /// `time_index[i]` is the position of subject i's event time in `times`.
    time_index: Vec<usize>,
    p: usize,
    mode: TruncationMode,
}

impl TruncatedDataset {
    pub fn new(records: Vec<SubjectRecord>) -> Result<Self> {
        let first = records.first().ok_or(Error::EmptyDataset)?;
        let p = first.z.len();
        if p == 0 {
            return Err(Error::DimensionMismatch { expected: 1, actual: 0 });
        }
        for (row, r) in records.iter().enumerate() {
            r.validate(row, p)?;
        }
        let (times, _) = distinct_failure_times(&records)?;
        let time_index = records
            .iter()
            .map(|r| times.binary_search_by(|t| t.total_cmp(&r.time)).expect("time present"))
            .collect();
        let no_left = records.iter().all(|r| r.left.is_unbounded());
        let no_right = records.iter().all(|r| r.right.is_unbounded());
        let mode = match (no_left, no_right) {
            (true, true) => TruncationMode::None,
            (false, true) => TruncationMode::LeftOnly,
            (true, false) => TruncationMode::RightOnly,
            (false, false) => TruncationMode::Double,
        };
        Ok(Self { records, times, time_index, p, mode })
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    /// Number of covariates.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Distinct event times `t_1 < ... < t_d`.
    pub fn distinct_times(&self) -> &[f64] {
        &self.times
    }

    pub fn d(&self) -> usize {
        self.times.len()
    }

    pub fn tau(&self) -> f64 {
        *self.times.last().expect("nonempty")
    }

    pub fn time_index(&self) -> &[usize] {
        &self.time_index
    }

    pub fn mode(&self) -> TruncationMode {
        self.mode
    }

    /// New dataset built from the records at `indices` (with repetition).
    pub fn resample(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }

    /// Same records with both truncation sides removed.
    pub fn without_truncation(&self) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| SubjectRecord::untruncated(r.time, r.z.clone()))
            .collect();
        Self::new(records).expect("valid records stay valid")
    }

    /// Same records with right truncation dropped (left-only view).
    pub fn left_only_view(&self) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| SubjectRecord::new(r.time, r.left, Bound::Unbounded, r.z.clone()))
            .collect();
        Self::new(records).expect("valid records stay valid")
    }
}

/// Column names used when reading or writing a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub time: String,
    pub left: String,
    pub right: String,
    /// Covariate columns in order. Empty means every header starting with `z`.
    pub covariates: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            time: "time".into(),
            left: "left".into(),
            right: "right".into(),
            covariates: Vec::new(),
        }
    }
}

/// Text tokens for infinite truncation bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentinels {
    pub neg_inf: String,
    pub pos_inf: String,
}

impl Default for Sentinels {
    fn default() -> Self {
        Self { neg_inf: "-inf".into(), pos_inf: "inf".into() }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    pub schema: Schema,
    pub sentinels: Sentinels,
    /// Drop records that violate `left <= time <= right` instead of failing.
    pub skip_invalid: bool,
}

/// A loaded dataset together with any rows that were skipped.
#[derive(Clone, Debug)]
pub struct LoadOutcome {
    pub dataset: TruncatedDataset,
    pub covariate_names: Vec<String>,
    /// Data row numbers (1-based, header excluded) dropped under `skip_invalid`.
    pub skipped_rows: Vec<usize>,
}

pub fn load_dataset(path: &Path, options: &LoadOptions) -> Result<LoadOutcome> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, options)
}

pub fn read_dataset<R: Read>(reader: R, options: &LoadOptions) -> Result<LoadOutcome> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let schema = &options.schema;
    let time_col = find(&schema.time)?;
    let left_col = find(&schema.left)?;
    let right_col = find(&schema.right)?;
    let covariate_names: Vec<String> = if schema.covariates.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, h)| ![time_col, left_col, right_col].contains(i) && h.starts_with('z'))
            .map(|(_, h)| h.to_string())
            .collect()
    } else {
        schema.covariates.clone()
    };
    if covariate_names.is_empty() {
        return Err(Error::MissingColumn("z1".into()));
    }
    let cov_cols = covariate_names.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let sentinels = &options.sentinels;
    let mut records = Vec::new();
    let mut skipped_rows = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let row_no = idx + 1;
        let row = row?;
        let cell = |col: usize| row.get(col).unwrap_or("");
        let number = |col: usize| -> Result<f64> {
            let raw = cell(col);
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::NonNumericCell { row: row_no, column: headers[col].to_string() })
        };
        let bound = |col: usize, sentinel: &str| -> Result<Bound> {
            if cell(col) == sentinel {
                Ok(Bound::Unbounded)
            } else {
                number(col).map(Bound::At)
            }
        };
        let time = number(time_col)?;
        let left = bound(left_col, &sentinels.neg_inf)?;
        let right = bound(right_col, &sentinels.pos_inf)?;
        let z = cov_cols.iter().map(|&c| number(c)).collect::<Result<Vec<_>>>()?;
        let rec = SubjectRecord::new(time, left, right, z);
        if !rec.is_observable() || time <= 0.0 {
            if options.skip_invalid {
                log::warn!("skipping row {row_no}: truncation window does not contain the event time");
                skipped_rows.push(row_no);
                continue;
            }
            return Err(if time <= 0.0 {
                Error::NonPositiveTime { row: row_no, value: time }
            } else {
                Error::TruncationViolation { row: row_no }
            });
        }
        records.push(rec);
    }
    let dataset = TruncatedDataset::new(records)?;
    Ok(LoadOutcome { dataset, covariate_names, skipped_rows })
}

/// Write `dataset` as CSV. Finite values use the shortest round-trip
/// representation so reloading reproduces them bit for bit.
pub fn write_dataset<W: Write>(
    writer: W,
    dataset: &TruncatedDataset,
    schema: &Schema,
    sentinels: &Sentinels,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let cov_names: Vec<String> = if schema.covariates.is_empty() {
        (1..=dataset.p()).map(|k| format!("z{k}")).collect()
    } else {
        schema.covariates.clone()
    };
    let mut header = vec![schema.time.clone(), schema.left.clone(), schema.right.clone()];
    header.extend(cov_names);
    wtr.write_record(&header)?;
    for r in dataset.records() {
        let mut row = vec![r.time.to_string()];
        row.push(r.left.finite().map_or_else(|| sentinels.neg_inf.clone(), |v| v.to_string()));
        row.push(r.right.finite().map_or_else(|| sentinels.pos_inf.clone(), |v| v.to_string()));
        row.extend(r.z.iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opts() -> LoadOptions {
        LoadOptions::default()
    }

    #[test]
    fn loads_three_row_file() {
        let csv = "time,left,right,z1\n1,0,5,0.5\n2,1,5,1.5\n3,2,5,2.5\n";
        let out = read_dataset(csv.as_bytes(), &opts()).unwrap();
        let ds = out.dataset;
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.d(), 3);
        assert_eq!(ds.tau(), 3.0);
        assert_eq!(ds.mode(), TruncationMode::Double);
    }

    #[test]
    fn truncation_violation_names_row() {
        let csv = "time,left,right,z1\n1,0,5,0\n4,0,3,1\n";
        match read_dataset(csv.as_bytes(), &opts()) {
            Err(Error::TruncationViolation { row }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn skip_invalid_reports_rows() {
        let csv = "time,left,right,z1\n1,0,5,0\n4,0,3,1\n2,0,5,1\n";
        let o = LoadOptions { skip_invalid: true, ..opts() };
        let out = read_dataset(csv.as_bytes(), &o).unwrap();
        assert_eq!(out.skipped_rows, vec![2]);
        assert_eq!(out.dataset.n(), 2);
    }

    #[test]
    fn all_right_sentinels_is_left_only() {
        let csv = "time,left,right,z1\n1,0,inf,0\n2,1,inf,1\n";
        let ds = read_dataset(csv.as_bytes(), &opts()).unwrap().dataset;
        assert_eq!(ds.mode(), TruncationMode::LeftOnly);
        let csv = "time,left,right,z1\n1,-inf,inf,0\n2,-inf,inf,1\n";
        let ds = read_dataset(csv.as_bytes(), &opts()).unwrap().dataset;
        assert_eq!(ds.mode(), TruncationMode::None);
        let csv = "time,left,right,z1\n1,-inf,3,0\n2,-inf,inf,1\n";
        let ds = read_dataset(csv.as_bytes(), &opts()).unwrap().dataset;
        assert_eq!(ds.mode(), TruncationMode::RightOnly);
    }

    #[test]
    fn missing_column_and_bad_cell() {
        let csv = "time,left,z1\n1,0,0\n";
        assert!(matches!(read_dataset(csv.as_bytes(), &opts()), Err(Error::MissingColumn(c)) if c == "right"));
        let csv = "time,left,right,z1\n1,0,5,abc\n";
        match read_dataset(csv.as_bytes(), &opts()) {
            Err(Error::NonNumericCell { row, column }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "z1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn custom_schema() {
        let csv = "T,entry,exit,age,sex\n1,0,5,60,1\n2,1,5,70,0\n";
        let o = LoadOptions {
            schema: Schema {
                time: "T".into(),
                left: "entry".into(),
                right: "exit".into(),
                covariates: vec!["age".into(), "sex".into()],
            },
            ..opts()
        };
        let out = read_dataset(csv.as_bytes(), &o).unwrap();
        assert_eq!(out.dataset.p(), 2);
        assert_eq!(out.dataset.records()[1].z, vec![70.0, 0.0]);
    }

    #[test]
    fn distinct_times_examples() {
        let rec = |t| SubjectRecord::untruncated(t, vec![0.0]);
        let (ts, tau) = distinct_failure_times(&[rec(2.0), rec(1.0), rec(2.0)]).unwrap();
        assert_eq!(ts, vec![1.0, 2.0]);
        assert_eq!(tau, 2.0);
        let (ts, tau) = distinct_failure_times(&[rec(5.0)]).unwrap();
        assert_eq!((ts, tau), (vec![5.0], 5.0));
        let (ts, _) = distinct_failure_times(&[rec(1.5), rec(1.5), rec(1.5)]).unwrap();
        assert_eq!(ts.len(), 1);
        assert!(matches!(distinct_failure_times(&[]), Err(Error::EmptyDataset)));
    }

    fn record_strategy() -> impl Strategy<Value = SubjectRecord> {
        (0.01f64..100.0, prop::option::of(0.0f64..1.0), prop::option::of(0.0f64..1.0), -5.0f64..5.0, -5.0f64..5.0)
            .prop_map(|(t, l, r, z1, z2)| {
                let left = l.map_or(Bound::Unbounded, |f| Bound::At(t * f));
                let right = r.map_or(Bound::Unbounded, |f| Bound::At(t * (1.0 + f)));
                SubjectRecord::new(t, left, right, vec![z1, z2])
            })
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(records in prop::collection::vec(record_strategy(), 1..30)) {
            let ds = TruncatedDataset::new(records).unwrap();
            let mut buf = Vec::new();
            write_dataset(&mut buf, &ds, &Schema::default(), &Sentinels::default()).unwrap();
            let back = read_dataset(buf.as_slice(), &opts()).unwrap().dataset;
            prop_assert_eq!(&back, &ds);
        }

        #[test]
        fn window_extremes_bracket_times(records in prop::collection::vec(record_strategy(), 1..30)) {
            let ds = TruncatedDataset::new(records).unwrap();
            let min_l = ds.records().iter().map(|r| r.left.as_lower()).fold(f64::INFINITY, f64::min);
            let max_r = ds.records().iter().map(|r| r.right.as_upper()).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_l <= ds.distinct_times()[0]);
            prop_assert!(ds.tau() <= max_r);
            prop_assert!(ds.distinct_times().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
