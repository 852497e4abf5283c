//! Daily container-throughput series: aggregation from gate events, standard
//! scaling, the 50:30:20 temporal split, supervised windows, and patching.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::In => "in",
            Direction::Out => "out",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "in" => Ok(Direction::In),
            "out" => Ok(Direction::Out),
            other => Err(Error::InvalidData(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateEvent {
    pub date: NaiveDate,
    pub direction: Direction,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<GateEvent>,
}

/// Inclusive calendar interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DateRange {
    start: NaiveDate,
    end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::InvalidData(format!("empty date range {start}..={end}")));
        }
        Ok(DateRange { start, end })
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn end(&self) -> NaiveDate {
        self.end
    }

    pub fn num_days(&self) -> usize {
        (self.end - self.start).num_days() as usize + 1
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

/// Counts gate-in and gate-out events per calendar day.
pub fn aggregate_daily(log: &EventLog, range: DateRange) -> Result<CtSeries> {
    let mut counts = vec![0.0; range.num_days()];
    for ev in &log.events {
        if !range.contains(ev.date) {
            return Err(Error::EventOutOfRange {
                timestamp: ev.date,
                start: range.start,
                end: range.end,
            });
        }
        counts[(ev.date - range.start).num_days() as usize] += 1.0;
    }
    CtSeries::new(range.start, counts)
}

/// One non-negative value per consecutive calendar day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtSeries {
    start_date: NaiveDate,
    values: Vec<f64>,
}

impl CtSeries {
    pub fn new(start_date: NaiveDate, values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidData(format!(
                "throughput on {} is {v}; values must be finite and non-negative",
                add_days(start_date, i)
            )));
        }
        Ok(CtSeries { start_date, values })
    }

    pub fn start_date(&self) -> NaiveDate {
        self.start_date
    }

    pub fn end_date(&self) -> NaiveDate {
        add_days(self.start_date, self.values.len().saturating_sub(1))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn date_at(&self, i: usize) -> NaiveDate {
        add_days(self.start_date, i)
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let offset = (date - self.start_date).num_days();
        (offset >= 0 && (offset as usize) < self.values.len()).then_some(offset as usize)
    }

    /// Contiguous sub-series `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> CtSeries {
        CtSeries {
            start_date: self.date_at(range.start),
            values: self.values[range].to_vec(),
        }
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            date: NaiveDate,
            ct: u64,
        }
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
        let mut start = None;
        let mut values = Vec::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            let expected = start.map(|s| add_days(s, values.len()));
            match expected {
                None => start = Some(row.date),
                Some(d) if d != row.date => {
                    return Err(Error::InvalidData(format!(
                        "{}: expected {d} but found {} (gaps are not imputed)",
                        path.display(),
                        row.date
                    )))
                }
                _ => {}
            }
            values.push(row.ct as f64);
        }
        let start = start.ok_or(Error::EmptyInput("ct csv"))?;
        CtSeries::new(start, values)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
        w.write_record(["date", "ct"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([self.date_at(i).to_string(), format!("{}", v.round() as i64)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

impl EventLog {
    /// Reads `timestamp,direction` rows. Timestamps may carry a time part; only
    /// the date is kept.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
        let mut events = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let ts = rec.get(0).unwrap_or_default();
            let date_part = ts.get(..10).unwrap_or(ts);
            let date = NaiveDate::parse_from_str(date_part, "%Y-%m-%d")
                .map_err(|e| Error::InvalidData(format!("bad timestamp {ts:?}: {e}")))?;
            let direction = rec.get(1).unwrap_or_default().parse()?;
            events.push(GateEvent { date, direction });
        }
        Ok(EventLog { events })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
        w.write_record(["timestamp", "direction"])?;
        for ev in &self.events {
            w.write_record([ev.date.to_string(), ev.direction.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub(crate) fn csv_open_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidData(format!("{}: {other:?}", path.display())),
    }
}

pub fn add_days(d: NaiveDate, n: usize) -> NaiveDate {
    d.checked_add_days(Days::new(n as u64)).expect("date in range")
}

/// Standard-scaling statistics fitted on the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl ScalerParams {
    pub fn fit(train_values: &[f64]) -> Result<Self> {
        if train_values.is_empty() {
            return Err(Error::EmptyInput("scaler training values"));
        }
        let n = train_values.len() as f64;
        let mean = train_values.iter().sum::<f64>() / n;
        let var = train_values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !std.is_finite() || std <= 0.0 {
            return Err(Error::DegenerateSeries(format!(
                "training split has zero variance (constant {mean})"
            )));
        }
        Ok(ScalerParams { mean, std })
    }

    #[inline]
    pub fn apply_one(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    #[inline]
    pub fn invert_one(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.apply_one(v)).collect()
    }

    pub fn invert(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.invert_one(v)).collect()
    }
}

/// Segment lengths for the 50:30:20 split: floor for train and validation,
/// remainder to test.
pub fn split_lengths(n: usize) -> (usize, usize, usize) {
    let train = n / 2;
    let val = n * 3 / 10;
    (train, val, n - train - val)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: CtSeries,
    pub val: CtSeries,
    pub test: CtSeries,
}

impl Splits {
    pub fn get(&self, which: Split) -> &CtSeries {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// Contiguous temporal split with every segment non-empty.
pub fn split(series: &CtSeries) -> Result<Splits> {
    split_with_min(series, 1)
}

/// Like [`split`], but requires every segment to hold at least `min_segment`
/// days (use `T + H` so that each split yields a window).
pub fn split_with_min(series: &CtSeries, min_segment: usize) -> Result<Splits> {
    let n = series.len();
    let (a, b, c) = split_lengths(n);
    if a.min(b).min(c) < min_segment.max(1) {
        return Err(Error::SeriesTooShort {
            needed: min_series_len(min_segment.max(1)),
            got: n,
        });
    }
    Ok(Splits {
        train: series.slice(0..a),
        val: series.slice(a..a + b),
        test: series.slice(a + b..n),
    })
}

/// Smallest series length whose every split segment has `min_segment` days.
pub fn min_series_len(min_segment: usize) -> usize {
    (1..)
        .find(|&n| {
            let (a, b, c) = split_lengths(n);
            a.min(b).min(c) >= min_segment
        })
        .expect("some length qualifies")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtWindow {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    /// Date of the last input day.
    pub anchor_date: NaiveDate,
}

/// Sliding windows with step 1 over one split segment. Returns an empty vector
/// when the segment is shorter than `t + h`.
pub fn make_windows(start_date: NaiveDate, segment: &[f64], t: usize, h: usize) -> Vec<CtWindow> {
    if t == 0 || h == 0 || segment.len() < t + h {
        return Vec::new();
    }
    (0..=segment.len() - t - h)
        .map(|s| CtWindow {
            input: segment[s..s + t].to_vec(),
            target: segment[s + t..s + t + h].to_vec(),
            anchor_date: add_days(start_date, s + t - 1),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    /// `P × L_p`, one patch per row.
    pub patches: Matrix,
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchSet {
    pub fn count(&self) -> usize {
        self.patches.rows()
    }
}

/// `floor((T − L_p) / S) + 2`.
pub fn patch_count(input_len: usize, patch_len: usize, stride: usize) -> usize {
    (input_len - patch_len) / stride + 2
}

/// Right-pads the input by repeating its last value `stride` times and cuts
/// patches at offsets `0, S, 2S, …`.
pub fn patch(input: &[f64], patch_len: usize, stride: usize) -> Result<PatchSet> {
    let t = input.len();
    if patch_len == 0 || stride == 0 {
        return Err(Error::InvalidConfig(format!(
            "patch length {patch_len} and stride {stride} must be positive"
        )));
    }
    if patch_len > t {
        return Err(Error::PatchTooLong {
            patch_len,
            input_len: t,
        });
    }
    let last = input[t - 1];
    let padded: Vec<f64> = input.iter().copied().chain(std::iter::repeat_n(last, stride)).collect();
    let p = patch_count(t, patch_len, stride);
    let mut data = Vec::with_capacity(p * patch_len);
    for k in 0..p {
        data.extend_from_slice(&padded[k * stride..k * stride + patch_len]);
    }
    Ok(PatchSet {
        patches: Matrix::from_vec(p, patch_len, data)?,
        patch_len,
        stride,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn aggregate_counts_both_directions() {
        let day = d("2022-01-03");
        let log = EventLog {
            events: vec![
                GateEvent { date: day, direction: Direction::In },
                GateEvent { date: day, direction: Direction::In },
                GateEvent { date: day, direction: Direction::Out },
            ],
        };
        let range = DateRange::new(day, d("2022-01-04")).unwrap();
        let s = aggregate_daily(&log, range).unwrap();
        assert_eq!(s.values(), &[3.0, 0.0]);
    }

    #[test]
    fn aggregate_empty_log() {
        let range = DateRange::new(d("2022-01-01"), d("2022-01-05")).unwrap();
        let s = aggregate_daily(&EventLog::default(), range).unwrap();
        assert_eq!(s.values(), &[0.0; 5]);
    }

    #[test]
    fn aggregate_rejects_out_of_range() {
        let range = DateRange::new(d("2022-01-01"), d("2022-01-02")).unwrap();
        let log = EventLog {
            events: vec![GateEvent { date: d("2022-02-01"), direction: Direction::Out }],
        };
        let err = aggregate_daily(&log, range).unwrap_err();
        assert!(err.to_string().contains("2022-02-01"));
    }

    #[test]
    fn scaler_population_std() {
        let s = ScalerParams::fit(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(matches!(ScalerParams::fit(&[5.0, 5.0, 5.0]), Err(Error::DegenerateSeries(_))));
    }

    #[test]
    fn split_rounding() {
        assert_eq!(split_lengths(100), (50, 30, 20));
        assert_eq!(split_lengths(10), (5, 3, 2));
        assert_eq!(split_lengths(7), (3, 2, 2));
    }

    #[test]
    fn split_too_short_states_minimum() {
        let s = CtSeries::new(d("2022-01-01"), vec![1.0; 30]).unwrap();
        let err = split_with_min(&s, 10).unwrap_err();
        match err {
            Error::SeriesTooShort { needed, got } => {
                assert_eq!(got, 30);
                assert_eq!(needed, min_series_len(10));
                let (a, b, c) = split_lengths(needed);
                assert!(a.min(b).min(c) >= 10);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn windows_enumeration() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let start = d("2022-01-01");
        let w = make_windows(start, &x, 3, 1);
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].input, vec![1.0, 2.0, 3.0]);
        assert_eq!(w[0].target, vec![4.0]);
        assert_eq!(w[0].anchor_date, d("2022-01-03"));
        assert_eq!(w[1].input, vec![2.0, 3.0, 4.0]);
        assert_eq!(w[1].target, vec![5.0]);
        assert_eq!(make_windows(start, &x, 3, 2).len(), 1);
        assert!(make_windows(start, &x[..4], 3, 2).is_empty());
    }

    #[test]
    fn patch_examples() {
        let x: Vec<f64> = (0..14).map(f64::from).collect();
        assert_eq!(patch(&x, 7, 7).unwrap().count(), 3);

        let x: Vec<f64> = (0..28).map(f64::from).collect();
        let ps = patch(&x, 16, 8).unwrap();
        assert_eq!(ps.count(), 3);
        let third = ps.patches.row(2);
        assert_eq!(&third[..12], &x[16..28]);
        assert_eq!(&third[12..], &[27.0; 4]);

        let ps = patch(&[1.0, 2.0, 3.0, 4.0], 4, 2).unwrap();
        assert_eq!(ps.count(), 2);
        assert_eq!(ps.patches.row(1), &[3.0, 4.0, 4.0, 4.0]);

        assert!(matches!(patch(&[1.0, 2.0], 3, 1), Err(Error::PatchTooLong { .. })));
    }

    proptest! {
        #[test]
        fn scaler_round_trip(values in prop::collection::vec(-1e4f64..1e4, 2..50)) {
            prop_assume!(values.iter().any(|v| (v - values[0]).abs() > 1e-6));
            let s = ScalerParams::fit(&values).unwrap();
            let back = s.invert(&s.apply(&values));
            for (a, b) in values.iter().zip(back) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn splits_partition_the_series(n in 4usize..500) {
            let s = CtSeries::new(d("2020-01-01"), (0..n).map(|i| i as f64).collect()).unwrap();
            let sp = split(&s).unwrap();
            let joined: Vec<f64> = sp.train.values().iter()
                .chain(sp.val.values())
                .chain(sp.test.values())
                .copied()
                .collect();
            prop_assert_eq!(joined, s.values().to_vec());
            prop_assert_eq!(sp.val.start_date(), add_days(sp.train.end_date(), 1));
            prop_assert_eq!(sp.test.start_date(), add_days(sp.val.end_date(), 1));
        }

        #[test]
        fn scaler_ignores_val_and_test(n in 20usize..200, bump in 1.0f64..1e3) {
            let base: Vec<f64> = (0..n).map(|i| ((i * 7919) % 97) as f64).collect();
            let s = CtSeries::new(d("2020-01-01"), base.clone()).unwrap();
            let mut perturbed = base;
            let (a, _, _) = split_lengths(n);
            for v in &mut perturbed[a..] {
                *v += bump;
            }
            let p = CtSeries::new(d("2020-01-01"), perturbed).unwrap();
            let f1 = ScalerParams::fit(split(&s).unwrap().train.values()).unwrap();
            let f2 = ScalerParams::fit(split(&p).unwrap().train.values()).unwrap();
            prop_assert_eq!(f1, f2);
        }

        #[test]
        fn patches_reconstruct_prefix(t in 1usize..40, lp_frac in 0.0f64..1.0, s_frac in 0.0f64..1.0) {
            let lp = 1 + ((t - 1) as f64 * lp_frac) as usize;
            let stride = 1 + ((lp - 1) as f64 * s_frac) as usize;
            let x: Vec<f64> = (0..t).map(|i| (i as f64).sin()).collect();
            let ps = patch(&x, lp, stride).unwrap();
            let mut rebuilt = vec![f64::NAN; t];
            for k in 0..ps.count() {
                for j in 0..lp {
                    let pos = k * stride + j;
                    if pos < t {
                        rebuilt[pos] = ps.patches.get(k, j);
                    }
                }
            }
            prop_assert_eq!(rebuilt, x);
        }
    }
}
