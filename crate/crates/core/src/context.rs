//! Structured port context (berth schedule, weather, calendar) and the two
//! prompt templates compiled from it: the port-knowledge prompt carrying
//! per-step berth and auxiliary lines, and the static statistics prompt.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{add_days, csv_open_error};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerthDay {
    pub date: NaiveDate,
    pub n_vessels: u32,
    pub import_teu: f64,
    pub export_teu: f64,
}

impl BerthDay {
    pub fn new(date: NaiveDate, n_vessels: u32, import_teu: f64, export_teu: f64) -> Result<Self> {
        let b = BerthDay {
            date,
            n_vessels,
            import_teu,
            export_teu,
        };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.import_teu.is_finite()
            && self.export_teu.is_finite()
            && self.import_teu >= 0.0
            && self.export_teu >= 0.0
            && (self.n_vessels > 0 || (self.import_teu == 0.0 && self.export_teu == 0.0));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidData(format!("inconsistent berth day {self:?}")))
        }
    }

    /// Scheduled loading plus unloading volume `I + E`.
    pub fn volume(&self) -> f64 {
        self.import_teu + self.export_teu
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherDay {
    pub date: NaiveDate,
    /// °C
    pub temperature: f64,
    /// mm
    pub precipitation: f64,
    /// m/s
    pub wind_speed: f64,
}

impl WeatherDay {
    pub fn new(date: NaiveDate, temperature: f64, precipitation: f64, wind_speed: f64) -> Result<Self> {
        if !(temperature.is_finite() && precipitation >= 0.0 && wind_speed >= 0.0)
            || !precipitation.is_finite()
            || !wind_speed.is_finite()
        {
            return Err(Error::InvalidData(format!(
                "weather on {date}: precipitation and wind must be finite and non-negative"
            )));
        }
        Ok(WeatherDay {
            date,
            temperature,
            precipitation,
            wind_speed,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DayType {
    #[serde(rename = "working day")]
    WorkingDay,
    #[serde(rename = "weekend")]
    Weekend,
    #[serde(rename = "holiday")]
    Holiday,
}

impl fmt::Display for DayType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DayType::WorkingDay => "working day",
            DayType::Weekend => "weekend",
            DayType::Holiday => "holiday",
        })
    }
}

impl FromStr for DayType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "working day" | "working_day" | "working" => Ok(DayType::WorkingDay),
            "weekend" => Ok(DayType::Weekend),
            "holiday" => Ok(DayType::Holiday),
            other => Err(Error::InvalidData(format!("unknown day type {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalendarDay {
    pub date: NaiveDate,
    pub day_type: DayType,
    pub holiday_name: Option<String>,
}

impl CalendarDay {
    /// Holiday name must be present exactly when the day is a holiday.
    pub fn new(date: NaiveDate, day_type: DayType, holiday_name: Option<String>) -> Result<Self> {
        let holiday_name = holiday_name.filter(|n| !n.trim().is_empty());
        if (day_type == DayType::Holiday) != holiday_name.is_some() {
            return Err(Error::InvalidData(format!(
                "calendar day {date}: holiday name must be given iff the day is a holiday"
            )));
        }
        Ok(CalendarDay {
            date,
            day_type,
            holiday_name,
        })
    }

    /// Saturdays and Sundays are weekends unless a holiday overrides them.
    pub fn infer(date: NaiveDate, holiday: Option<&str>) -> Self {
        let day_type = match holiday {
            Some(_) => DayType::Holiday,
            None if matches!(date.weekday(), Weekday::Sat | Weekday::Sun) => DayType::Weekend,
            None => DayType::WorkingDay,
        };
        CalendarDay {
            date,
            day_type,
            holiday_name: holiday.map(str::to_string),
        }
    }

    pub fn weekday_name(&self) -> &'static str {
        weekday_name(self.date.weekday())
    }
}

pub fn weekday_name(w: Weekday) -> &'static str {
    match w {
        Weekday::Mon => "Monday",
        Weekday::Tue => "Tuesday",
        Weekday::Wed => "Wednesday",
        Weekday::Thu => "Thursday",
        Weekday::Fri => "Friday",
        Weekday::Sat => "Saturday",
        Weekday::Sun => "Sunday",
    }
}

/// Quartile cut points of daily scheduled volume on the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeBuckets {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VolumeLevel {
    Low,
    Average,
    High,
    VeryHigh,
}

impl fmt::Display for VolumeLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VolumeLevel::Low => "low",
            VolumeLevel::Average => "average",
            VolumeLevel::High => "high",
            VolumeLevel::VeryHigh => "very high",
        })
    }
}

/// 25th/50th/75th percentiles (linear interpolation) of daily `I + E`.
pub fn fit_buckets(volumes: &[f64]) -> Result<VolumeBuckets> {
    if volumes.is_empty() {
        return Err(Error::EmptyInput("berth volumes for bucket fitting"));
    }
    if volumes.len() < 4 {
        return Err(Error::InvalidData(format!(
            "bucket fitting needs at least 4 training days, got {}",
            volumes.len()
        )));
    }
    let mut sorted = volumes.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(VolumeBuckets {
        q1: percentile(&sorted, 0.25),
        q2: percentile(&sorted, 0.5),
        q3: percentile(&sorted, 0.75),
    })
}

pub fn fit_buckets_from_days(days: &[BerthDay]) -> Result<VolumeBuckets> {
    let volumes: Vec<f64> = days.iter().map(BerthDay::volume).collect();
    fit_buckets(&volumes)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

impl VolumeBuckets {
    /// Boundaries are inclusive from below: `teu ≤ q1` is low.
    pub fn classify(&self, teu: f64) -> VolumeLevel {
        if teu <= self.q1 {
            VolumeLevel::Low
        } else if teu <= self.q2 {
            VolumeLevel::Average
        } else if teu <= self.q3 {
            VolumeLevel::High
        } else {
            VolumeLevel::VeryHigh
        }
    }
}

pub fn classify_volume(teu: f64, buckets: &VolumeBuckets) -> VolumeLevel {
    buckets.classify(teu)
}

/// Dataset description fields for the opening prompt sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub port: String,
    pub period_start: NaiveDate,
    pub period_end: NaiveDate,
}

impl DatasetMeta {
    fn description(&self) -> String {
        format!(
            "This dataset captures the daily CT, measured by gate-in and gate-out activities at a \
             container terminal in {}, spanning the period from {} to {}.",
            self.port,
            self.period_start.format("%B %Y"),
            self.period_end.format("%B %Y"),
        )
    }
}

const PK_DOMAIN_INFO: &str = "Berth schedule data are used to identify the estimated time of arrival of vessels \
and the anticipated CT. CT generally increases with the number of scheduled vessel arrivals, as a higher number \
of vessels typically requires more operational activity. Throughput often declines on weekends, and public \
holidays owing to reduced road truck activity and may also decrease on days with heavy rainfall because of \
weather-related disruptions.";

const STATIC_DOMAIN_INFO: &str = "Berth schedule data are used to identify the estimated time of arrival of \
vessels and the anticipated CT. CT generally increases with the number of scheduled vessel arrivals, as a higher \
number of vessels typically requires more operational activity. Throughput often declines on weekends and public \
holidays owing to reduced road truck activity and may also decrease on days with heavy rainfall due to \
weather-related disruptions.";

/// Context for one forecasting step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepContext {
    pub calendar: CalendarDay,
    pub berth: BerthDay,
    pub weather: WeatherDay,
}

/// A rendered prompt and the named sections it was assembled from.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub text: String,
    pub sections: Vec<(String, String)>,
    pub horizon: usize,
    pub anchor_date: Option<NaiveDate>,
}

impl PromptBundle {
    fn from_sections(sections: Vec<(String, String)>, horizon: usize, anchor_date: Option<NaiveDate>) -> Self {
        let text = sections.iter().map(|(_, s)| s.as_str()).collect::<Vec<_>>().join("\n");
        PromptBundle {
            text,
            sections,
            horizon,
            anchor_date,
        }
    }

    /// The no-prompt configuration.
    pub fn empty(horizon: usize) -> Self {
        PromptBundle {
            text: String::new(),
            sections: Vec::new(),
            horizon,
            anchor_date: None,
        }
    }

    pub fn section(&self, name: &str) -> Option<&str> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_str())
    }
}

fn fmt_1dp(v: f64) -> String {
    let s = format!("{v:.1}");
    if s == "-0.0" {
        "0.0".into()
    } else {
        s
    }
}

fn fmt_teu(v: f64) -> String {
    format!("{}", v.round().max(0.0) as u64)
}

/// Plain decimal with at most three fractional digits.
fn fmt_stat(v: f64) -> String {
    let r = (v * 1000.0).round() / 1000.0;
    let r = if r == 0.0 { 0.0 } else { r };
    format!("{r}")
}

/// Renders the port-knowledge prompt for the `horizon` days after `anchor_date`.
pub fn render_pk_prompt(
    meta: &DatasetMeta,
    input_len: usize,
    horizon: usize,
    anchor_date: NaiveDate,
    steps: &[StepContext],
    buckets: &VolumeBuckets,
) -> Result<PromptBundle> {
    for h in 1..=horizon {
        let date = add_days(anchor_date, h);
        match steps.get(h - 1) {
            Some(s) if s.calendar.date == date && s.berth.date == date && s.weather.date == date => {}
            _ => return Err(Error::MissingContext { step: h, date }),
        }
    }
    let steps = &steps[..horizon];

    let task = format!(
        "The input data consist of historical CT. Your task is to forecast the next {horizon} steps based on \
         the previous {input_len} steps, in collaboration with the provided prompting information"
    );

    let mut berth_lines = Vec::with_capacity(horizon + 1);
    let mut total_vessels: u64 = 0;
    let mut total_volume: u64 = 0;
    for (i, s) in steps.iter().enumerate() {
        let date = s.calendar.date;
        let volume = s.berth.volume();
        let rendered_volume = fmt_teu(volume);
        total_vessels += u64::from(s.berth.n_vessels);
        total_volume += volume.round().max(0.0) as u64;
        berth_lines.push(format!(
            "Forecasting step {} ({}, {}) {} is expected to have a {} operational volume, as {} vessel(s) are \
             scheduled to arrive, with an estimated loading/unloading volume of {} TEUs.",
            i + 1,
            date,
            s.calendar.weekday_name(),
            date,
            buckets.classify(volume),
            s.berth.n_vessels,
            rendered_volume,
        ));
    }
    berth_lines.push(format!(
        "After next {horizon} days, Estimated vessels to arrival are {total_vessels}, Volumes are {total_volume}"
    ));

    let aux_lines: Vec<String> = steps
        .iter()
        .map(|s| {
            let day = match (&s.calendar.day_type, &s.calendar.holiday_name) {
                (DayType::Holiday, Some(name)) => {
                    format!("{} is a holiday, and the name of the holiday is {}.", s.calendar.date, name)
                }
                (t, _) => format!("{} is a {}.", s.calendar.date, t),
            };
            format!(
                "{day} The forecasted temperature of {} is {} °C, with a precipitation of {} mm and an expected \
                 wind speed of {} m/s.",
                meta.port,
                fmt_1dp(s.weather.temperature),
                fmt_1dp(s.weather.precipitation),
                fmt_1dp(s.weather.wind_speed),
            )
        })
        .collect();

    let sections = vec![
        ("Data Description".to_string(), meta.description()),
        ("Task Description".to_string(), task),
        ("Domain Information".to_string(), PK_DOMAIN_INFO.to_string()),
        ("Berth Schedule".to_string(), berth_lines.join(" ")),
        ("Auxiliary Information".to_string(), aux_lines.join(" ")),
    ];
    Ok(PromptBundle::from_sections(sections, horizon, Some(anchor_date)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Upward,
    Downward,
}

impl fmt::Display for Trend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trend::Upward => "upward",
            Trend::Downward => "downward",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub trend: Trend,
    pub top_lags: Vec<usize>,
    /// Set when the input is constant and autocorrelation is undefined.
    pub degenerate: bool,
}

const ACF_TIE_TOL: f64 = 1e-12;

/// Sample autocorrelation at lag `k`.
fn lag_acf(x: &[f64], mean: f64, denom: f64, k: usize) -> f64 {
    let n = x.len();
    let num: f64 = (0..n - k).map(|t| (x[t] - mean) * (x[t + k] - mean)).sum();
    num / denom
}

/// Summary statistics of one unscaled input window.
pub fn window_stats(input: &[f64]) -> Result<WindowStats> {
    let n = input.len();
    if n < 8 {
        return Err(Error::InvalidData(format!("window statistics need at least 8 values, got {n}")));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("window_stats input".into()));
    }
    let mut sorted = input.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };

    let mean = input.iter().sum::<f64>() / n as f64;
    let t_mean = (n - 1) as f64 / 2.0;
    let slope_num: f64 = input.iter().enumerate().map(|(i, v)| (i as f64 - t_mean) * (v - mean)).sum();
    let trend = if slope_num >= 0.0 { Trend::Upward } else { Trend::Downward };

    let denom: f64 = input.iter().map(|v| (v - mean).powi(2)).sum();
    let (top_lags, degenerate) = if denom == 0.0 {
        (vec![1, 2, 3, 4, 5], true)
    } else {
        let max_lag = (n - 1).min(30);
        let mut scored: Vec<(usize, f64)> = (1..=max_lag)
            .map(|k| (k, lag_acf(input, mean, denom, k)))
            .collect();
        // Ranked by signed ACF so anti-phase lags do not outrank the period;
        // among values within the tie tolerance of the best, the smaller lag wins.
        let mut picked = Vec::with_capacity(5);
        while picked.len() < 5 && !scored.is_empty() {
            let best = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let pos = scored
                .iter()
                .position(|s| best - s.1 <= ACF_TIE_TOL)
                .expect("the maximum is present");
            picked.push(scored.remove(pos).0);
        }
        (picked, false)
    };

    Ok(WindowStats {
        min: sorted[0],
        max: sorted[n - 1],
        median,
        trend,
        top_lags,
        degenerate,
    })
}

/// Renders the static prompt: dataset description, instruction, domain
/// knowledge and input statistics, with no berth or weather content.
pub fn render_static_prompt(meta: &DatasetMeta, input_len: usize, horizon: usize, stats: &WindowStats) -> PromptBundle {
    let lags = stats.top_lags.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", ");
    let sections = vec![
        ("Domain".to_string(), meta.description()),
        (
            "Instruction".to_string(),
            format!("Forecast the next {horizon} steps given the previous {input_len} steps information attached."),
        ),
        ("Domain Information".to_string(), STATIC_DOMAIN_INFO.to_string()),
        (
            "Statistics".to_string(),
            format!(
                "min value {}, max value {}, median value {}, the trend of input is {}, top 5 lags are {}",
                fmt_stat(stats.min),
                fmt_stat(stats.max),
                fmt_stat(stats.median),
                stats.trend,
                lags
            ),
        ),
    ];
    PromptBundle::from_sections(sections, horizon, None)
}

/// Berth, weather and calendar feeds keyed by date.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PortContext {
    pub berth: BTreeMap<NaiveDate, BerthDay>,
    pub weather: BTreeMap<NaiveDate, WeatherDay>,
    pub calendar: BTreeMap<NaiveDate, CalendarDay>,
}

impl PortContext {
    pub fn from_days(berth: Vec<BerthDay>, weather: Vec<WeatherDay>, calendar: Vec<CalendarDay>) -> Self {
        PortContext {
            berth: berth.into_iter().map(|b| (b.date, b)).collect(),
            weather: weather.into_iter().map(|w| (w.date, w)).collect(),
            calendar: calendar.into_iter().map(|c| (c.date, c)).collect(),
        }
    }

    pub fn step(&self, date: NaiveDate) -> Option<StepContext> {
        Some(StepContext {
            calendar: self.calendar.get(&date)?.clone(),
            berth: self.berth.get(&date)?.clone(),
            weather: self.weather.get(&date)?.clone(),
        })
    }

    /// Context triples for the `horizon` days after `anchor`.
    pub fn steps_after(&self, anchor: NaiveDate, horizon: usize) -> Result<Vec<StepContext>> {
        (1..=horizon)
            .map(|h| {
                let date = add_days(anchor, h);
                self.step(date).ok_or(Error::MissingContext { step: h, date })
            })
            .collect()
    }

    pub fn berth_days_between(&self, start: NaiveDate, end: NaiveDate) -> Vec<BerthDay> {
        self.berth.range(start..=end).map(|(_, b)| b.clone()).collect()
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(PortContext::from_days(
            read_berth_csv(dir.join("berth.csv"))?,
            read_weather_csv(dir.join("weather.csv"))?,
            read_calendar_csv(dir.join("calendar.csv"))?,
        ))
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_berth_csv(dir.join("berth.csv"), self.berth.values())?;
        write_weather_csv(dir.join("weather.csv"), self.weather.values())?;
        write_calendar_csv(dir.join("calendar.csv"), self.calendar.values())
    }
}

pub fn read_berth_csv(path: impl AsRef<Path>) -> Result<Vec<BerthDay>> {
    #[derive(Deserialize)]
    struct Row {
        date: NaiveDate,
        n_vessels: u32,
        import_teu: f64,
        export_teu: f64,
    }
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
    rdr.deserialize()
        .map(|r| {
            let r: Row = r?;
            BerthDay::new(r.date, r.n_vessels, r.import_teu, r.export_teu)
        })
        .collect()
}

pub fn write_berth_csv<'a>(path: impl AsRef<Path>, days: impl IntoIterator<Item = &'a BerthDay>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    w.write_record(["date", "n_vessels", "import_teu", "export_teu"])?;
    for b in days {
        w.write_record([
            b.date.to_string(),
            b.n_vessels.to_string(),
            b.import_teu.to_string(),
            b.export_teu.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_weather_csv(path: impl AsRef<Path>) -> Result<Vec<WeatherDay>> {
    #[derive(Deserialize)]
    struct Row {
        date: NaiveDate,
        temp_c: f64,
        precip_mm: f64,
        wind_ms: f64,
    }
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
    rdr.deserialize()
        .map(|r| {
            let r: Row = r?;
            WeatherDay::new(r.date, r.temp_c, r.precip_mm, r.wind_ms)
        })
        .collect()
}

pub fn write_weather_csv<'a>(path: impl AsRef<Path>, days: impl IntoIterator<Item = &'a WeatherDay>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    w.write_record(["date", "temp_c", "precip_mm", "wind_ms"])?;
    for d in days {
        w.write_record([
            d.date.to_string(),
            d.temperature.to_string(),
            d.precipitation.to_string(),
            d.wind_speed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_calendar_csv(path: impl AsRef<Path>) -> Result<Vec<CalendarDay>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
    rdr.records()
        .map(|r| {
            let r = r?;
            let date: NaiveDate = r
                .get(0)
                .unwrap_or_default()
                .parse()
                .map_err(|e| Error::InvalidData(format!("calendar date: {e}")))?;
            let day_type: DayType = r.get(1).unwrap_or_default().parse()?;
            let name = r.get(2).map(str::to_string);
            CalendarDay::new(date, day_type, name)
        })
        .collect()
}

pub fn write_calendar_csv<'a>(path: impl AsRef<Path>, days: impl IntoIterator<Item = &'a CalendarDay>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    w.write_record(["date", "day_type", "holiday_name"])?;
    for d in days {
        w.write_record([
            d.date.to_string(),
            d.day_type.to_string(),
            d.holiday_name.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
