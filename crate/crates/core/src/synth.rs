//! Synthetic port world: berth schedules, weather, calendar, gate events,
//! daily throughput and truck turnaround times from a known process.

use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use crate::context::{BerthDay, CalendarDay, DatasetMeta, DayType, PortContext, WeatherDay};
use crate::error::{Error, Result};
use crate::series::{add_days, csv_open_error, CtSeries, Direction, EventLog, GateEvent};

pub const MIN_DAYS: usize = 120;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub port: String,
    pub base_ct: f64,
    pub teu_to_ct: f64,
    pub weekend_mult: f64,
    pub holiday_mult: f64,
    pub rain_threshold: f64,
    pub rain_mult: f64,
    pub wind_threshold: f64,
    pub wind_mult: f64,
    pub noise_std: f64,
    pub tat_intercept: f64,
    pub tat_beta: f64,
    pub tat_noise_std: f64,
    /// Mean vessel arrivals per day.
    pub vessel_rate: f64,
    /// Scheduled TEU per vessel is uniform on `[teu_min, teu_max]`.
    pub teu_min: f64,
    pub teu_max: f64,
    pub holidays: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            n_days: 730,
            start_date: NaiveDate::from_ymd_opt(2022, 1, 1).expect("valid date"),
            port: "Busan Port".into(),
            base_ct: 800.0,
            teu_to_ct: 0.4,
            weekend_mult: 0.7,
            holiday_mult: 0.5,
            rain_threshold: 20.0,
            rain_mult: 0.8,
            wind_threshold: 14.0,
            wind_mult: 0.3,
            noise_std: 60.0,
            tat_intercept: 3.476,
            tat_beta: 0.367,
            tat_noise_std: 0.1,
            vessel_rate: 2.0,
            teu_min: 200.0,
            teu_max: 2600.0,
            holidays: true,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_days < MIN_DAYS {
            return bad(format!("n_days must be at least {MIN_DAYS}, got {}", self.n_days));
        }
        for (name, v) in [
            ("weekend_mult", self.weekend_mult),
            ("holiday_mult", self.holiday_mult),
            ("rain_mult", self.rain_mult),
            ("wind_mult", self.wind_mult),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must be in (0, 1], got {v}"));
            }
        }
        for (name, v) in [("rain_threshold", self.rain_threshold), ("wind_threshold", self.wind_threshold)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("base_ct", self.base_ct),
            ("teu_to_ct", self.teu_to_ct),
            ("noise_std", self.noise_std),
            ("tat_noise_std", self.tat_noise_std),
            ("vessel_rate", self.vessel_rate),
            ("teu_min", self.teu_min),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.teu_max >= self.teu_min && self.teu_max.is_finite()) {
            return bad("teu_max must be at least teu_min".into());
        }
        if !(self.tat_intercept.is_finite() && self.tat_beta.is_finite()) {
            return bad("TAT coefficients must be finite".into());
        }
        Ok(())
    }
}

const HOLIDAYS: [(u32, u32, &str); 10] = [
    (1, 1, "New Year's Day"),
    (2, 1, "Lunar New Year"),
    (3, 1, "Independence Movement Day"),
    (5, 5, "Children's Day"),
    (6, 6, "Memorial Day"),
    (8, 15, "Liberation Day"),
    (9, 29, "Chuseok"),
    (10, 3, "National Foundation Day"),
    (10, 9, "Hangul Day"),
    (12, 25, "Christmas Day"),
];

pub fn holiday_name(date: NaiveDate) -> Option<&'static str> {
    HOLIDAYS
        .iter()
        .find(|(m, d, _)| date.month() == *m && date.day() == *d)
        .map(|(_, _, n)| *n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub ct: CtSeries,
    pub events: EventLog,
    pub berth: Vec<BerthDay>,
    pub weather: Vec<WeatherDay>,
    pub calendar: Vec<CalendarDay>,
    /// Daily average truck turnaround, minutes.
    pub tat: Vec<f64>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Combined day-type, rain and wind multiplier.
pub fn day_multiplier(config: &WorldConfig, calendar: &CalendarDay, weather: &WeatherDay) -> f64 {
    let mut m = match calendar.day_type {
        DayType::Holiday => config.holiday_mult,
        DayType::Weekend => config.weekend_mult,
        DayType::WorkingDay => 1.0,
    };
    if weather.precipitation >= config.rain_threshold {
        m *= config.rain_mult;
    }
    if weather.wind_speed >= config.wind_threshold {
        m *= config.wind_mult;
    }
    m
}

/// Noise-free throughput level `μ` for one day.
pub fn mean_level(config: &WorldConfig, berth: &BerthDay, calendar: &CalendarDay, weather: &WeatherDay) -> f64 {
    (config.base_ct + config.teu_to_ct * berth.volume()) * day_multiplier(config, calendar, weather)
}

pub fn gen_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let n = config.n_days;
    let mut vessel_rng = stream(config.seed, 1);
    let mut teu_rng = stream(config.seed, 2);
    let mut weather_rng = stream(config.seed, 3);
    let mut noise_rng = stream(config.seed, 4);
    let mut tat_rng = stream(config.seed, 5);

    let poisson = (config.vessel_rate > 0.0).then(|| Poisson::new(config.vessel_rate).expect("positive rate"));
    let rain_amount = Exp::new(1.0 / 8.0).expect("positive rate");
    let wind = LogNormal::new(5f64.ln(), 0.5).expect("valid lognormal");
    let temp_noise = Normal::new(0.0, 2.5).expect("valid normal");
    let noise = Normal::new(0.0, config.noise_std).expect("valid normal");
    let tat_noise = Normal::new(0.0, config.tat_noise_std).expect("valid normal");

    let mut berth = Vec::with_capacity(n);
    let mut weather = Vec::with_capacity(n);
    let mut calendar = Vec::with_capacity(n);
    let mut ct = Vec::with_capacity(n);
    let mut tat = Vec::with_capacity(n);
    let mut events = Vec::new();

    for t in 0..n {
        let date = add_days(config.start_date, t);
        let n_vessels = poisson.map_or(0, |p| p.sample(&mut vessel_rng) as u32);
        let mut import = 0.0;
        let mut export = 0.0;
        for _ in 0..n_vessels {
            let teu = config.teu_min + (config.teu_max - config.teu_min) * teu_rng.random::<f64>();
            let share = 0.3 + 0.4 * teu_rng.random::<f64>();
            import += (teu * share).round();
            export += (teu * (1.0 - share)).round();
        }
        let b = BerthDay::new(date, n_vessels, import, export)?;

        let doy = date.ordinal0() as f64;
        let temperature = 14.0 + 11.0 * (2.0 * std::f64::consts::PI * (doy - 105.0) / 365.0).sin()
            + temp_noise.sample(&mut weather_rng);
        let precipitation = if weather_rng.random::<f64>() < 0.3 {
            rain_amount.sample(&mut weather_rng)
        } else {
            0.0
        };
        let wind_speed = wind.sample(&mut weather_rng);
        let w = WeatherDay::new(date, temperature, precipitation, wind_speed)?;

        let holiday = if config.holidays { holiday_name(date) } else { None };
        let c = CalendarDay::infer(date, holiday);

        let mu = mean_level(config, &b, &c, &w);
        let eps = if config.noise_std > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
        let count = (mu + eps).max(0.0).round();
        let eps_tat = if config.tat_noise_std > 0.0 { tat_noise.sample(&mut tat_rng) } else { 0.0 };
        tat.push((config.tat_intercept + config.tat_beta * count.max(1.0).ln() + eps_tat).exp());

        let n_in = (count as u64).div_ceil(2);
        for k in 0..count as u64 {
            events.push(GateEvent {
                date,
                direction: if k < n_in { Direction::In } else { Direction::Out },
            });
        }
        ct.push(count);
        berth.push(b);
        weather.push(w);
        calendar.push(c);
    }

    Ok(World {
        config: config.clone(),
        ct: CtSeries::new(config.start_date, ct)?,
        events: EventLog { events },
        berth,
        weather,
        calendar,
        tat,
    })
}

impl World {
    pub fn port_context(&self) -> PortContext {
        PortContext::from_days(self.berth.clone(), self.weather.clone(), self.calendar.clone())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            port: self.config.port.clone(),
            period_start: self.ct.start_date(),
            period_end: self.ct.end_date(),
        }
    }

    /// Noise-free level `μ_t` for day index `t`.
    pub fn mean_level(&self, t: usize) -> f64 {
        mean_level(&self.config, &self.berth[t], &self.calendar[t], &self.weather[t])
    }

    /// Writes `ct.csv`, `berth.csv`, `weather.csv`, `calendar.csv` and `tat.csv`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.ct.write_csv(dir.join("ct.csv"))?;
        self.port_context().write_dir(dir)?;
        write_tat_csv(dir.join("tat.csv"), self.ct.start_date(), &self.tat)
    }

    pub fn write_events(&self, path: impl AsRef<Path>) -> Result<()> {
        self.events.write_csv(path)
    }
}

pub fn write_tat_csv(path: impl AsRef<Path>, start: NaiveDate, tat: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    w.write_record(["date", "tat"])?;
    for (i, v) in tat.iter().enumerate() {
        w.write_record([add_days(start, i).to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `date,tat` file into a date-ordered vector.
pub fn read_tat_csv(path: impl AsRef<Path>) -> Result<(NaiveDate, Vec<f64>)> {
    #[derive(Deserialize)]
    struct Row {
        date: NaiveDate,
        tat: f64,
    }
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_open_error(path, e))?;
    let mut start = None;
    let mut values = Vec::new();
    for r in rdr.deserialize() {
        let r: Row = r?;
        let first = *start.get_or_insert(r.date);
        if r.date != add_days(first, values.len()) {
            return Err(Error::InvalidData(format!("tat file has a gap or disorder at {}", r.date)));
        }
        values.push(r.tat);
    }
    let start = start.ok_or(Error::EmptyInput("tat file"))?;
    Ok((start, values))
}

/// Conditional mean of the day-`t+h` count given the true exogenous inputs,
/// for `h = 1..=H` after day index `t`.
pub fn oracle_forecast(world: &World, t: usize, horizon: usize) -> Result<Vec<f64>> {
    let n = world.ct.len();
    if t + horizon >= n {
        return Err(Error::InvalidData(format!(
            "oracle horizon {horizon} after day {t} runs past the world end ({n} days)"
        )));
    }
    let sigma = world.config.noise_std;
    let std_normal = StdNormal::standard();
    Ok((1..=horizon)
        .map(|h| {
            let mu = world.mean_level(t + h);
            if sigma == 0.0 {
                mu.max(0.0).round()
            } else {
                let a = mu / sigma;
                mu * std_normal.cdf(a) + sigma * std_normal.pdf(a)
            }
        })
        .collect())
}
