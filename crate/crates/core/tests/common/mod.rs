#![allow(dead_code)]

use std::path::PathBuf;

use chrono::NaiveDate;
use pk_timellm::context::*;

pub fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden_meta() -> DatasetMeta {
    DatasetMeta {
        port: "Busan Port".into(),
        period_start: date(2022, 1, 1),
        period_end: date(2022, 12, 31),
    }
}

pub const GOLDEN_T: usize = 14;

/// Three forecast days after Thursday 2022-09-08: a working day, a holiday
/// and a Sunday, with every volume bucket boundary case nearby.
pub fn golden_steps() -> Vec<StepContext> {
    let rows = [
        (date(2022, 9, 9), DayType::WorkingDay, None, (2, 812.4, 955.0), (24.35, 0.0, 3.2)),
        (date(2022, 9, 10), DayType::Holiday, Some("Harvest Festival"), (0, 0.0, 0.0), (22.0, 31.5, 15.04)),
        (date(2022, 9, 11), DayType::Weekend, None, (3, 1500.6, 1200.2), (-0.04, 2.25, 0.0)),
    ];
    rows.into_iter()
        .map(|(d, ty, name, (n, i, e), (t, p, w))| StepContext {
            calendar: CalendarDay::new(d, ty, name.map(String::from)).unwrap(),
            berth: BerthDay::new(d, n, i, e).unwrap(),
            weather: WeatherDay::new(d, t, p, w).unwrap(),
        })
        .collect()
}

pub fn golden_buckets() -> VolumeBuckets {
    VolumeBuckets {
        q1: 800.0,
        q2: 1500.0,
        q3: 2500.0,
    }
}

pub fn golden_input() -> Vec<f64> {
    vec![
        812.0, 905.0, 1003.0, 987.0, 702.0, 655.0, 930.0, 844.0, 951.0, 1012.0, 990.0, 731.0, 640.0, 961.0,
    ]
}

pub fn render_golden_pk() -> PromptBundle {
    render_pk_prompt(&golden_meta(), GOLDEN_T, 3, date(2022, 9, 8), &golden_steps(), &golden_buckets()).unwrap()
}

pub fn render_golden_static() -> PromptBundle {
    let stats = window_stats(&golden_input()).unwrap();
    render_static_prompt(&golden_meta(), GOLDEN_T, 3, &stats)
}
