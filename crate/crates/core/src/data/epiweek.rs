use chrono::{Datelike, Days, NaiveDate};
use serde::Serialize;

use crate::error::{Error, Result};

/// Sunday that opens the epidemiological week containing `date`.
pub fn epiweek_start(date: NaiveDate) -> NaiveDate {
    let back = date.weekday().num_days_from_sunday() as u64;
    date - Days::new(back)
}

/// Per-region totals over one Sunday–Saturday week.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpiWeek {
    pub start: NaiveDate,
    /// Number of days of the week present in the input.
    pub days: usize,
    pub partial: bool,
    pub totals: Vec<f64>,
}

/// Sums `daily` (T×N) over epi-weeks. Weeks cut by either end of the span
/// are returned with `partial` set.
pub fn epiweek_aggregate(daily: &[Vec<f64>], dates: &[NaiveDate]) -> Result<Vec<EpiWeek>> {
    if daily.len() != dates.len() {
        return Err(Error::Contract(format!(
            "{} daily rows for {} dates",
            daily.len(),
            dates.len()
        )));
    }
    for w in dates.windows(2) {
        if w[1] != w[0] + Days::new(1) {
            return Err(Error::Domain(format!("dates jump from {} to {}", w[0], w[1])));
        }
    }
    let mut weeks: Vec<EpiWeek> = Vec::new();
    for (row, &date) in daily.iter().zip(dates) {
        let start = epiweek_start(date);
        match weeks.last_mut() {
            Some(w) if w.start == start => {
                if row.len() != w.totals.len() {
                    return Err(Error::Contract(format!("row width changes on {date}")));
                }
                for (t, v) in w.totals.iter_mut().zip(row) {
                    *t += v;
                }
                w.days += 1;
            }
            _ => weeks.push(EpiWeek {
                start,
                days: 1,
                partial: false,
                totals: row.clone(),
            }),
        }
    }
    for w in &mut weeks {
        w.partial = w.days < 7;
    }
    Ok(weeks)
}
