use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::BufWriter;
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, Days, NaiveDate};
use serde::Deserialize;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const CASES_FILE: &str = "cases.csv";
pub const MOBILITY_FILE: &str = "mobility.csv";
pub const POPULATION_FILE: &str = "population.csv";

/// Aligned daily case counts, origin-destination mobility and static
/// population for `N` regions over `T` consecutive days.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelDataset {
    region_ids: Vec<String>,
    dates: Vec<NaiveDate>,
    daily_cases: Vec<Vec<f64>>,
    cumulative_cases: Vec<Vec<f64>>,
    mobility: Vec<Tensor>,
    population: Vec<f64>,
}

impl PanelDataset {
    /// Builds a panel from daily counts; cumulative counts are accumulated
    /// from zero before the first day.
    pub fn from_daily(
        region_ids: Vec<String>,
        start: NaiveDate,
        daily_cases: Vec<Vec<f64>>,
        mobility: Vec<Tensor>,
        population: Vec<f64>,
    ) -> Result<Self> {
        let n = region_ids.len();
        let t = daily_cases.len();
        if n == 0 || t == 0 {
            return Err(Error::Validation("panel needs at least one region and one day".into()));
        }
        if population.len() != n {
            return Err(Error::Validation(format!(
                "population has {} entries for {n} regions",
                population.len()
            )));
        }
        if let Some((i, p)) = population.iter().enumerate().find(|(_, p)| !(**p > 0.0) || !p.is_finite()) {
            return Err(Error::Validation(format!(
                "population of region {} must be positive, got {p}",
                region_ids[i]
            )));
        }
        if mobility.len() != t {
            return Err(Error::Validation(format!(
                "{} mobility matrices for {t} days",
                mobility.len()
            )));
        }
        let unique: BTreeSet<&String> = region_ids.iter().collect();
        if unique.len() != n {
            return Err(Error::Validation("duplicate region ids".into()));
        }
        let mut dates = Vec::with_capacity(t);
        let mut cumulative = Vec::with_capacity(t);
        let mut running = vec![0.0; n];
        for (day, row) in daily_cases.iter().enumerate() {
            let date = start
                .checked_add_days(Days::new(day as u64))
                .ok_or_else(|| Error::Validation("date overflow".into()))?;
            if row.len() != n {
                return Err(Error::Validation(format!("day {date} has {} case values for {n} regions", row.len())));
            }
            for (r, &v) in row.iter().enumerate() {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "negative or non-finite case count {v} for {} on {date}",
                        region_ids[r]
                    )));
                }
                running[r] += v;
            }
            let m = &mobility[day];
            if m.shape() != (n, n) {
                return Err(Error::Shape {
                    op: "panel mobility",
                    lhs: m.shape(),
                    rhs: (n, n),
                });
            }
            if m.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Validation(format!("negative or non-finite mobility on {date}")));
            }
            dates.push(date);
            cumulative.push(running.clone());
        }
        Ok(PanelDataset {
            region_ids,
            dates,
            daily_cases,
            cumulative_cases: cumulative,
            mobility: mobility.into_iter().map(|m| m.detached()).collect(),
            population,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn region_index(&self, id: &str) -> Option<usize> {
        self.region_ids.iter().position(|r| r == id)
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn start_date(&self) -> NaiveDate {
        self.dates[0]
    }

    pub fn end_date(&self) -> NaiveDate {
        *self.dates.last().expect("panel is nonempty")
    }

    /// Index of `date`, if it falls inside the panel.
    pub fn day_index(&self, date: NaiveDate) -> Option<usize> {
        let offset = (date - self.start_date()).num_days();
        (offset >= 0 && (offset as usize) < self.n_days()).then_some(offset as usize)
    }

    pub fn daily_cases(&self) -> &[Vec<f64>] {
        &self.daily_cases
    }

    pub fn cumulative_cases(&self) -> &[Vec<f64>] {
        &self.cumulative_cases
    }

    pub fn mobility(&self) -> &[Tensor] {
        &self.mobility
    }

    pub fn population(&self) -> &[f64] {
        &self.population
    }

    /// Days `range` of the panel; cumulative counts keep their original offsets.
    pub fn slice_days(&self, range: Range<usize>) -> Result<PanelDataset> {
        if range.start >= range.end || range.end > self.n_days() {
            return Err(Error::Domain(format!(
                "day range {range:?} outside panel of {} days",
                self.n_days()
            )));
        }
        Ok(PanelDataset {
            region_ids: self.region_ids.clone(),
            dates: self.dates[range.clone()].to_vec(),
            daily_cases: self.daily_cases[range.clone()].to_vec(),
            cumulative_cases: self.cumulative_cases[range.clone()].to_vec(),
            mobility: self.mobility[range].to_vec(),
            population: self.population.clone(),
        })
    }

    /// Writes `cases.csv`, `mobility.csv` and `population.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CASES_FILE);
        let mut w = csv_writer(&path)?;
        w.write_record(["date", "region", "new_cases"])?;
        for (t, date) in self.dates.iter().enumerate() {
            for (r, id) in self.region_ids.iter().enumerate() {
                w.write_record([date.to_string(), id.clone(), self.daily_cases[t][r].to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join(MOBILITY_FILE);
        let mut w = csv_writer(&path)?;
        w.write_record(["date", "origin", "destination", "count"])?;
        let n = self.n_regions();
        for (t, date) in self.dates.iter().enumerate() {
            let all_zero = self.mobility[t].data().iter().all(|&v| v == 0.0);
            for i in 0..n {
                for j in 0..n {
                    let v = self.mobility[t].get(i, j);
                    // an explicit zero row keeps fully idle days present in the file
                    if v != 0.0 || (all_zero && i == 0 && j == 0) {
                        w.write_record([
                            date.to_string(),
                            self.region_ids[i].clone(),
                            self.region_ids[j].clone(),
                            v.to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join(POPULATION_FILE);
        let mut w = csv_writer(&path)?;
        w.write_record(["region", "population"])?;
        for (id, p) in self.region_ids.iter().zip(&self.population) {
            w.write_record([id.clone(), p.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

/// Result of [`load_panel`]: the validated panel plus non-fatal findings.
#[derive(Debug, Clone)]
pub struct LoadedPanel {
    pub panel: PanelDataset,
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct CaseRow {
    date: String,
    region: String,
    new_cases: f64,
    #[serde(default)]
    cumulative_cases: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct MobilityRow {
    date: String,
    origin: String,
    destination: String,
    count: f64,
}

#[derive(Debug, Deserialize)]
struct PopulationRow {
    region: String,
    population: f64,
}

fn parse_date(s: &str, file: &Path, line: u64) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| {
        Error::Ingest(format!("{}:{line}: bad date `{s}`: {e}", file.display()))
    })
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f))
}

const MAX_LISTED: usize = 20;

fn list_gaps<T: std::fmt::Display>(items: &[T]) -> String {
    let shown: Vec<String> = items.iter().take(MAX_LISTED).map(|d| d.to_string()).collect();
    if items.len() > MAX_LISTED {
        format!("{} (and {} more)", shown.join(", "), items.len() - MAX_LISTED)
    } else {
        shown.join(", ")
    }
}

/// Reads and validates the three panel files.
///
/// Region order follows `population.csv`. Cumulative counts are always
/// recomputed from daily counts; a disagreeing `cumulative_cases` column in
/// `cases.csv` only produces a warning.
pub fn load_panel(cases_path: &Path, mobility_path: &Path, population_path: &Path) -> Result<LoadedPanel> {
    let mut warnings = Vec::new();

    let mut region_ids = Vec::new();
    let mut population = Vec::new();
    let mut rdr = reader(population_path)?;
    for rec in rdr.deserialize::<PopulationRow>() {
        let row = rec?;
        if region_ids.contains(&row.region) {
            return Err(Error::Ingest(format!("duplicate region `{}` in population file", row.region)));
        }
        if !(row.population > 0.0) || !row.population.is_finite() {
            return Err(Error::Validation(format!(
                "population of `{}` must be positive, got {}",
                row.region, row.population
            )));
        }
        region_ids.push(row.region);
        population.push(row.population);
    }
    if region_ids.len() < 2 {
        return Err(Error::Ingest("population file must list at least two regions".into()));
    }
    let index: HashMap<&str, usize> = region_ids.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    let n = region_ids.len();

    // date -> region -> (new, provided cumulative)
    let mut cases: BTreeMap<NaiveDate, Vec<Option<(f64, Option<f64>)>>> = BTreeMap::new();
    let mut rdr = reader(cases_path)?;
    for (i, rec) in rdr.deserialize::<CaseRow>().enumerate() {
        let row = rec?;
        let date = parse_date(&row.date, cases_path, i as u64 + 2)?;
        let &r = index.get(row.region.as_str()).ok_or_else(|| {
            Error::Ingest(format!("cases file mentions unknown region `{}` on {date}", row.region))
        })?;
        if !(row.new_cases >= 0.0) || !row.new_cases.is_finite() {
            return Err(Error::Validation(format!(
                "negative or non-finite new_cases {} for `{}` on {date}",
                row.new_cases, row.region
            )));
        }
        let slot = &mut cases.entry(date).or_insert_with(|| vec![None; n])[r];
        if slot.is_some() {
            return Err(Error::Ingest(format!("duplicate case row for `{}` on {date}", row.region)));
        }
        *slot = Some((row.new_cases, row.cumulative_cases));
    }
    let (Some(&first), Some(&last)) = (cases.keys().next(), cases.keys().next_back()) else {
        return Err(Error::Ingest("cases file has no rows".into()));
    };
    let span = (last - first).num_days() as usize + 1;
    let all_dates: Vec<NaiveDate> = (0..span).map(|d| first + Days::new(d as u64)).collect();
    let missing_dates: Vec<NaiveDate> = all_dates.iter().filter(|d| !cases.contains_key(d)).copied().collect();
    if !missing_dates.is_empty() {
        return Err(Error::Ingest(format!(
            "cases file is missing dates: {}",
            list_gaps(&missing_dates)
        )));
    }
    let mut gaps = Vec::new();
    for (date, row) in &cases {
        for (r, v) in row.iter().enumerate() {
            if v.is_none() {
                gaps.push(format!("{date}/{}", region_ids[r]));
            }
        }
    }
    if !gaps.is_empty() {
        return Err(Error::Ingest(format!("cases file is missing region-days: {}", list_gaps(&gaps))));
    }

    let mut mobility: Vec<Tensor> = vec![Tensor::zeros(n, n); span];
    let mut seen = vec![false; span];
    let mut rdr = reader(mobility_path)?;
    let mut pairs_seen: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
    for (i, rec) in rdr.deserialize::<MobilityRow>().enumerate() {
        let row = rec?;
        let date = parse_date(&row.date, mobility_path, i as u64 + 2)?;
        let day = (date - first).num_days();
        if day < 0 || day as usize >= span {
            return Err(Error::Ingest(format!(
                "mobility date {date} outside case date range {first}..={last}"
            )));
        }
        let day = day as usize;
        let lookup = |id: &str| {
            index.get(id).copied().ok_or_else(|| {
                Error::Ingest(format!("mobility file mentions unknown region `{id}` on {date}"))
            })
        };
        let (o, d) = (lookup(&row.origin)?, lookup(&row.destination)?);
        if !(row.count >= 0.0) || !row.count.is_finite() {
            return Err(Error::Validation(format!(
                "negative or non-finite mobility {} for {}->{} on {date}",
                row.count, row.origin, row.destination
            )));
        }
        if !pairs_seen.insert((day, o, d)) {
            return Err(Error::Ingest(format!(
                "duplicate mobility row {}->{} on {date}",
                row.origin, row.destination
            )));
        }
        mobility[day].set(o, d, row.count);
        seen[day] = true;
    }
    let missing_mob: Vec<NaiveDate> = all_dates.iter().zip(&seen).filter(|(_, s)| !**s).map(|(d, _)| *d).collect();
    if !missing_mob.is_empty() {
        return Err(Error::Ingest(format!(
            "mobility file is missing dates: {}",
            list_gaps(&missing_mob)
        )));
    }

    let mut daily = Vec::with_capacity(span);
    let mut running = vec![0.0; n];
    for (date, row) in &cases {
        let mut day = Vec::with_capacity(n);
        for (r, v) in row.iter().enumerate() {
            let (new, provided) = v.expect("gaps checked");
            running[r] += new;
            if let Some(c) = provided {
                if (c - running[r]).abs() > 1e-9 * running[r].abs().max(1.0) {
                    let msg = format!(
                        "cumulative_cases for `{}` on {date} is {c}, recomputed {}; using recomputed value",
                        region_ids[r], running[r]
                    );
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
            }
            day.push(new);
        }
        daily.push(day);
    }

    let panel = PanelDataset::from_daily(region_ids, first, daily, mobility, population)?;
    Ok(LoadedPanel { panel, warnings })
}

/// Loads `cases.csv`, `mobility.csv` and `population.csv` from one directory.
pub fn load_panel_dir(dir: &Path) -> Result<LoadedPanel> {
    load_panel(&dir.join(CASES_FILE), &dir.join(MOBILITY_FILE), &dir.join(POPULATION_FILE))
}

/// Monday = 0 … Sunday = 6.
pub fn weekday_index(date: NaiveDate) -> usize {
    date.weekday().num_days_from_monday() as usize
}
