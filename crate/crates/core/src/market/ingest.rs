use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{DayObjective, Market, ObservedDay, PreferenceParams, Provider, UserGroup};
use crate::equilibrium::FlowMatrix;
use crate::error::{Error, Result};

const USAGE_COLUMNS: [&str; 6] = [
    "Date",
    "app_name",
    "model_name",
    "model_usage_token",
    "output_speed",
    "time_to_first_token",
];

const PERFORMANCE_COLUMNS: [&str; 5] = [
    "Date",
    "model_name",
    "total_token_usage_M",
    "output_speed",
    "time_to_first_token",
];

/// One row of the per-app usage table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub date: NaiveDate,
    pub app: String,
    pub model: String,
    /// Raw token count.
    pub tokens: u64,
    pub output_speed: f64,
    pub ttft: f64,
}

/// One row of the per-model performance table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRecord {
    pub date: NaiveDate,
    pub model: String,
    /// Millions of tokens.
    pub usage_m: f64,
    pub output_speed: f64,
    pub ttft: f64,
}

pub fn load_usage_csv(path: &Path) -> Result<Vec<UsageRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_usage(file)
}

pub fn load_performance_csv(path: &Path) -> Result<Vec<PerformanceRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_performance(file)
}

pub(crate) fn parse_usage<R: Read>(input: R) -> Result<Vec<UsageRecord>> {
    let (index, rows) = read_table(input, &USAGE_COLUMNS)?;
    rows.into_iter()
        .map(|(row, rec)| {
            let field = |c: usize| rec.get(index[c]).unwrap_or("").trim();
            Ok(UsageRecord {
                date: parse_date(field(0), row)?,
                app: parse_name(field(1), "app_name", row)?,
                model: parse_name(field(2), "model_name", row)?,
                tokens: parse_count(field(3), "model_usage_token", row)?,
                output_speed: parse_decimal(field(4), "output_speed", row)?,
                ttft: parse_decimal(field(5), "time_to_first_token", row)?,
            })
        })
        .collect()
}

pub(crate) fn parse_performance<R: Read>(input: R) -> Result<Vec<PerformanceRecord>> {
    let (index, rows) = read_table(input, &PERFORMANCE_COLUMNS)?;
    rows.into_iter()
        .map(|(row, rec)| {
            let field = |c: usize| rec.get(index[c]).unwrap_or("").trim();
            Ok(PerformanceRecord {
                date: parse_date(field(0), row)?,
                model: parse_name(field(1), "model_name", row)?,
                usage_m: parse_decimal(field(2), "total_token_usage_M", row)?,
                output_speed: parse_decimal(field(3), "output_speed", row)?,
                ttft: parse_decimal(field(4), "time_to_first_token", row)?,
            })
        })
        .collect()
}

/// Checks the header against `columns` and returns, per expected column,
/// its position in the file, plus the data rows numbered from 1.
fn read_table<R: Read>(
    input: R,
    columns: &[&str],
) -> Result<(Vec<usize>, Vec<(usize, csv::StringRecord)>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let mut index = Vec::with_capacity(columns.len());
    for col in columns {
        match names.iter().position(|h| h == col) {
            Some(k) => index.push(k),
            None => return Err(Error::MissingColumn(col.to_string())),
        }
    }
    if let Some(extra) = names.iter().find(|h| !columns.contains(h)) {
        return Err(Error::UnexpectedColumn(extra.to_string()));
    }
    let mut rows = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != names.len() {
            return Err(Error::Parse {
                row,
                message: format!("expected {} fields, found {}", names.len(), rec.len()),
            });
        }
        rows.push((row, rec));
    }
    Ok((index, rows))
}

fn parse_date(s: &str, row: usize) -> Result<NaiveDate> {
    let b = s.as_bytes();
    let shaped = b.len() == 10
        && b[4] == b'-'
        && b[7] == b'-'
        && b.iter()
            .enumerate()
            .all(|(k, c)| k == 4 || k == 7 || c.is_ascii_digit());
    if !shaped {
        return Err(Error::Parse {
            row,
            message: format!("date `{s}` is not YYYY-MM-DD"),
        });
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| Error::Parse {
        row,
        message: format!("date `{s}`: {e}"),
    })
}

fn parse_name(s: &str, column: &str, row: usize) -> Result<String> {
    if s.is_empty() {
        return Err(Error::Parse {
            row,
            message: format!("{column} is empty"),
        });
    }
    Ok(s.to_string())
}

fn parse_count(s: &str, column: &str, row: usize) -> Result<u64> {
    let v: i128 = s.parse().map_err(|_| Error::Parse {
        row,
        message: format!("{column} `{s}` is not an integer"),
    })?;
    if v < 0 {
        return Err(Error::Validation {
            row: Some(row),
            message: format!("{column} is negative ({v})"),
        });
    }
    u64::try_from(v).map_err(|_| Error::Parse {
        row,
        message: format!("{column} `{s}` is out of range"),
    })
}

fn parse_decimal(s: &str, column: &str, row: usize) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| Error::Parse {
        row,
        message: format!("{column} `{s}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            message: format!("{column} `{s}` is not finite"),
        });
    }
    if v < 0.0 {
        return Err(Error::Validation {
            row: Some(row),
            message: format!("{column} is negative ({v})"),
        });
    }
    Ok(v)
}

/// `α = T / v`: total tokens served over the window divided by the mean
/// generation speed. The result carries the unit of `total_tokens`.
pub fn capacity_from_usage(total_tokens: f64, mean_speed: f64) -> Result<f64> {
    if mean_speed <= 0.0 {
        return Err(Error::DegenerateCapacity(format!(
            "mean speed {mean_speed} for {total_tokens} tokens"
        )));
    }
    Ok(total_tokens / mean_speed)
}

/// Inclusive calendar window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub date_range: DateRange,
    pub target_model: String,
    /// Price per model, dollars per million tokens. Neither table carries prices.
    pub prices: BTreeMap<String, f64>,
    pub price_cap: f64,
    /// Apps below this fraction of the top app's volume on a model are dropped for that model.
    pub filter_fraction: f64,
}

impl BuildOptions {
    pub fn new(
        date_range: DateRange,
        target_model: impl Into<String>,
        prices: BTreeMap<String, f64>,
        price_cap: f64,
    ) -> Self {
        BuildOptions {
            date_range,
            target_model: target_model.into(),
            prices,
            price_cap,
            filter_fraction: 0.01,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Assembles a market and its observed days from the two tables.
///
/// Flows are expressed in millions of tokens; capacities use the same unit,
/// so `Q_j` at the observed total load equals the model's mean speed.
pub fn build_market(
    usage: &[UsageRecord],
    performance: &[PerformanceRecord],
    opts: &BuildOptions,
) -> Result<(Market, Vec<ObservedDay>)> {
    let range = opts.date_range;
    if range.start > range.end {
        return Err(Error::Argument(format!(
            "empty date range {} .. {}",
            range.start, range.end
        )));
    }
    if !(0.0..=1.0).contains(&opts.filter_fraction) {
        return Err(Error::Argument(format!(
            "filter fraction {} outside [0, 1]",
            opts.filter_fraction
        )));
    }
    let perf: Vec<&PerformanceRecord> =
        performance.iter().filter(|r| range.contains(r.date)).collect();
    let models: BTreeSet<&str> = perf.iter().map(|r| r.model.as_str()).collect();
    if !models.contains(opts.target_model.as_str()) {
        return Err(Error::NotFound(format!(
            "target model `{}` has no performance records in range",
            opts.target_model
        )));
    }
    let order: Vec<&str> = models
        .iter()
        .copied()
        .filter(|m| *m != opts.target_model)
        .chain(std::iter::once(opts.target_model.as_str()))
        .collect();
    let col: BTreeMap<&str, usize> = order.iter().enumerate().map(|(j, m)| (*m, j)).collect();
    let m = order.len();

    let mut capacities = Vec::with_capacity(m);
    let mut model_ttft = Vec::with_capacity(m);
    let mut providers = Vec::with_capacity(m);
    for (j, model) in order.iter().enumerate() {
        let rows: Vec<&&PerformanceRecord> = perf.iter().filter(|r| r.model == *model).collect();
        let total: f64 = rows.iter().map(|r| r.usage_m).sum();
        let speed = mean(&rows.iter().map(|r| r.output_speed).collect::<Vec<_>>());
        let alpha = capacity_from_usage(total, speed)
            .map_err(|_| Error::DegenerateCapacity(model.to_string()))?;
        model_ttft.push(mean(&rows.iter().map(|r| r.ttft).collect::<Vec<_>>()));
        capacities.push(alpha);
        let price = *opts
            .prices
            .get(*model)
            .ok_or_else(|| Error::NotFound(format!("no price for model `{model}`")))?;
        providers.push(Provider {
            id: model.to_string(),
            price,
            capacity: alpha,
            perceived_value: 0.0,
            is_target: j + 1 == m,
        });
    }

    let usage: Vec<&UsageRecord> = usage
        .iter()
        .filter(|r| range.contains(r.date) && col.contains_key(r.model.as_str()))
        .collect();

    // Volume filter, per model.
    let mut volume: BTreeMap<(&str, &str), u128> = BTreeMap::new();
    for r in &usage {
        *volume.entry((r.model.as_str(), r.app.as_str())).or_default() += r.tokens as u128;
    }
    let mut top: BTreeMap<&str, u128> = BTreeMap::new();
    for ((model, _), v) in &volume {
        let t = top.entry(model).or_default();
        *t = (*t).max(*v);
    }
    let kept: BTreeSet<(&str, &str)> = volume
        .iter()
        .filter(|((model, _), v)| **v > 0 && (**v as f64) >= opts.filter_fraction * top[model] as f64)
        .map(|(k, _)| *k)
        .collect();
    let apps: BTreeSet<&str> = kept.iter().map(|(_, app)| *app).collect();
    let row: BTreeMap<&str, usize> = apps.iter().enumerate().map(|(i, a)| (*a, i)).collect();
    let n = apps.len();

    // Delays: pair mean over the window, falling back to the model's mean TTFT.
    let mut pair_ttft: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut day_ttft: BTreeMap<(NaiveDate, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in &usage {
        if let Some(&i) = row.get(r.app.as_str()) {
            let j = col[r.model.as_str()];
            pair_ttft.entry((i, j)).or_default().push(r.ttft);
            day_ttft.entry((r.date, i, j)).or_default().push(r.ttft);
        }
    }
    let delays: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..m)
                .map(|j| pair_ttft.get(&(i, j)).map_or(model_ttft[j], |v| mean(v)))
                .collect()
        })
        .collect();

    let dates: BTreeSet<NaiveDate> = usage
        .iter()
        .map(|r| r.date)
        .chain(perf.iter().map(|r| r.date))
        .collect();
    if dates.is_empty() {
        return Err(Error::Argument("no records inside the date range".into()));
    }
    let prices: Vec<f64> = providers.iter().map(|p| p.price).collect();
    let mut days = Vec::with_capacity(dates.len());
    let mut demand_total = vec![0.0; n];
    for &date in &dates {
        let mut flows = FlowMatrix::zeros(n, m);
        for r in usage.iter().filter(|r| r.date == date) {
            if kept.contains(&(r.model.as_str(), r.app.as_str())) {
                let (i, j) = (row[r.app.as_str()], col[r.model.as_str()]);
                flows.add(i, j, r.tokens as f64 / 1e6);
            }
        }
        let demands: Vec<f64> = (0..n).map(|i| flows.row(i).iter().sum()).collect();
        for (t, d) in demand_total.iter_mut().zip(&demands) {
            *t += d;
        }
        let day_delays = (0..n)
            .map(|i| {
                (0..m)
                    .map(|j| day_ttft.get(&(date, i, j)).map_or(delays[i][j], |v| mean(v)))
                    .collect()
            })
            .collect();
        let objective = DayObjective {
            prices: prices.clone(),
            capacities: capacities.clone(),
            delays: day_delays,
        };
        days.push(ObservedDay::new(date, flows, demands, objective)?);
    }

    let users = apps
        .iter()
        .enumerate()
        .map(|(i, app)| UserGroup {
            id: app.to_string(),
            demand: demand_total[i] / dates.len() as f64,
            delays: delays[i].clone(),
        })
        .collect();
    let market = Market::new(providers, users, PreferenceParams::unit(m), opts.price_cap)?;
    Ok((market, days))
}
