//! TOML run configuration. Every section is optional; relative paths are
//! resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use stackroute_core::calibration::{CalibrateOptions, DayJitter};
use stackroute_core::market::{AttributeRanges, DateRange};
use stackroute_core::{SweepOptions, TrainOptions};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub calibrate: CalibrateConfig,
    pub price: PriceConfig,
    pub train_agg: TrainAggConfig,
    pub simulate: SimulateConfig,
    pub eval: EvalFileConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    /// Base market whose providers and users the fitted parameters are written into.
    pub market: Option<PathBuf>,
    /// JSON array of observed days.
    pub days: Option<PathBuf>,
    pub ingest: Option<IngestConfig>,
    /// Trailing days excluded from fitting and scored separately.
    pub hold_out: usize,
    pub options: CalibrateOptions,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub usage: PathBuf,
    pub performance: PathBuf,
    pub target_model: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub prices: BTreeMap<String, f64>,
    pub price_cap: f64,
    #[serde(default = "default_filter")]
    pub filter_fraction: f64,
}

fn default_filter() -> f64 {
    0.01
}

impl IngestConfig {
    pub fn date_range(&self) -> DateRange {
        DateRange {
            start: self.start,
            end: self.end,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Sweep,
    Exact,
    Prillm,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceConfig {
    pub market: Option<PathBuf>,
    pub method: Method,
    pub k: usize,
    pub scorer: Option<PathBuf>,
    pub oracle: bool,
    pub sweep: SweepOptions,
}

impl Default for PriceConfig {
    fn default() -> Self {
        PriceConfig {
            market: None,
            method: Method::Sweep,
            k: 2,
            scorer: None,
            oracle: false,
            sweep: SweepOptions::default(),
        }
    }
}

/// Synthetic suites default to a price cap just above the rival price range
/// so uniform curve samples concentrate where the target can compete.
pub fn suite_ranges() -> AttributeRanges {
    AttributeRanges {
        price_cap: 12.0,
        ..Default::default()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainAggConfig {
    /// JSON array of markets; generated synthetically when absent.
    pub scenarios: Option<PathBuf>,
    pub count: usize,
    pub n_users: usize,
    pub n_providers: usize,
    pub ranges: AttributeRanges,
    /// Model file to continue training from.
    pub resume: Option<PathBuf>,
    pub options: TrainOptions,
}

impl Default for TrainAggConfig {
    fn default() -> Self {
        TrainAggConfig {
            scenarios: None,
            count: 64,
            n_users: 3,
            n_providers: 8,
            ranges: suite_ranges(),
            resume: None,
            options: TrainOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub count: usize,
    pub n_users: usize,
    pub n_providers: usize,
    pub ranges: AttributeRanges,
    /// Observed days generated per market; zero writes markets only.
    pub days: usize,
    pub jitter: DayJitter,
    pub start_date: NaiveDate,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            count: 1,
            n_users: 3,
            n_providers: 4,
            ranges: AttributeRanges::default(),
            days: 6,
            jitter: DayJitter::default(),
            start_date: NaiveDate::from_ymd_opt(2025, 1, 1).expect("valid date"),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalFileConfig {
    pub methods: Vec<String>,
    pub markets: usize,
    pub n_users: usize,
    pub n_providers: usize,
    pub ranges: AttributeRanges,
    pub heuristic_k: usize,
    /// Scenarios generated to train each DA scorer that is not supplied.
    pub train_scenarios: usize,
    /// Pretrained scorers by `K`.
    pub scorers: BTreeMap<String, PathBuf>,
    pub train: TrainOptions,
    pub sweep: SweepOptions,
}

impl Default for EvalFileConfig {
    fn default() -> Self {
        EvalFileConfig {
            methods: ["DA_1", "DA_2", "DA_3", "DA_4", "MIN", "AVG", "BF"].map(String::from).to_vec(),
            markets: 20,
            n_users: 3,
            n_providers: 8,
            ranges: suite_ranges(),
            heuristic_k: 2,
            train_scenarios: 256,
            scorers: BTreeMap::new(),
            train: TrainOptions::default(),
            sweep: SweepOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| CliError::Toml {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve(base);
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                fix(p);
            }
        };
        opt(&mut self.out);
        opt(&mut self.calibrate.market);
        opt(&mut self.calibrate.days);
        if let Some(ing) = &mut self.calibrate.ingest {
            fix(&mut ing.usage);
            fix(&mut ing.performance);
        }
        opt(&mut self.price.market);
        opt(&mut self.price.scorer);
        opt(&mut self.train_agg.scenarios);
        opt(&mut self.train_agg.resume);
        self.eval.scorers.values_mut().for_each(fix);
    }
}
