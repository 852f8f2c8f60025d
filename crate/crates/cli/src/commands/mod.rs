mod calibrate;
mod eval;
mod price;
mod simulate;
mod train;

use crate::config::{Method, RunConfig};
use crate::output::OutDir;

pub use calibrate::run as calibrate;
pub use eval::run as eval;
pub use price::run as price;
pub use simulate::run as simulate;
pub use train::run as train_agg;

/// Settings shared by every command after flags override the config file.
pub struct Context {
    pub config: RunConfig,
    pub seed: u64,
    pub out: OutDir,
    pub k: Option<usize>,
    pub oracle: bool,
    pub method: Option<Method>,
}
