//! The commands behind the `pine` binary, as library functions returning
//! structured results plus a [`RunReport`].

mod bench;
mod bias_scan;
mod invariance;
mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use bench::{cmd_bench, comparator_counts, BenchOutcome, BenchRow, ComparatorRow};
pub use bias_scan::{cmd_bias_scan, BiasRow, BiasScanConfig, BiasScanOutcome, Metric};
pub use invariance::{cmd_invariance, InvarianceOptions, InvarianceOutcome, ModeVerdict};
pub use run::{cmd_compare, cmd_run, CompareRow, RunOutcome};

use crate::error::Result;
use crate::model::{init_random, load_weights, Model, ModelConfig};
use crate::prompt::Tokenizer;

/// Version string stamped into every report.
pub const ARTIFACT_VERSION: &str = concat!("pine-core/", env!("CARGO_PKG_VERSION"), "/report-v1");

/// Weight seeds tried, starting from the requested one, when looking for a
/// non-invariance witness with random weights.
pub const WITNESS_SEEDS: u64 = 20;

/// Tokenizer used by every command: byte tokens with a leading BOS.
pub fn harness_tokenizer() -> Tokenizer {
    Tokenizer::with_bos()
}

/// Where model weights come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Files { model: PathBuf, config: PathBuf },
    /// Seeded random weights; lets commands run without any files.
    Random { config: ModelConfig, seed: u64 },
}

impl ModelSource {
    pub fn load(&self, canonical_reduction: bool) -> Result<Model> {
        let (config, weights) = match self {
            ModelSource::Files { model, config } => load_weights(model, config)?,
            ModelSource::Random { config, seed } => (config.clone(), init_random(config, *seed)?),
        };
        Ok(Model::new(config, weights)?.with_canonical_reduction(canonical_reduction))
    }

    /// The same source with a different seed, when it is random.
    pub fn reseeded(&self, seed: u64) -> Option<Self> {
        match self {
            ModelSource::Random { config, .. } => Some(ModelSource::Random {
                config: config.clone(),
                seed,
            }),
            ModelSource::Files { .. } => None,
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            ModelSource::Random { seed, .. } => Some(*seed),
            ModelSource::Files { .. } => None,
        }
    }
}

/// Machine-readable record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub command: String,
    /// SHA-256 of the command's inputs: flags, prompt, config and weights.
    pub config_hash: String,
    pub artifact_version: String,
    pub results: Value,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    fn new(command: &str, inputs: &Value, results: Value, timings: Timings) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash(inputs),
            artifact_version: ARTIFACT_VERSION.to_string(),
            results,
            timings: timings.0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    /// The report without wall-clock fields, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }
}

/// Hex SHA-256 of the compact JSON form of `inputs` (object keys sorted).
pub fn config_hash(inputs: &Value) -> String {
    hex::encode(Sha256::digest(inputs.to_string().as_bytes()))
}

fn model_inputs(model: &Model) -> Value {
    json!({
        "config": model.config(),
        "weights_sha256": model.weights().fingerprint(),
        "canonical_reduction": model.canonical_reduction,
    })
}

#[derive(Debug, Default)]
struct Timings(BTreeMap<String, f64>);

impl Timings {
    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.0.entry(phase.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }
}
