use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{deserialize, serialize, validate, ModelGraph};
use crate::params::ParamStore;

pub const GRAPH_FILE: &str = "graph.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOG_FILE: &str = "train_log.csv";

/// Validates, then writes the graph as JSON.
pub fn save_graph(path: &Path, graph: &ModelGraph) -> Result<()> {
    let violations = validate(graph);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    std::fs::write(path, serialize(graph))?;
    Ok(())
}

/// Reads and validates a graph.
pub fn load_graph(path: &Path) -> Result<ModelGraph> {
    let graph = deserialize(&std::fs::read_to_string(path)?)?;
    let violations = validate(&graph);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(graph)
}

pub fn save_params(path: &Path, params: &ParamStore) -> Result<()> {
    params.write_blob(BufWriter::new(File::create(path)?))
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    ParamStore::read_blob(BufReader::new(File::open(path)?))
}

/// Outcome of one trained variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub variant: String,
    pub seed: u64,
    pub input_size: (usize, usize),
    pub capacity_mb: f64,
    pub flops: u64,
    /// Detection mAP@0.5 on held-out scenes.
    pub accuracy: f64,
}

impl Metrics {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::State(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(e.line(), "metrics", e.to_string()))
    }
}
