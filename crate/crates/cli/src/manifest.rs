use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use stereolab::matcher::StageTiming;

/// Everything needed to repeat a run: the command line, the effective
/// configuration, every file read and written, seeds and stage timings.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub threads: usize,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub timings: Vec<StageTiming>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: "stereolab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: std::env::args().collect(),
            threads: rayon::current_num_threads(),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: BTreeMap::new(),
            timings: Vec::new(),
        }
    }

    pub fn time(&mut self, stage: &str, seconds: f64) {
        self.timings.push(StageTiming {
            stage: stage.into(),
            seconds,
        });
    }

    /// Writes the manifest to `path`; the manifest lists itself as an output.
    pub fn write(mut self, path: &Path) -> stereolab::Result<()> {
        self.outputs.push(path.to_path_buf());
        stereolab::io::write_json(path, &self)
    }
}
