//! Run configuration: every tunable of the simulator, estimator, tracker,
//! metrics and benchmark in one JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;
use crate::io::{parse_json, read_json};
use crate::metrics::{MetricParams, DEFAULT_AP_THRESHOLDS};
use crate::pipeline::PipelineConfig;
use crate::simulator::ScenarioConfig;
use crate::tracker::TrackerParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write per-view heatmap and Re-ID dumps next to the ground truth.
    pub dump_heatmaps: bool,
    pub format: OutputFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dump_heatmaps: false,
            format: OutputFormat::Table,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    /// Voxel counts along x, y, z; the extent comes from the scenario space.
    pub grid_bins: [usize; 3],
    pub pipeline: PipelineConfig,
    pub tracker: TrackerParams,
    pub metrics: MetricParams,
    pub ap_thresholds_mm: Vec<f64>,
    pub bench: BenchConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: ScenarioConfig::default(),
            grid_bins: [160, 160, 64],
            pipeline: PipelineConfig::default(),
            tracker: TrackerParams::default(),
            metrics: MetricParams::default(),
            ap_thresholds_mm: DEFAULT_AP_THRESHOLDS.to_vec(),
            bench: BenchConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = parse_json(Path::new("<config>"), text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.grid()?;
        self.pipeline.validate()?;
        self.tracker.validate()?;
        if !(self.metrics.pcp_fraction > 0.0) {
            return Err(Error::config("metrics.pcp_fraction", "must be > 0"));
        }
        if !(self.metrics.mot_threshold_mm > 0.0) {
            return Err(Error::config("metrics.mot_threshold_mm", "must be > 0"));
        }
        if self.ap_thresholds_mm.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::config("ap_thresholds_mm", "thresholds must be > 0"));
        }
        self.bench.validate()
    }

    pub fn grid(&self) -> Result<VoxelGrid> {
        self.scenario
            .grid(self.grid_bins)
            .map_err(|e| Error::config("grid_bins", e.to_string()))
    }
}

/// Parse `XxYxZ` into voxel counts.
pub fn parse_grid(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let bad = || Error::config("grid", format!("expected XxYxZ with positive integers, got `{s}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| bad())?;
        if *o == 0 {
            return Err(bad());
        }
    }
    Ok(out)
}
