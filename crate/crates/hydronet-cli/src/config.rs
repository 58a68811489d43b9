//! Versioned run configuration: one TOML file drives every subcommand.
//!
//! Each section mirrors a library config struct verbatim, so defaults live
//! in one place and `--print-config` echoes the complete effective state.
//! A single global seed overwrites every per-section seed at load time;
//! the sections then derive their own independent streams from it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hydronet_core::dataset::{SplitSpec, WindowSpec};
use hydronet_core::model::HydroNetConfig;
use hydronet_core::sim::{AnomalySpec, SimConfig};
use hydronet_core::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Input locations and output file names. Relative output names resolve
/// under `out_dir`, so `--out` redirects a whole run at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Node list CSV (`node_id,is_outlet`).
    pub nodes: PathBuf,
    /// Edge attribute CSV.
    pub edges: PathBuf,
    /// Measurement panel CSV; written by `simulate`, read everywhere else.
    pub panel: PathBuf,
    /// Injected-anomaly labels, written next to the panel.
    pub labels: PathBuf,
    /// Trained model archive.
    pub checkpoint: PathBuf,
    /// Directory for outputs and any relative path above.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            nodes: "data/demo/nodes.csv".into(),
            edges: "data/demo/edges.csv".into(),
            panel: "panel.csv".into(),
            labels: "anomalies.csv".into(),
            checkpoint: "model.ckpt".into(),
            out_dir: "out".into(),
        }
    }
}

impl Paths {
    /// Resolve an output path: absolute stays, relative lands in out_dir.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    pub fn panel_path(&self) -> PathBuf {
        self.resolve(&self.panel)
    }

    pub fn labels_path(&self) -> PathBuf {
        self.resolve(&self.labels)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.resolve(&self.checkpoint)
    }

    pub fn out_file(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Anomaly-flagging knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// |z| must exceed this.
    pub threshold: f64,
    /// Minimum run length in steps.
    pub min_duration: usize,
    /// Seasonal-naive period in steps (one day at 10-minute stride).
    pub period: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            threshold: 3.0,
            min_duration: 3,
            period: 144,
        }
    }
}

/// Panel diagnostics knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Highest autocorrelation lag to report.
    pub max_lag: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self { max_lag: 288 }
    }
}

/// The whole run: every field has a default, every default is echoed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Global seed; overwrites each section's seed at load time.
    pub seed: u64,
    /// Fit normalization per node instead of per channel.
    pub per_node_norm: bool,
    pub paths: Paths,
    pub sim: SimConfig,
    pub model: HydroNetConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub window: WindowSpec,
    pub detect: DetectConfig,
    pub analyze: AnalyzeConfig,
    /// Anomalies injected by `simulate` and recorded in the labels file.
    pub anomalies: Vec<AnomalySpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 42,
            per_node_norm: false,
            paths: Paths::default(),
            sim: SimConfig::default(),
            model: HydroNetConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            window: WindowSpec::default(),
            detect: DetectConfig::default(),
            analyze: AnalyzeConfig::default(),
            anomalies: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Parse a TOML file, rejecting unknown versions.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?;
        if config.version != CONFIG_VERSION {
            return Err(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                config.version
            ));
        }
        Ok(config)
    }

    /// Push the global seed into every section and lock the model's window
    /// geometry to the `[window]` section.
    pub fn resolve(&mut self, seed_override: Option<u64>, out_override: Option<PathBuf>) {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        self.sim.seed = self.seed;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.model.lookback = self.window.lookback;
        self.model.horizon = self.window.horizon;
        if let Some(out) = out_override {
            self.paths.out_dir = out;
        }
    }

    /// Full effective state as TOML; feeding it back is a fixed point.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let mut config = RunConfig::default();
        config.resolve(None, None);
        let dump = config.to_toml();
        let reparsed: RunConfig = toml::from_str(&dump).unwrap();
        assert_eq!(config, reparsed);
        // The dump is a fixed point byte for byte.
        assert_eq!(dump, reparsed.to_toml());
    }

    #[test]
    fn dump_echoes_every_defaulted_field() {
        let config = RunConfig::default();
        let dump = config.to_toml();
        for key in [
            "version",
            "seed",
            "per_node_norm",
            "nodes",
            "edges",
            "panel",
            "labels",
            "checkpoint",
            "out_dir",
            "duration",
            "stride",
            "base_inflow",
            "diurnal_amplitude",
            "weekly_amplitude",
            "noise_std",
            "lookback",
            "horizon",
            "hidden_channels",
            "edge_embed_dim",
            "temporal_kernel",
            "blocks",
            "bidirectional",
            "learning_rate",
            "beta1",
            "beta2",
            "eps",
            "batch_size",
            "max_epochs",
            "patience",
            "loss",
            "train",
            "val",
            "test",
            "threshold",
            "min_duration",
            "period",
            "max_lag",
        ] {
            assert!(dump.contains(key), "dump missing {key}:\n{dump}");
        }
    }

    #[test]
    fn global_seed_overrides_sections() {
        let mut config = RunConfig::default();
        config.sim.seed = 1;
        config.train.seed = 2;
        config.resolve(Some(77), None);
        assert_eq!(config.seed, 77);
        assert_eq!(config.sim.seed, 77);
        assert_eq!(config.model.seed, 77);
        assert_eq!(config.train.seed, 77);
    }

    #[test]
    fn window_section_drives_model_geometry() {
        let mut config = RunConfig::default();
        config.window = WindowSpec {
            lookback: 18,
            horizon: 6,
        };
        config.resolve(None, None);
        assert_eq!(config.model.lookback, 18);
        assert_eq!(config.model.horizon, 6);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "version = 9").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn relative_outputs_resolve_under_out_dir() {
        let mut config = RunConfig::default();
        config.paths.out_dir = "/tmp/run7".into();
        assert_eq!(
            config.paths.panel_path(),
            PathBuf::from("/tmp/run7/panel.csv")
        );
        config.paths.panel = "/abs/panel.csv".into();
        assert_eq!(config.paths.panel_path(), PathBuf::from("/abs/panel.csv"));
    }
}
