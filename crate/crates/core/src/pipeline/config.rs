use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::angle::{AngleConfig, DsConfig};
use crate::data::DatasetConfig;
use crate::mil::MilConfig;
use crate::optim::OptimConfig;
use crate::proposals::BagLayout;
use crate::scheduler::{GateWiring, StageSchedule};
use crate::ssc::SscConfig;
use crate::views::ViewConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    /// Scenes per step.
    pub batch: usize,
    /// Burn-in points as fractions of `steps`.
    pub burn_in: (f64, f64),
    pub wiring: GateWiring,
    /// Ablation: stay in stage 1 for the whole run.
    pub stage1_only: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 2,
            burn_in: (0.5, 0.67),
            wiring: GateWiring::Narrative,
            stage1_only: false,
        }
    }
}

impl ScheduleConfig {
    pub fn stage_schedule(&self) -> Result<StageSchedule, PipelineError> {
        StageSchedule::from_fractions(self.steps, self.burn_in.0, self.burn_in.1).map_err(|e| {
            PipelineError::Config(format!(
                "schedule.burn_in {:?} over {} steps: {e}",
                self.burn_in, self.steps
            ))
        })
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    /// Scenes generated from a separate stream for evaluation.
    pub holdout_scenes: usize,
    pub layout: BagLayout,
    pub mil: MilConfig,
    pub ssc: SscConfig,
    pub angle: AngleConfig,
    pub ds: DsConfig,
    pub views: ViewConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            holdout_scenes: 32,
            layout: BagLayout::default(),
            mil: MilConfig::default(),
            ssc: SscConfig::default(),
            angle: AngleConfig::default(),
            ds: DsConfig::default(),
            views: ViewConfig::default(),
            schedule: ScheduleConfig::default(),
            optim: OptimConfig::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = PipelineError::Config;
        self.dataset.scene.validate().map_err(bad)?;
        self.layout.validate().map_err(bad)?;
        self.ssc.validate().map_err(bad)?;
        self.angle.validate().map_err(bad)?;
        if self.schedule.batch == 0 {
            return Err(bad("schedule.batch must be positive".into()));
        }
        if self.schedule.steps > 0 && !self.schedule.stage1_only {
            self.schedule.stage_schedule()?;
        }
        if !(self.ds.basescale > 0.0) {
            return Err(bad("ds.basescale must be positive".into()));
        }
        let (lo, hi) = self.views.sigma_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(bad("views.sigma_range must be positive and ordered".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Hex SHA-256 of the canonical JSON form, leaving out the output
    /// directory since it has no effect on results.
    pub fn hash(&self) -> String {
        let mut cfg = self.clone();
        cfg.output_dir = None;
        let json = serde_json::to_string(&cfg).expect("run config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
