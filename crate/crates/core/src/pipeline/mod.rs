//! End-to-end orchestration: staged training, pseudo-label generation and
//! export, evaluation and visualization.

mod angle_only;
mod config;
mod eval;
mod gradsuite;
mod pseudo;
mod train;
mod viz;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use angle_only::{
    angle_recovery, continue_angle_only, train_angle_only, AngleRecovery, AngleTrainConfig,
};
pub use config::{RunConfig, ScheduleConfig};
pub use eval::{ap_all_point, best_fixed_box, evaluate, Metrics, MetricsReport, AP_IOU};
pub use gradsuite::{gradcheck_suite, Fixture, GradCase, GRADCHECK_TOL};
pub use pseudo::{
    fixed_box_labels, generate_pseudo, read_pseudo, write_pseudo, PseudoLabel, PseudoLabelSet,
};
pub use train::{
    bag_features, init_model, orient_bag, train, write_log, LossRecord, TrainOutput, TrainedModel,
};
pub use viz::{encode_bmp, render_svg};

use crate::autodiff::AutodiffError;
use crate::data::DataError;
use crate::mil::MilError;
use crate::scheduler::ScheduleError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {component} loss at step {step}")]
    NonFiniteLoss {
        step: usize,
        component: &'static str,
    },
    #[error("scene {scene}: pseudo label refers to missing object {index}")]
    MissingSource { scene: usize, index: usize },
    #[error("{pseudo} pseudo-label scenes for {gt} ground-truth scenes")]
    SceneCount { pseudo: usize, gt: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mil(#[from] MilError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(
    path: &Path,
    value: &T,
) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| PipelineError::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}
