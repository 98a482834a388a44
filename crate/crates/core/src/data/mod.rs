//! Synthetic scenes with exact ground truth, point-label simulation and the
//! on-disk scene archive.
//!
//! An archive is a directory holding `dataset.json` (the generating config)
//! and one `scene_NNNN/` subdirectory per scene with `image.pgm`, `gt.dota`
//! and `points.json`.

mod dota;
mod pgm;
mod points;
mod scene;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dota::{format_dota, parse_dota, read_dota, write_dota, DotaRecord};
pub use pgm::{read_pgm, write_pgm};
pub use points::{label_scene, make_point_label, JitterFrame, PointLabel, DEFAULT_RANGE_FRAC};
pub use scene::{
    generate_scene, Scene, SceneConfig, SceneObject, MAX_PLACEMENT_IOU, PLACEMENT_RETRIES,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: invalid PGM: {msg}")]
    Pgm { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("invalid scene config: {0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Scene plus its point labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub scene: Scene,
    pub points: Vec<PointLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub num_scenes: usize,
    pub point_range: f64,
    pub jitter_frame: JitterFrame,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            num_scenes: 64,
            point_range: DEFAULT_RANGE_FRAC,
            jitter_frame: JitterFrame::Object,
        }
    }
}

/// Mixes a run seed with an item index into an independent stream seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed
        ^ stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `cfg.num_scenes` labeled scenes; pure in `(cfg, seed)`.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Vec<LabeledScene>, DataError> {
    cfg.scene.validate().map_err(DataError::Config)?;
    Ok((0..cfg.num_scenes as u64)
        .map(|i| {
            let scene = generate_scene(&cfg.scene, derive_seed(seed, 2 * i));
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * i + 1));
            let points = label_scene(&scene, cfg.point_range, cfg.jitter_frame, &mut rng);
            LabeledScene { scene, points }
        })
        .collect())
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:04}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| DataError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_points(path: &Path, points: &[PointLabel]) -> Result<(), DataError> {
    write_json(path, &points)
}

pub fn read_points(path: &Path) -> Result<Vec<PointLabel>, DataError> {
    read_json(path)
}

pub fn write_archive(
    root: &Path,
    cfg: &DatasetConfig,
    scenes: &[LabeledScene],
) -> Result<(), DataError> {
    std::fs::create_dir_all(root).map_err(|e| DataError::io(root, e))?;
    write_json(&root.join("dataset.json"), cfg)?;
    for (i, ls) in scenes.iter().enumerate() {
        let dir = scene_dir(root, i);
        std::fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
        write_pgm(&dir.join("image.pgm"), &ls.scene.image)?;
        let gt: Vec<DotaRecord> = ls
            .scene
            .objects
            .iter()
            .map(|o| DotaRecord::new(o.obb, cfg.scene.classes[o.class_id].clone(), 0))
            .collect();
        write_dota(&dir.join("gt.dota"), &gt)?;
        write_points(&dir.join("points.json"), &ls.points)?;
    }
    Ok(())
}

pub fn read_dataset_config(root: &Path) -> Result<DatasetConfig, DataError> {
    read_json(&root.join("dataset.json"))
}

/// Reads every `scene_NNNN/` directory under `root`, in index order.
pub fn read_archive(root: &Path) -> Result<(DatasetConfig, Vec<LabeledScene>), DataError> {
    let cfg = read_dataset_config(root)?;
    let mut scenes = Vec::new();
    for i in 0.. {
        let dir = scene_dir(root, i);
        if !dir.is_dir() {
            break;
        }
        let image = read_pgm(&dir.join("image.pgm"))?;
        let objects = read_dota(&dir.join("gt.dota"))?
            .into_iter()
            .map(|r| {
                cfg.scene
                    .class_id(&r.class_name)
                    .map(|class_id| SceneObject {
                        obb: r.obb,
                        class_id,
                    })
                    .ok_or(DataError::UnknownClass(r.class_name))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let points = read_points(&dir.join("points.json"))?;
        scenes.push(LabeledScene {
            scene: Scene {
                image,
                objects,
                placement_incomplete: false,
            },
            points,
        });
    }
    Ok((cfg, scenes))
}
