use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{bag_features, orient_bag, TrainedModel};
use super::{PipelineError, RunConfig};
use crate::angle::dense_pyramid;
use crate::data::{read_dota, scene_dir, write_dota, DataError, DotaRecord, LabeledScene};
use crate::geometry::{HorizontalBox, OrientedBox};
use crate::mil::{score_bag_values, select_pseudo_obb};
use crate::proposals::{generate_bag, BagLayout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub obb: OrientedBox,
    pub class_id: usize,
    pub confidence: f64,
    pub source_index: usize,
}

/// Pseudo labels per scene, one per point label, in point order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub scenes: Vec<Vec<PseudoLabel>>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.scenes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ground truth as pseudo labels with confidence 1.
    pub fn from_ground_truth(scenes: &[LabeledScene]) -> Self {
        Self {
            scenes: scenes
                .iter()
                .map(|ls| {
                    ls.points
                        .iter()
                        .map(|p| PseudoLabel {
                            obb: ls.scene.objects[p.source_index].obb,
                            class_id: p.class_id,
                            confidence: 1.0,
                            source_index: p.source_index,
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

/// Bag, dense-to-sparse angles (when the model reached stage 3), refined
/// scores at the labeled class and top-k selection, for every point.
pub fn generate_pseudo(
    model: &TrainedModel,
    cfg: &RunConfig,
    scenes: &[LabeledScene],
) -> Result<PseudoLabelSet, PipelineError> {
    let one = |ls: &LabeledScene| -> Result<Vec<PseudoLabel>, PipelineError> {
        let pyr = if model.ds_enabled && !ls.points.is_empty() {
            Some(dense_pyramid(&model.angle, &ls.scene.image, &cfg.angle)?)
        } else {
            None
        };
        let mut labels = Vec::with_capacity(ls.points.len());
        for p in &ls.points {
            let bag = generate_bag(p, &cfg.layout);
            let boxes = orient_bag(&bag, pyr.as_ref(), &cfg.ds);
            let feats = bag_features(&ls.scene.image, &boxes);
            let (_, refined) = score_bag_values(&model.mil, &feats)?;
            let class = p.class_id.min(model.mil.num_classes() - 1);
            let scores = refined.proposal_scores(class);
            let sel = select_pseudo_obb(
                p.pos(),
                &boxes,
                &scores,
                cfg.mil.topk,
                cfg.mil.score_threshold,
            )
            .expect("bags are never empty");
            labels.push(PseudoLabel {
                obb: sel.obb,
                class_id: p.class_id,
                confidence: sel.confidence,
                source_index: p.source_index,
            });
        }
        Ok(labels)
    };
    #[cfg(feature = "parallel")]
    let out = {
        use rayon::prelude::*;
        scenes.par_iter().map(one).collect::<Result<Vec<_>, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let out = scenes.iter().map(one).collect::<Result<Vec<_>, _>>()?;
    Ok(PseudoLabelSet { scenes: out })
}

/// The same fixed-size axis-aligned proposal `(g, r)` at every point.
pub fn fixed_box_labels(
    scenes: &[LabeledScene],
    layout: &BagLayout,
    g: usize,
    r: usize,
) -> PseudoLabelSet {
    let (w, h) = layout.extent(g, r);
    PseudoLabelSet {
        scenes: scenes
            .iter()
            .map(|ls| {
                ls.points
                    .iter()
                    .map(|p| PseudoLabel {
                        obb: HorizontalBox::new(p.x, p.y, w, h).with_angle(0.0),
                        class_id: p.class_id,
                        confidence: 1.0,
                        source_index: p.source_index,
                    })
                    .collect()
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    source_index: usize,
    confidence: f64,
}

const PSEUDO_FILE: &str = "pseudo.dota";
const SIDECAR_FILE: &str = "pseudo.json";

/// Writes `scene_NNNN/pseudo.dota` plus `pseudo.json` holding the source
/// index and confidence of each line.
pub fn write_pseudo(
    root: &Path,
    set: &PseudoLabelSet,
    classes: &[String],
) -> Result<(), PipelineError> {
    for (i, labels) in set.scenes.iter().enumerate() {
        let dir = scene_dir(root, i);
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let records: Vec<DotaRecord> = labels
            .iter()
            .map(|l| {
                let name = classes
                    .get(l.class_id)
                    .cloned()
                    .ok_or(DataError::UnknownClass(l.class_id.to_string()))?;
                Ok(DotaRecord::new(l.obb, name, 0))
            })
            .collect::<Result<_, DataError>>()?;
        write_dota(&dir.join(PSEUDO_FILE), &records)?;
        let side: Vec<Sidecar> = labels
            .iter()
            .map(|l| Sidecar {
                source_index: l.source_index,
                confidence: l.confidence,
            })
            .collect();
        super::write_json(&dir.join(SIDECAR_FILE), &side)?;
    }
    Ok(())
}

/// Reads what [`write_pseudo`] wrote, for every scene directory present.
pub fn read_pseudo(root: &Path, classes: &[String]) -> Result<PseudoLabelSet, PipelineError> {
    let mut scenes = Vec::new();
    for i in 0.. {
        let dir = scene_dir(root, i);
        if !dir.join(PSEUDO_FILE).is_file() {
            break;
        }
        let records = read_dota(&dir.join(PSEUDO_FILE))?;
        let side: Vec<Sidecar> = super::read_json(&dir.join(SIDECAR_FILE))?;
        if side.len() != records.len() {
            return Err(PipelineError::Config(format!(
                "{}: {} boxes but {} sidecar entries",
                dir.display(),
                records.len(),
                side.len()
            )));
        }
        let labels = records
            .into_iter()
            .zip(side)
            .map(|(r, s)| {
                let class_id = classes
                    .iter()
                    .position(|c| *c == r.class_name)
                    .ok_or_else(|| DataError::UnknownClass(r.class_name.clone()))?;
                Ok(PseudoLabel {
                    obb: r.obb,
                    class_id,
                    confidence: s.confidence,
                    source_index: s.source_index,
                })
            })
            .collect::<Result<_, DataError>>()?;
        scenes.push(labels);
    }
    Ok(PseudoLabelSet { scenes })
}
