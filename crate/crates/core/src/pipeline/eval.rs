use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::pseudo::{fixed_box_labels, PseudoLabelSet};
use super::PipelineError;
use crate::data::LabeledScene;
use crate::geometry::rotated_iou;
use crate::proposals::BagLayout;

pub const AP_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub ap50: f64,
    /// AP50 of each class that has ground truth.
    pub per_class: BTreeMap<String, f64>,
}

/// Metrics tied to the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub ap50: f64,
    pub per_class: BTreeMap<String, f64>,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn new(m: Metrics, config_hash: String) -> Self {
        Self {
            miou: m.miou,
            ap50: m.ap50,
            per_class: m.per_class,
            config_hash,
        }
    }

    pub fn write(&self, path: &std::path::Path) -> Result<(), PipelineError> {
        super::write_json(path, self)
    }

    pub fn read(path: &std::path::Path) -> Result<Self, PipelineError> {
        super::read_json(path)
    }
}

/// All-point interpolated AP of a confidence-ranked list of hits.
pub fn ap_all_point(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / num_gt as f64);
    }
    // Precision envelope, right to left.
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        if *r > last_r {
            ap += (r - last_r) * p;
            last_r = *r;
        }
    }
    ap
}

/// mIoU against the source objects and VOC AP50 per class.
pub fn evaluate(
    pseudo: &PseudoLabelSet,
    gt: &[LabeledScene],
    classes: &[String],
) -> Result<Metrics, PipelineError> {
    if pseudo.scenes.len() != gt.len() {
        return Err(PipelineError::SceneCount {
            pseudo: pseudo.scenes.len(),
            gt: gt.len(),
        });
    }
    let mut iou_sum = 0.0;
    let mut n = 0usize;
    for (s, (labels, ls)) in pseudo.scenes.iter().zip(gt).enumerate() {
        for l in labels {
            let obj = ls
                .scene
                .objects
                .get(l.source_index)
                .ok_or(PipelineError::MissingSource {
                    scene: s,
                    index: l.source_index,
                })?;
            iou_sum += rotated_iou(&l.obb, &obj.obb);
            n += 1;
        }
    }
    let miou = if n == 0 { 0.0 } else { iou_sum / n as f64 };

    let mut per_class = BTreeMap::new();
    for (c, name) in classes.iter().enumerate() {
        let num_gt: usize = gt
            .iter()
            .map(|ls| ls.scene.objects.iter().filter(|o| o.class_id == c).count())
            .sum();
        if num_gt == 0 {
            continue;
        }
        let mut dets: Vec<(usize, usize)> = Vec::new();
        for (s, labels) in pseudo.scenes.iter().enumerate() {
            for (k, l) in labels.iter().enumerate() {
                if l.class_id == c {
                    dets.push((s, k));
                }
            }
        }
        dets.sort_by(|a, b| {
            let ca = pseudo.scenes[a.0][a.1].confidence;
            let cb = pseudo.scenes[b.0][b.1].confidence;
            cb.total_cmp(&ca)
        });
        let mut used: Vec<Vec<bool>> = gt
            .iter()
            .map(|ls| vec![false; ls.scene.objects.len()])
            .collect();
        let tp: Vec<bool> = dets
            .iter()
            .map(|&(s, k)| {
                let det = &pseudo.scenes[s][k].obb;
                let best = gt[s]
                    .scene
                    .objects
                    .iter()
                    .enumerate()
                    .filter(|(j, o)| o.class_id == c && !used[s][*j])
                    .map(|(j, o)| (j, rotated_iou(det, &o.obb)))
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                match best {
                    Some((j, iou)) if iou >= AP_IOU => {
                        used[s][j] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        per_class.insert(name.clone(), ap_all_point(&tp, num_gt));
    }
    let ap50 = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(Metrics {
        miou,
        ap50,
        per_class,
    })
}

/// The single `(g, r)` proposal that, placed axis-aligned at every point,
/// gives the highest mIoU. Returns `(g, r, miou)`.
pub fn best_fixed_box(
    scenes: &[LabeledScene],
    layout: &BagLayout,
    classes: &[String],
) -> Result<(usize, usize, f64), PipelineError> {
    let mut best = (0, 0, f64::NEG_INFINITY);
    for g in 0..layout.groups() {
        for r in 0..layout.num_ratios() {
            let m = evaluate(&fixed_box_labels(scenes, layout, g, r), scenes, classes)?.miou;
            if m > best.2 {
                best = (g, r, m);
            }
        }
    }
    Ok(best)
}
