//! Training the dense angle model with the self-supervised angle loss alone,
//! and measuring how well it recovers object orientations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::angle::{
    dense_pyramid, ds_match, pyramid_label_angles, ssa_loss, AngleConfig, AngleParams,
    AngleRelation, DsConfig,
};
use crate::autodiff::{AutodiffError, Graph};
use crate::data::LabeledScene;
use crate::geometry::{angle_distance, HorizontalBox};
use crate::optim::{OptimConfig, Optimizer};
use crate::views::{build_rotflp, ViewConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AngleTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub angle: AngleConfig,
    pub ds: DsConfig,
    pub views: ViewConfig,
    pub optim: OptimConfig,
}

impl Default for AngleTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 2,
            angle: AngleConfig::default(),
            ds: DsConfig::default(),
            views: ViewConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

/// Angle-loss-only training. Returns the parameters and the per-step loss.
pub fn train_angle_only(
    scenes: &[LabeledScene],
    cfg: &AngleTrainConfig,
    seed: u64,
) -> Result<(AngleParams, Vec<f64>), AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AngleParams::init(&cfg.angle, &mut rng);
    continue_angle_only(params, scenes, cfg, &mut rng)
}

/// [`train_angle_only`] from given parameters.
pub fn continue_angle_only(
    mut params: AngleParams,
    scenes: &[LabeledScene],
    cfg: &AngleTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(AngleParams, Vec<f64>), AutodiffError> {
    let mut opt = Optimizer::new(&cfg.optim, &params.tensors());
    let mut log = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, true);
        let mut total = None;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            let ls = &scenes[order[cursor]];
            cursor += 1;
            let bundle = build_rotflp(ls, &cfg.views, rng);
            let valid = bundle.valid_labels();
            if valid.is_empty() {
                continue;
            }
            let po: Vec<_> = valid
                .iter()
                .map(|&i| bundle.original.points[i].pos())
                .collect();
            let pe: Vec<_> = valid
                .iter()
                .map(|&i| bundle.enhanced.points[i].pos())
                .collect();
            let o = pyramid_label_angles(
                &mut g,
                &vars,
                &bundle.original.scene.image,
                &po,
                &cfg.angle,
                &cfg.ds,
            )?;
            let e = pyramid_label_angles(
                &mut g,
                &vars,
                &bundle.enhanced.scene.image,
                &pe,
                &cfg.angle,
                &cfg.ds,
            )?;
            let rel = AngleRelation::from_view(&bundle.transform);
            let l = ssa_loss(&mut g, &o, &e, rel, cfg.angle.beta)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let Some(total) = total else {
            log.push(0.0);
            continue;
        };
        let loss = g.scale(total, 1.0 / cfg.batch as f64)?;
        log.push(g.value(loss).item());
        let mut grads = g.backward(loss)?;
        let gs = [
            grads.take(vars.kernel),
            grads.take(vars.mix_u),
            grads.take(vars.mix_v),
        ];
        let lr = cfg.optim.lr_at(step, cfg.steps);
        opt.step(&mut params.tensors_mut(), &gs, lr);
    }
    Ok((params, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleRecovery {
    /// Per-object error in degrees, after removing the global offset.
    pub errors_deg: Vec<f64>,
    /// Global offset (0 or 90 degrees) the model settled on.
    pub offset_deg: f64,
    pub objects_skipped: usize,
}

impl AngleRecovery {
    pub fn fraction_below(&self, deg: f64) -> f64 {
        if self.errors_deg.is_empty() {
            return 0.0;
        }
        self.errors_deg.iter().filter(|&&e| e < deg).count() as f64 / self.errors_deg.len() as f64
    }
}

/// Matches a ground-truth-sized horizontal box at every point label against
/// the dense maps and compares the attached angle with the true one.
/// Objects with aspect below `min_aspect` are skipped.
pub fn angle_recovery(
    params: &AngleParams,
    scenes: &[LabeledScene],
    angle: &AngleConfig,
    ds: &DsConfig,
    min_aspect: f64,
) -> Result<AngleRecovery, AutodiffError> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for ls in scenes {
        let pyr = dense_pyramid(params, &ls.scene.image, angle)?;
        for p in &ls.points {
            let obb = ls.scene.objects[p.source_index].obb;
            if obb.w.max(obb.h) / obb.w.min(obb.h) < min_aspect {
                skipped += 1;
                continue;
            }
            let pred = ds_match(&HorizontalBox::new(p.x, p.y, obb.w, obb.h), &pyr, ds);
            pairs.push((pred, obb.theta));
        }
    }
    let errs = |c: f64| -> Vec<f64> {
        pairs
            .iter()
            .map(|&(pred, gt)| angle_distance(pred + c, gt, std::f64::consts::PI).to_degrees())
            .collect()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (e0, e1) = (errs(0.0), errs(std::f64::consts::FRAC_PI_2));
    let (errors_deg, offset_deg) = if mean(&e1) < mean(&e0) {
        (e1, 90.0)
    } else {
        (e0, 0.0)
    };
    Ok(AngleRecovery {
        errors_deg,
        offset_deg,
        objects_skipped: skipped,
    })
}
