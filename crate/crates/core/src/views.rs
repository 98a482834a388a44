//! Resized and rotated/flipped views of a labeled scene.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledScene, PointLabel, Scene, SceneObject};
use crate::geometry::{AffineView, Canvas};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnhancedKind {
    Resized,
    RotFlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewConfig {
    pub sigma_range: (f64, f64),
    /// Probability of rotating rather than flipping.
    pub rotate_prob: f64,
    /// Rotation angles are drawn uniformly from `(-max_rotation, max_rotation]`.
    pub max_rotation: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            sigma_range: (0.5, 1.5),
            rotate_prob: 0.95,
            max_rotation: PI,
        }
    }
}

/// A scene seen through a transform, with labels mapped analytically.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub scene: Scene,
    pub points: Vec<PointLabel>,
    /// `false` for labels whose transformed position left the canvas; such
    /// labels take no part in the losses of this step.
    pub in_view: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewBundle {
    pub original: View,
    pub enhanced: View,
    pub transform: AffineView,
    pub kind: EnhancedKind,
}

impl ViewBundle {
    /// Indices of labels usable in both views.
    pub fn valid_labels(&self) -> Vec<usize> {
        (0..self.original.points.len())
            .filter(|&i| self.enhanced.in_view[i])
            .collect()
    }
}

fn original_view(ls: &LabeledScene) -> View {
    View {
        scene: ls.scene.clone(),
        points: ls.points.clone(),
        in_view: vec![true; ls.points.len()],
    }
}

/// Applies `transform` to the image (resampled) and to the ground truth and
/// labels (analytically).
pub fn transform_view(ls: &LabeledScene, transform: AffineView) -> View {
    let canvas: Canvas = ls.scene.canvas();
    let out_canvas = transform.output_canvas(canvas);
    let image = ls.scene.image.warp(&transform);
    let objects = ls
        .scene
        .objects
        .iter()
        .map(|o| SceneObject {
            obb: transform.apply_box(&o.obb, canvas),
            class_id: o.class_id,
        })
        .collect();
    let mut in_view = Vec::with_capacity(ls.points.len());
    let points = ls
        .points
        .iter()
        .map(|p| {
            let [x, y] = transform.apply_point(p.pos(), canvas);
            in_view.push(out_canvas.contains([x, y]));
            PointLabel { x, y, ..*p }
        })
        .collect();
    View {
        scene: Scene {
            image,
            objects,
            placement_incomplete: ls.scene.placement_incomplete,
        },
        points,
        in_view,
    }
}

pub fn build_resized_with(ls: &LabeledScene, sigma: f64) -> ViewBundle {
    let transform = AffineView::Resize { sigma };
    ViewBundle {
        original: original_view(ls),
        enhanced: transform_view(ls, transform),
        transform,
        kind: EnhancedKind::Resized,
    }
}

pub fn build_resized<R: Rng + ?Sized>(
    ls: &LabeledScene,
    cfg: &ViewConfig,
    rng: &mut R,
) -> ViewBundle {
    let sigma = sample_sigma(cfg, rng);
    build_resized_with(ls, sigma)
}

pub fn sample_sigma<R: Rng + ?Sized>(cfg: &ViewConfig, rng: &mut R) -> f64 {
    let (lo, hi) = cfg.sigma_range;
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws the rot/flp transform: rotation with probability `rotate_prob`,
/// otherwise a vertical flip.
pub fn sample_rotflp<R: Rng + ?Sized>(cfg: &ViewConfig, rng: &mut R) -> AffineView {
    if rng.gen_bool(cfg.rotate_prob.clamp(0.0, 1.0)) {
        // (-m, m]
        let theta = cfg.max_rotation - rng.gen_range(0.0..2.0 * cfg.max_rotation);
        AffineView::Rotate { theta }
    } else {
        AffineView::VFlip
    }
}

pub fn build_rotflp_with(ls: &LabeledScene, transform: AffineView) -> ViewBundle {
    ViewBundle {
        original: original_view(ls),
        enhanced: transform_view(ls, transform),
        transform,
        kind: EnhancedKind::RotFlp,
    }
}

pub fn build_rotflp<R: Rng + ?Sized>(
    ls: &LabeledScene,
    cfg: &ViewConfig,
    rng: &mut R,
) -> ViewBundle {
    let t = sample_rotflp(cfg, rng);
    build_rotflp_with(ls, t)
}
