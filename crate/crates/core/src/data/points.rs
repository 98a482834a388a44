use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::OrientedBox;

use super::scene::Scene;

pub const DEFAULT_RANGE_FRAC: f64 = 0.10;

/// A single-point annotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointLabel {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "class")]
    pub class_id: usize,
    /// Index of the ground-truth object the point was drawn from.
    pub source_index: usize,
}

impl PointLabel {
    pub fn pos(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Frame in which the jitter rectangle is axis-aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JitterFrame {
    #[default]
    Object,
    Image,
}

/// Draws a point uniformly from a `(range_frac * w) x (range_frac * h)`
/// rectangle centered on the box.
pub fn make_point_label<R: Rng + ?Sized>(
    b: &OrientedBox,
    class_id: usize,
    source_index: usize,
    range_frac: f64,
    frame: JitterFrame,
    rng: &mut R,
) -> PointLabel {
    let hu = 0.5 * range_frac * b.w;
    let hv = 0.5 * range_frac * b.h;
    let u = if hu > 0.0 {
        rng.gen_range(-hu..=hu)
    } else {
        0.0
    };
    let v = if hv > 0.0 {
        rng.gen_range(-hv..=hv)
    } else {
        0.0
    };
    let [x, y] = match frame {
        JitterFrame::Object => b.from_local([u, v]),
        JitterFrame::Image => [b.cx + u, b.cy + v],
    };
    PointLabel {
        x,
        y,
        class_id,
        source_index,
    }
}

/// One point per ground-truth object, in object order.
pub fn label_scene<R: Rng + ?Sized>(
    scene: &Scene,
    range_frac: f64,
    frame: JitterFrame,
    rng: &mut R,
) -> Vec<PointLabel> {
    scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| make_point_label(&o.obb, o.class_id, i, range_frac, frame, rng))
        .collect()
}
