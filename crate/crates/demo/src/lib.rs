//! Browser bindings. Every export takes and returns plain strings or
//! numbers; structured results are JSON.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use pointobb::angle::{ds_level, AngleConfig, DsConfig};
use pointobb::data::{generate_dataset, DatasetConfig};
use pointobb::geometry::{clip_convex, polygon_area, rotated_iou, OrientedBox, Point};
use pointobb::pipeline::render_svg;
use pointobb::proposals::{generate_bag, BagLayout};

#[derive(Debug, Clone, Copy, Deserialize)]
struct BoxSpec {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    /// Degrees.
    theta: f64,
}

impl BoxSpec {
    fn to_obb(self) -> Result<OrientedBox, String> {
        let b = OrientedBox::new(self.cx, self.cy, self.w, self.h, self.theta.to_radians());
        if !b.is_valid() {
            return Err("box sides must be positive and finite".into());
        }
        Ok(b)
    }
}

#[derive(Serialize)]
struct IouResult {
    iou: f64,
    intersection_area: f64,
    intersection: Vec<Point>,
    corners_a: [Point; 4],
    corners_b: [Point; 4],
}

fn parse_box(text: &str) -> Result<OrientedBox, String> {
    let spec: BoxSpec = serde_json::from_str(text).map_err(|e| format!("bad box: {e}"))?;
    spec.to_obb()
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

/// Rotated IoU of two boxes `{cx, cy, w, h, theta}` (theta in degrees) with
/// the intersection polygon and both corner lists.
#[wasm_bindgen]
pub fn iou(a: &str, b: &str) -> Result<String, String> {
    let (a, b) = (parse_box(a)?, parse_box(b)?);
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let poly = clip_convex(&ca, &cb);
    Ok(to_json(&IouResult {
        iou: rotated_iou(&a, &b),
        intersection_area: polygon_area(&poly).abs(),
        intersection: poly,
        corners_a: ca,
        corners_b: cb,
    }))
}

#[derive(Serialize)]
struct Proposal {
    group: usize,
    ratio: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    /// Pyramid level chosen by dense-to-sparse matching.
    level: usize,
    stride: f64,
}

/// The proposal bag around `(x, y)` with the pyramid level of every box.
/// `dense` picks the 7x7 layout instead of the 4x5 one.
#[wasm_bindgen]
pub fn proposal_bag(x: f64, y: f64, dense: bool) -> Result<String, String> {
    if !(x.is_finite() && y.is_finite()) {
        return Err("point must be finite".into());
    }
    let layout = if dense {
        BagLayout::dense()
    } else {
        BagLayout::default()
    };
    let angle = AngleConfig::default();
    let ds = DsConfig::default();
    let strides = angle.strides();
    let point = pointobb::data::PointLabel {
        x,
        y,
        class_id: 0,
        source_index: 0,
    };
    let bag = generate_bag(&point, &layout);
    let out: Vec<Proposal> = bag
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let level = ds_level(b.w, b.h, ds.basescale, strides.len());
            Proposal {
                group: i / layout.num_ratios(),
                ratio: i % layout.num_ratios(),
                cx: b.cx,
                cy: b.cy,
                w: b.w,
                h: b.h,
                level,
                stride: strides[level],
            }
        })
        .collect();
    Ok(to_json(&out))
}

/// One synthetic scene as SVG: ground truth solid, points as crosses.
#[wasm_bindgen]
pub fn scene_svg(seed: u32, objects: u32) -> Result<String, String> {
    let mut cfg = DatasetConfig {
        num_scenes: 1,
        ..DatasetConfig::default()
    };
    let n = objects.clamp(1, 12) as usize;
    cfg.scene.objects = (n, n);
    let ls = generate_dataset(&cfg, u64::from(seed))
        .map_err(|e| e.to_string())?
        .remove(0);
    let gt: Vec<OrientedBox> = ls.scene.objects.iter().map(|o| o.obb).collect();
    let pts: Vec<Point> = ls.points.iter().map(|p| p.pos()).collect();
    Ok(render_svg(&ls.scene.image, &gt, &[], &pts))
}
