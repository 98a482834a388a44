//! Per-proposal evidence sampled in the proposal's own frame.
//!
//! Both features are measured relative to the proposal, so they do not
//! change when the image and the proposal are scaled together.

use crate::geometry::OrientedBox;
use crate::image::Image;

pub const FEATURE_DIM: usize = 2;

/// Sample grid per axis inside the proposal.
const INNER: usize = 7;
/// Sample grid per axis over the ring window.
const OUTER: usize = 11;
/// Ring extent relative to the proposal.
const RING: f64 = 1.5;
/// Edge bands just inside and just outside each side.
const EDGE_IN: f64 = 0.85;
const EDGE_OUT: f64 = 1.15;
const EDGE_SAMPLES: usize = 8;

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Feature vector of one proposal:
///
/// 0. inside mean minus the mean of the surrounding ring
/// 1. the weakest of the four side contrasts, each the mean just inside that
///    side minus the mean just outside it
///
/// The second one is large only when all four sides sit on object edges.
pub fn proposal_features(image: &Image, b: &OrientedBox) -> [f64; FEATURE_DIM] {
    let sample = |u: f64, v: f64| image.sample(b.from_local([u * b.w, v * b.h]));
    let mut inside = Vec::with_capacity(INNER * INNER);
    for i in 0..INNER {
        for j in 0..INNER {
            let u = (j as f64 + 0.5) / INNER as f64 - 0.5;
            let v = (i as f64 + 0.5) / INNER as f64 - 0.5;
            inside.push(sample(u, v));
        }
    }
    let mut ring = Vec::with_capacity(OUTER * OUTER);
    for i in 0..OUTER {
        for j in 0..OUTER {
            let u = RING * ((j as f64 + 0.5) / OUTER as f64 - 0.5);
            let v = RING * ((i as f64 + 0.5) / OUTER as f64 - 0.5);
            if u.abs() > 0.5 || v.abs() > 0.5 {
                ring.push(sample(u, v));
            }
        }
    }
    // Mean along side k of the proposal scaled by f.
    let side = |f: f64, k: usize| {
        let mut acc = 0.0;
        for q in 0..EDGE_SAMPLES {
            let t = f * ((q as f64 + 0.5) / EDGE_SAMPLES as f64 - 0.5);
            let e = 0.5 * f;
            acc += match k {
                0 => sample(t, -e),
                1 => sample(t, e),
                2 => sample(-e, t),
                _ => sample(e, t),
            };
        }
        acc / EDGE_SAMPLES as f64
    };
    let edge = (0..4)
        .map(|k| side(EDGE_IN, k) - side(EDGE_OUT, k))
        .fold(f64::INFINITY, f64::min);
    [2.0 * (mean(&inside) - mean(&ring)), 4.0 * edge]
}
