//! Rotated-box geometry: corner conversion, view transforms, convex clipping
//! and rotated IoU.
//!
//! Angles follow the math convention in image coordinates: a box with angle
//! `theta` has its local x-axis along `(cos theta, sin theta)`. Because the
//! image y-axis points down this is a clockwise turn on screen.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

/// Tolerance used when classifying a vertex against a clipping edge.
pub const CLIP_EPS: f64 = 1e-12;

pub type Point = [f64; 2];

/// Relative area slack within which enclosing rectangles count as tied.
const MIN_AREA_TIE: f64 = 1e-4;

/// Reduces an angle modulo pi into `(-pi/2, pi/2]`.
pub fn canonical_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(PI);
    if t > FRAC_PI_2 {
        t -= PI;
    }
    // rem_euclid can return exactly PI for tiny negative inputs.
    if t <= -FRAC_PI_2 {
        t += PI;
    }
    t
}

/// Smallest absolute difference between two angles modulo `period`.
pub fn angle_distance(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl OrientedBox {
    /// Builds a box with its angle canonicalized.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            theta: canonical_angle(theta),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.theta.is_finite()
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point {
        [self.cx, self.cy]
    }

    /// Vertices in counter-clockwise order (math orientation), starting at the
    /// local `(+w/2, +h/2)` corner.
    pub fn to_corners(&self) -> [Point; 4] {
        let (s, c) = self.theta.sin_cos();
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        let local = [[hw, hh], [-hw, hh], [-hw, -hh], [hw, -hh]];
        local.map(|[x, y]| [self.cx + c * x - s * y, self.cy + s * x + c * y])
    }

    /// Exact inverse of [`OrientedBox::to_corners`] for rectangles; arbitrary
    /// quadrilaterals go through the minimum-area enclosing rectangle.
    pub fn from_corners(pts: &[Point; 4]) -> Self {
        min_area_rect(pts)
    }

    /// Maps a point from image coordinates into the box frame (origin at the
    /// center, x along the width axis).
    pub fn to_local(&self, p: Point) -> Point {
        let (s, c) = self.theta.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn from_local(&self, p: Point) -> Point {
        let (s, c) = self.theta.sin_cos();
        [self.cx + c * p[0] - s * p[1], self.cy + s * p[0] + c * p[1]]
    }

    pub fn contains(&self, p: Point) -> bool {
        let [x, y] = self.to_local(p);
        x.abs() <= 0.5 * self.w + 1e-9 && y.abs() <= 0.5 * self.h + 1e-9
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            w: self.w * factor,
            h: self.h * factor,
            ..*self
        }
    }

    /// Axis-aligned bounding extent `(xmin, ymin, xmax, ymax)`.
    pub fn bounds(&self) -> [f64; 4] {
        let c = self.to_corners();
        let mut b = [
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ];
        for [x, y] in c {
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x);
            b[3] = b[3].max(y);
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizontalBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl HorizontalBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn with_angle(&self, theta: f64) -> OrientedBox {
        OrientedBox::new(self.cx, self.cy, self.w, self.h, theta)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

impl From<HorizontalBox> for OrientedBox {
    fn from(b: HorizontalBox) -> Self {
        b.with_angle(0.0)
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Signed shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[Point]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * acc
}

/// Clips `subject` against the convex counter-clockwise polygon `clip`
/// (Sutherland-Hodgman) and returns the intersection polygon.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out: Vec<Point> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let dc = cross(a, b, cur);
            let dp = cross(a, b, prev);
            let cur_in = dc >= -CLIP_EPS;
            let prev_in = dp >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    out.push(edge_hit(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if prev_in {
                out.push(edge_hit(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn edge_hit(p: Point, q: Point, dp: f64, dq: f64) -> Point {
    let denom = dp - dq;
    if denom.abs() < f64::MIN_POSITIVE {
        return p;
    }
    let t = dp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the intersection of two convex counter-clockwise polygons.
/// Degenerate (zero-area) inputs yield 0.
pub fn convex_intersection_area(p: &[Point], q: &[Point]) -> f64 {
    if polygon_area(p).abs() <= CLIP_EPS || polygon_area(q).abs() <= CLIP_EPS {
        return 0.0;
    }
    polygon_area(&clip_convex(p, q)).max(0.0)
}

pub fn intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    // Cheap reject on circumscribed circles.
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    let ra = 0.5 * a.w.hypot(a.h);
    let rb = 0.5 * b.w.hypot(b.h);
    if dx * dx + dy * dy > (ra + rb) * (ra + rb) {
        return 0.0;
    }
    convex_intersection_area(&a.to_corners(), &b.to_corners())
}

pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Minimum-area rectangle enclosing four points. For an exact rectangle the
/// first edge wins ties, so `to_corners` output maps back to its own
/// width/height assignment.
fn min_area_rect(pts: &[Point; 4]) -> OrientedBox {
    let hull = convex_hull(pts);
    let n = hull.len();
    let mut cands: Vec<(f64, OrientedBox)> = Vec::with_capacity(n);
    for i in 0..n {
        let a = hull[i];
        let b = hull[(i + 1) % n];
        // Edge direction: from the second vertex to the first, matching the
        // local +x axis of `to_corners`.
        let (ex, ey) = (a[0] - b[0], a[1] - b[1]);
        let len = ex.hypot(ey);
        if len <= CLIP_EPS {
            continue;
        }
        let (ux, uy) = (ex / len, ey / len);
        let (mut u0, mut u1, mut v0, mut v1) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for p in pts {
            let u = p[0] * ux + p[1] * uy;
            let v = -p[0] * uy + p[1] * ux;
            u0 = u0.min(u);
            u1 = u1.max(u);
            v0 = v0.min(v);
            v1 = v1.max(v);
        }
        let (uc, vc) = (0.5 * (u0 + u1), 0.5 * (v0 + v1));
        let cand = OrientedBox::new(
            uc * ux - vc * uy,
            uc * uy + vc * ux,
            u1 - u0,
            v1 - v0,
            uy.atan2(ux),
        );
        cands.push(((u1 - u0) * (v1 - v0), cand));
    }
    let min = cands.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    // Near-ties (a rectangle whose corners were rounded) go to the earliest edge.
    cands
        .into_iter()
        .find(|c| c.0 <= min * (1.0 + MIN_AREA_TIE) + CLIP_EPS)
        .map(|c| c.1)
        .unwrap_or_else(|| {
            let cx = pts.iter().map(|p| p[0]).sum::<f64>() / 4.0;
            let cy = pts.iter().map(|p| p[1]).sum::<f64>() / 4.0;
            OrientedBox {
                cx,
                cy,
                w: 0.0,
                h: 0.0,
                theta: 0.0,
            }
        })
}

/// Convex hull preserving the input's starting vertex and winding when the
/// input is already a convex counter-clockwise polygon.
fn convex_hull(pts: &[Point; 4]) -> Vec<Point> {
    let ccw = polygon_area(pts) > 0.0;
    let convex = (0..4).all(|i| {
        let c = cross(pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]);
        if ccw {
            c > -CLIP_EPS
        } else {
            c < CLIP_EPS
        }
    });
    if convex {
        let mut v = pts.to_vec();
        if !ccw {
            v.reverse();
            v.rotate_right(1);
        }
        return v;
    }
    // Monotone chain for the general case.
    let mut sorted = pts.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut lower: Vec<Point> = Vec::new();
    for &p in &sorted {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in sorted.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Image-space transform relating an original view to an enhanced view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AffineView {
    Identity,
    Resize {
        sigma: f64,
    },
    /// Rotation by `theta` about the canvas center.
    Rotate {
        theta: f64,
    },
    /// Mirror about the horizontal mid-line.
    VFlip,
}

/// Canvas extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn center(&self) -> Point {
        [0.5 * self.width as f64, 0.5 * self.height as f64]
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= self.width as f64 && p[1] <= self.height as f64
    }
}

impl AffineView {
    pub fn inverse(&self) -> AffineView {
        match *self {
            AffineView::Identity => AffineView::Identity,
            AffineView::Resize { sigma } => AffineView::Resize { sigma: 1.0 / sigma },
            AffineView::Rotate { theta } => AffineView::Rotate { theta: -theta },
            AffineView::VFlip => AffineView::VFlip,
        }
    }

    /// Canvas of the transformed view. Only resizing changes it.
    pub fn output_canvas(&self, canvas: Canvas) -> Canvas {
        match *self {
            AffineView::Resize { sigma } => Canvas::new(
                ((canvas.width as f64 * sigma).round() as usize).max(1),
                ((canvas.height as f64 * sigma).round() as usize).max(1),
            ),
            _ => canvas,
        }
    }

    pub fn apply_point(&self, p: Point, canvas: Canvas) -> Point {
        match *self {
            AffineView::Identity => p,
            AffineView::Resize { sigma } => [p[0] * sigma, p[1] * sigma],
            AffineView::Rotate { theta } => {
                let [cx, cy] = canvas.center();
                let (s, c) = theta.sin_cos();
                let (dx, dy) = (p[0] - cx, p[1] - cy);
                [cx + c * dx - s * dy, cy + s * dx + c * dy]
            }
            AffineView::VFlip => [p[0], canvas.height as f64 - p[1]],
        }
    }

    /// Maps a box from the original view into this view. `canvas` is the
    /// original view's canvas.
    pub fn apply_box(&self, b: &OrientedBox, canvas: Canvas) -> OrientedBox {
        let [cx, cy] = self.apply_point(b.center(), canvas);
        match *self {
            AffineView::Identity => *b,
            AffineView::Resize { sigma } => {
                OrientedBox::new(cx, cy, b.w * sigma, b.h * sigma, b.theta)
            }
            AffineView::Rotate { theta } => OrientedBox::new(cx, cy, b.w, b.h, b.theta + theta),
            AffineView::VFlip => OrientedBox::new(cx, cy, b.w, b.h, -b.theta),
        }
    }
}

/// Free-function form of [`AffineView::apply_box`].
pub fn apply_view(v: &AffineView, b: &OrientedBox, canvas: Canvas) -> OrientedBox {
    v.apply_box(b, canvas)
}
