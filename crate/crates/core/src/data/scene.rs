use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{rotated_iou, Canvas, OrientedBox};
use crate::image::Image;

/// Maximum rotated IoU allowed between two placed objects.
pub const MAX_PLACEMENT_IOU: f64 = 0.1;
pub const PLACEMENT_RETRIES: usize = 100;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Inclusive object-count range.
    pub objects: (usize, usize),
    /// Range of `sqrt(w * h)` in pixels.
    pub scale: (f64, f64),
    /// Range of the long/short side ratio.
    pub aspect: (f64, f64),
    pub classes: Vec<String>,
    pub background: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            objects: (3, 6),
            scale: (24.0, 80.0),
            aspect: (1.5, 3.5),
            classes: vec![
                "ship".into(),
                "large-vehicle".into(),
                "small-vehicle".into(),
            ],
            background: 0.12,
            noise: 0.03,
        }
    }
}

impl SceneConfig {
    pub fn canvas(&self) -> Canvas {
        Canvas::new(self.width, self.height)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Disjoint intensity band `[lo, hi)` of class `c`.
    pub fn class_band(&self, c: usize) -> (f64, f64) {
        let n = self.classes.len().max(1) as f64;
        let step = 0.55 / n;
        let lo = 0.35 + c as f64 * step;
        (lo, lo + 0.6 * step)
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn validate(&self) -> Result<(), String> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if self.width == 0 || self.height == 0 {
            return Err("canvas must be non-empty".into());
        }
        if self.objects.0 > self.objects.1 {
            return Err("object count range is empty".into());
        }
        if !ordered(self.scale) || self.scale.0 <= 0.0 {
            return Err("scale range must be positive and ordered".into());
        }
        if !ordered(self.aspect) || self.aspect.0 < 1.0 {
            return Err("aspect range must be ordered and >= 1".into());
        }
        if self.classes.is_empty() {
            return Err("at least one class is required".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub obb: OrientedBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<SceneObject>,
    /// Set when some requested objects could not be placed.
    pub placement_incomplete: bool,
}

impl Scene {
    pub fn canvas(&self) -> Canvas {
        self.image.canvas()
    }
}

/// Renders a scene. The output is a pure function of `(cfg, seed)`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canvas = cfg.canvas();
    let target = rng.gen_range(cfg.objects.0..=cfg.objects.1);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(target);
    let mut incomplete = false;
    for _ in 0..target {
        match place_object(cfg, canvas, &objects, &mut rng) {
            Some(o) => objects.push(o),
            None => incomplete = true,
        }
    }

    let mut image = Image::filled(cfg.width, cfg.height, cfg.background);
    for o in &objects {
        let (lo, hi) = cfg.class_band(o.class_id);
        let intensity = rng.gen_range(lo..hi);
        paint(&mut image, &o.obb, intensity);
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("noise level is finite");
        for v in image.data.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Scene {
        image,
        objects,
        placement_incomplete: incomplete,
    }
}

fn place_object(
    cfg: &SceneConfig,
    canvas: Canvas,
    placed: &[SceneObject],
    rng: &mut ChaCha8Rng,
) -> Option<SceneObject> {
    for _ in 0..PLACEMENT_RETRIES {
        let s = rng.gen_range(cfg.scale.0..=cfg.scale.1);
        let a = rng.gen_range(cfg.aspect.0..=cfg.aspect.1);
        let theta = FRAC_PI_2 - rng.gen_range(0.0..PI);
        let class_id = rng.gen_range(0..cfg.num_classes());
        let (w, h) = (s * a.sqrt(), s / a.sqrt());
        let probe = OrientedBox::new(0.0, 0.0, w, h, theta);
        let [x0, y0, x1, y1] = probe.bounds();
        let (xmin, xmax) = (-x0, canvas.width as f64 - x1);
        let (ymin, ymax) = (-y0, canvas.height as f64 - y1);
        if xmin > xmax || ymin > ymax {
            continue;
        }
        let cx = rng.gen_range(xmin..=xmax);
        let cy = rng.gen_range(ymin..=ymax);
        let obb = OrientedBox::new(cx, cy, w, h, theta);
        if placed
            .iter()
            .all(|o| rotated_iou(&o.obb, &obb) <= MAX_PLACEMENT_IOU)
        {
            return Some(SceneObject { obb, class_id });
        }
    }
    None
}

/// Anti-aliased fill using per-pixel supersampling over the box bounds.
fn paint(image: &mut Image, b: &OrientedBox, intensity: f64) {
    let [x0, y0, x1, y1] = b.bounds();
    let xa = (x0.floor().max(0.0)) as usize;
    let ya = (y0.floor().max(0.0)) as usize;
    let xb = (x1.ceil() as usize).min(image.width);
    let yb = (y1.ceil() as usize).min(image.height);
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in ya..yb {
        for x in xa..xb {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let p = [
                        x as f64 + (sx as f64 + 0.5) * step,
                        y as f64 + (sy as f64 + 0.5) * step,
                    ];
                    let [u, v] = b.to_local(p);
                    if u.abs() <= 0.5 * b.w && v.abs() <= 0.5 * b.h {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let old = image.get(x, y);
                image.set(x, y, old * (1.0 - cov) + intensity * cov);
            }
        }
    }
}
