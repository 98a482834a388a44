//! Single-channel float images and the resampling used by the view builders.

use serde::{Deserialize, Serialize};

use crate::geometry::{AffineView, Canvas, Point};

/// Row-major intensity grid. Pixel `(x, y)` covers `[x, x+1) x [y, y+1)`
/// and its value sits at the pixel center `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn canvas(&self) -> Canvas {
        Canvas::new(self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous coordinates; outside the image reads 0.
    pub fn sample(&self, p: Point) -> f64 {
        let fx = p[0] - 0.5;
        let fy = p[1] - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let px = |x: i64, y: i64| -> f64 {
            if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
                0.0
            } else {
                self.data[y as usize * self.width + x as usize]
            }
        };
        let top = px(x0, y0) * (1.0 - tx) + px(x0 + 1, y0) * tx;
        let bot = px(x0, y0 + 1) * (1.0 - tx) + px(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }

    /// Bilinear sample with coordinates clamped to the pixel-center grid.
    pub fn sample_clamped(&self, p: Point) -> f64 {
        let x = p[0].clamp(0.5, self.width as f64 - 0.5);
        let y = p[1].clamp(0.5, self.height as f64 - 0.5);
        self.sample([x, y])
    }

    /// Resamples the image through `view`: every output pixel reads the
    /// original at the inverse-mapped location (zero outside for rotations,
    /// edge-clamped for resizing).
    pub fn warp(&self, view: &AffineView) -> Image {
        let src = self.canvas();
        let dst = view.output_canvas(src);
        let inv = view.inverse();
        let mut out = Image::new(dst.width, dst.height);
        for y in 0..dst.height {
            for x in 0..dst.width {
                let q = [x as f64 + 0.5, y as f64 + 0.5];
                let v = match view {
                    AffineView::Identity => self.get(x, y),
                    AffineView::Resize { .. } => self.sample_clamped(inv.apply_point(q, dst)),
                    AffineView::VFlip => self.get(x, self.height - 1 - y),
                    AffineView::Rotate { .. } => self.sample(inv.apply_point(q, dst)),
                };
                out.set(x, y, v);
            }
        }
        out
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Image {
        if factor <= 1 {
            return self.clone();
        }
        let w = self.width.div_ceil(factor);
        let h = self.height.div_ceil(factor);
        let mut out = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                let mut n = 0usize;
                for yy in y * factor..((y + 1) * factor).min(self.height) {
                    for xx in x * factor..((x + 1) * factor).min(self.width) {
                        s += self.get(xx, yy);
                        n += 1;
                    }
                }
                out.set(x, y, s / n as f64);
            }
        }
        out
    }
}
