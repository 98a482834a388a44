//! Dense angle prediction on a small feature pyramid, dense-to-dense positive
//! assignment, the self-supervised angle loss and dense-to-sparse matching.
//!
//! The model is a bank of learnable 3x3 filters shared across levels. Each
//! level filters a downsampled copy of the image, squares the responses,
//! average-pools them into cells and smooths the cell energies with a
//! Gaussian window. Two linear read-outs give a doubled-angle vector `(u, v)`
//! and the cell angle is `atan2(v, u) / 2`, which lies in `(-pi/2, pi/2]`.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{smooth_l1, AutodiffError, Graph, SparseRows, Tensor, Var};
use crate::geometry::{canonical_angle, AffineView, Canvas, HorizontalBox, Point};
use crate::image::Image;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Integer multiples of `pi` searched by the angle loss.
pub const K_MIN: i32 = -2;
pub const K_MAX: i32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AngleConfig {
    /// Pyramid levels `P`; level `p` works on the image downsampled by `2^p`.
    pub levels: usize,
    /// Cell size in level pixels. Level strides are `cell * 2^p`.
    pub cell: usize,
    pub filters: usize,
    /// Gaussian pooling window, in cells.
    pub window_sigma: f64,
    /// Smooth-L1 transition point of the angle loss, radians.
    pub beta: f64,
    pub init_std: f64,
}

impl Default for AngleConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            cell: 4,
            filters: 8,
            window_sigma: 3.0,
            beta: 1.0,
            init_std: 0.5,
        }
    }
}

impl AngleConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.levels == 0 || self.cell == 0 || self.filters == 0 {
            return Err("angle model needs at least one level, cell pixel and filter".into());
        }
        if !(self.window_sigma > 0.0 && self.beta > 0.0) {
            return Err("window_sigma and beta must be positive".into());
        }
        Ok(())
    }

    pub fn strides(&self) -> Vec<f64> {
        (0..self.levels).map(|p| (self.cell << p) as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DsConfig {
    pub basescale: f64,
    /// Radius of the dense-to-dense positive disk, in strides of each level.
    pub center_radius: f64,
    /// Size of the central region relative to the proposal.
    pub central_frac: f64,
}

impl Default for DsConfig {
    fn default() -> Self {
        Self {
            basescale: 56.0,
            center_radius: 1.5,
            central_frac: 0.5,
        }
    }
}

/// Cell layout of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGrid {
    /// Image pixels per cell.
    pub stride: f64,
    pub cols: usize,
    pub rows: usize,
}

impl LevelGrid {
    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, cell: usize) -> Point {
        let (i, j) = (cell / self.cols, cell % self.cols);
        [
            (j as f64 + 0.5) * self.stride,
            (i as f64 + 0.5) * self.stride,
        ]
    }

    pub fn nearest(&self, p: Point) -> usize {
        let clampi = |v: f64, n: usize| ((v / self.stride).floor().max(0.0) as usize).min(n - 1);
        clampi(p[1], self.rows) * self.cols + clampi(p[0], self.cols)
    }

    /// Cells whose centers satisfy `keep`, scanning the index box that covers
    /// `[x0, x1] x [y0, y1]`.
    fn cells_in(
        &self,
        x0: f64,
        x1: f64,
        y0: f64,
        y1: f64,
        keep: impl Fn(Point) -> bool,
    ) -> Vec<usize> {
        let lo = |v: f64| ((v / self.stride - 0.5).ceil().max(0.0)) as usize;
        let hi = |v: f64, n: usize| ((v / self.stride - 0.5).floor()).min(n as f64 - 1.0);
        let (j1, i1) = (hi(x1, self.cols), hi(y1, self.rows));
        let mut out = Vec::new();
        if j1 < 0.0 || i1 < 0.0 {
            return out;
        }
        for i in lo(y0)..=i1 as usize {
            for j in lo(x0)..=j1 as usize {
                let c = i * self.cols + j;
                if keep(self.center(c)) {
                    out.push(c);
                }
            }
        }
        out
    }
}

pub fn level_grids(canvas: Canvas, cfg: &AngleConfig) -> Vec<LevelGrid> {
    (0..cfg.levels)
        .map(|p| {
            let f = 1usize << p;
            LevelGrid {
                stride: (cfg.cell * f) as f64,
                cols: canvas.width.div_ceil(f).div_ceil(cfg.cell),
                rows: canvas.height.div_ceil(f).div_ceil(cfg.cell),
            }
        })
        .collect()
}

/// Dense angle map of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMap {
    pub grid: LevelGrid,
    pub angles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<LevelMap>,
}

impl FeaturePyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn grids(&self) -> Vec<LevelGrid> {
        self.levels.iter().map(|l| l.grid).collect()
    }
}

/// Sorts `cells` so the one closest to `p` comes first; it anchors the
/// unwrapping in [`mean_angle`].
fn nearest_first(grid: &LevelGrid, mut cells: Vec<usize>, p: Point) -> Vec<usize> {
    let d2 = |c: usize| {
        let q = grid.center(c);
        (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)
    };
    if let Some(best) = (0..cells.len()).min_by(|&a, &b| d2(cells[a]).total_cmp(&d2(cells[b]))) {
        cells.swap(0, best);
    }
    cells
}

/// Positive cells per label and level: centers within `center_radius`
/// strides of the label, or the nearest cell when that disk is empty. The
/// cell closest to the label is listed first.
pub fn d2d_assign(points: &[Point], grids: &[LevelGrid], cfg: &DsConfig) -> Vec<Vec<Vec<usize>>> {
    points
        .iter()
        .map(|&p| {
            grids
                .iter()
                .map(|grid| {
                    let r = cfg.center_radius * grid.stride;
                    let tol = 1e-9 * grid.stride;
                    let cells = grid.cells_in(p[0] - r, p[0] + r, p[1] - r, p[1] + r, |q| {
                        (q[0] - p[0]).hypot(q[1] - p[1]) <= r + tol
                    });
                    if cells.is_empty() {
                        vec![grid.nearest(p)]
                    } else {
                        nearest_first(grid, cells, p)
                    }
                })
                .collect()
        })
        .collect()
}

/// Multiples of `pi` that bring each angle onto the branch of `angles[0]`.
pub fn unwrap_offsets(angles: &[f64]) -> Vec<f64> {
    let Some(&r) = angles.first() else {
        return Vec::new();
    };
    angles
        .iter()
        .map(|&a| ((r - a) / PI).round() * PI)
        .collect()
}

/// Arithmetic mean after unwrapping onto the first angle's branch, so cells
/// straddling the `+-pi/2` seam do not cancel out.
pub fn mean_angle(angles: &[f64]) -> f64 {
    if angles.is_empty() {
        return 0.0;
    }
    let off = unwrap_offsets(angles);
    angles.iter().zip(&off).map(|(a, o)| a + o).sum::<f64>() / angles.len() as f64
}

pub fn level_angle(map: &LevelMap, cells: &[usize]) -> f64 {
    mean_angle(&cells.iter().map(|&c| map.angles[c]).collect::<Vec<_>>())
}

/// `clamp(round_half_up(log2(sqrt(wh) / basescale + 1e-6)), 0, levels - 1)`.
pub fn ds_level(w: f64, h: f64, basescale: f64, levels: usize) -> usize {
    let raw = ((w * h).sqrt() / basescale + 1e-6).log2();
    let lvl = (raw + 0.5).floor();
    lvl.clamp(0.0, (levels.max(1) - 1) as f64) as usize
}

/// Cells of `grid` whose centers fall in the central region of `b`.
pub fn central_cells(b: &HorizontalBox, grid: &LevelGrid, frac: f64) -> Vec<usize> {
    let (hw, hh) = (0.5 * frac * b.w, 0.5 * frac * b.h);
    let cells = grid.cells_in(b.cx - hw, b.cx + hw, b.cy - hh, b.cy + hh, |_| true);
    if cells.is_empty() {
        vec![grid.nearest([b.cx, b.cy])]
    } else {
        nearest_first(grid, cells, [b.cx, b.cy])
    }
}

/// Angle attached to a horizontal proposal, in `(-pi/2, pi/2]`.
pub fn ds_match(b: &HorizontalBox, pyr: &FeaturePyramid, cfg: &DsConfig) -> f64 {
    let level = &pyr.levels[ds_level(b.w, b.h, cfg.basescale, pyr.num_levels())];
    canonical_angle(level_angle(
        level,
        &central_cells(b, &level.grid, cfg.central_frac),
    ))
}

/// Learnable tensors of the angle model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleParams {
    /// `[F, 1, 3, 3]`
    pub kernel: Tensor,
    /// `[1, F]`
    pub mix_u: Tensor,
    /// `[1, F]`
    pub mix_v: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct AngleVars {
    pub kernel: Var,
    pub mix_u: Var,
    pub mix_v: Var,
}

impl AngleParams {
    pub fn init<R: Rng + ?Sized>(cfg: &AngleConfig, rng: &mut R) -> Self {
        let f = cfg.filters;
        let k = Normal::new(0.0, cfg.init_std).expect("finite std");
        let m = Normal::new(0.0, 1.0 / (f as f64).sqrt()).expect("finite std");
        Self {
            kernel: Tensor::new(
                vec![f, 1, 3, 3],
                (0..9 * f).map(|_| k.sample(rng)).collect(),
            ),
            mix_u: Tensor::matrix(1, f, (0..f).map(|_| m.sample(rng)).collect()),
            mix_v: Tensor::matrix(1, f, (0..f).map(|_| m.sample(rng)).collect()),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.kernel, &self.mix_u, &self.mix_v]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.kernel, &mut self.mix_u, &mut self.mix_v]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AngleVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        AngleVars {
            kernel: leaf(&self.kernel),
            mix_u: leaf(&self.mix_u),
            mix_v: leaf(&self.mix_v),
        }
    }
}

/// Cell energies `[F, cells]` of one level.
#[derive(Debug, Clone, Copy)]
pub struct LevelEnergy {
    pub grid: LevelGrid,
    pub energy: Var,
}

fn avg_pool_rows(w: usize, h: usize, grid: &LevelGrid, cell: usize) -> SparseRows {
    let mut rows = Vec::with_capacity(grid.len());
    for i in 0..grid.rows {
        for j in 0..grid.cols {
            let mut row = Vec::with_capacity(cell * cell);
            for y in i * cell..((i + 1) * cell).min(h) {
                for x in j * cell..((j + 1) * cell).min(w) {
                    row.push((y * w + x, 1.0));
                }
            }
            let n = row.len().max(1) as f64;
            row.iter_mut().for_each(|e| e.1 /= n);
            rows.push(row);
        }
    }
    rows
}

/// Filters with their mean removed, so flat regions give no response.
fn zero_mean_kernel(g: &mut Graph, kernel: Var) -> Result<Var> {
    let f = g.value(kernel).shape()[0];
    let proj: Vec<f64> = (0..81)
        .map(|k| {
            if k / 9 == k % 9 {
                1.0 - 1.0 / 9.0
            } else {
                -1.0 / 9.0
            }
        })
        .collect();
    let proj = g.constant(Tensor::matrix(9, 9, proj));
    let flat = g.reshape(kernel, vec![f, 9])?;
    let centered = g.matmul(flat, proj)?;
    g.reshape(centered, vec![f, 1, 3, 3])
}

/// Filters, squares and cell-pools every level of `image`.
pub fn level_energies(
    g: &mut Graph,
    vars: &AngleVars,
    image: &Image,
    cfg: &AngleConfig,
) -> Result<Vec<LevelEnergy>> {
    let grids = level_grids(image.canvas(), cfg);
    let kernel = zero_mean_kernel(g, vars.kernel)?;
    grids
        .into_iter()
        .enumerate()
        .map(|(p, grid)| {
            let img = image.downsample(1 << p);
            let (w, h) = (img.width, img.height);
            let x = g.constant(Tensor::new(vec![1, h, w], img.data));
            let y = g.conv3x3(x, kernel)?;
            let y2 = g.mul(y, y)?;
            let rows = Rc::new(avg_pool_rows(w, h, &grid, cfg.cell));
            let energy = g.sparse_pool(y2, rows)?;
            Ok(LevelEnergy { grid, energy })
        })
        .collect()
}

/// Normalized 1-D Gaussian taps over `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let t: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

fn window_row(grid: &LevelGrid, cell: usize, taps: &[f64]) -> Vec<(usize, f64)> {
    let r = (taps.len() / 2) as i64;
    let (ci, cj) = ((cell / grid.cols) as i64, (cell % grid.cols) as i64);
    let mut row = Vec::with_capacity(taps.len() * taps.len());
    for di in -r..=r {
        let i = ci + di;
        if i < 0 || i >= grid.rows as i64 {
            continue;
        }
        for dj in -r..=r {
            let j = cj + dj;
            if j < 0 || j >= grid.cols as i64 {
                continue;
            }
            let w = taps[(di + r) as usize] * taps[(dj + r) as usize];
            row.push((i as usize * grid.cols + j as usize, w));
        }
    }
    row
}

/// Angles `[1, M]` of the listed cells of one level.
pub fn cell_angles(
    g: &mut Graph,
    vars: &AngleVars,
    level: &LevelEnergy,
    cells: &[usize],
    cfg: &AngleConfig,
) -> Result<Var> {
    let taps = gaussian_taps(cfg.window_sigma);
    let rows: SparseRows = cells
        .iter()
        .map(|&c| window_row(&level.grid, c, &taps))
        .collect();
    let feats = g.sparse_pool(level.energy, Rc::new(rows))?;
    let u = g.matmul(vars.mix_u, feats)?;
    let v = g.matmul(vars.mix_v, feats)?;
    let a = g.atan2(v, u)?;
    g.scale(a, 0.5)
}

/// Means of consecutive runs of `theta` (`[1, M]`), run lengths `groups`.
/// Each run is unwrapped onto its first entry's branch before averaging.
pub fn mean_groups(g: &mut Graph, theta: Var, groups: &[usize]) -> Result<Var> {
    let vals = g.value(theta).data().to_vec();
    let mut offsets = Vec::with_capacity(vals.len());
    let mut rows: SparseRows = Vec::with_capacity(groups.len());
    let mut at = 0;
    for &n in groups {
        let run = vals.get(at..at + n).ok_or(AutodiffError::IndexOutOfRange {
            op: "mean_groups",
            index: at + n,
            len: vals.len(),
        })?;
        offsets.extend(unwrap_offsets(run));
        rows.push((at..at + n).map(|k| (k, 1.0 / n as f64)).collect());
        at += n;
    }
    let off = g.constant(Tensor::matrix(1, vals.len(), offsets));
    let shifted = g.add(theta, off)?;
    g.sparse_pool(shifted, Rc::new(rows))
}

/// Per-label level angles `[1, L]` from the positives of every label at one
/// level.
pub fn label_level_angles(
    g: &mut Graph,
    vars: &AngleVars,
    level: &LevelEnergy,
    positives: &[&[usize]],
    cfg: &AngleConfig,
) -> Result<Var> {
    let flat: Vec<usize> = positives.iter().flat_map(|c| c.iter().copied()).collect();
    let theta = cell_angles(g, vars, level, &flat, cfg)?;
    let lens: Vec<usize> = positives.iter().map(|c| c.len()).collect();
    mean_groups(g, theta, &lens)
}

/// Level angles for every label: `out[p]` has shape `[1, L]`.
pub fn pyramid_label_angles(
    g: &mut Graph,
    vars: &AngleVars,
    image: &Image,
    points: &[Point],
    angle_cfg: &AngleConfig,
    ds_cfg: &DsConfig,
) -> Result<Vec<Var>> {
    let levels = level_energies(g, vars, image, angle_cfg)?;
    let grids: Vec<LevelGrid> = levels.iter().map(|l| l.grid).collect();
    let pos = d2d_assign(points, &grids, ds_cfg);
    levels
        .iter()
        .enumerate()
        .map(|(p, level)| {
            let per_label: Vec<&[usize]> = pos.iter().map(|lv| lv[p].as_slice()).collect();
            label_level_angles(g, vars, level, &per_label, angle_cfg)
        })
        .collect()
}

fn blur_separable(src: &[f64], rows: usize, cols: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut tmp = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut s = 0.0;
            for (t, &w) in taps.iter().enumerate() {
                let jj = j as i64 + t as i64 - r;
                if jj >= 0 && jj < cols as i64 {
                    s += w * src[i * cols + jj as usize];
                }
            }
            tmp[i * cols + j] = s;
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut s = 0.0;
            for (t, &w) in taps.iter().enumerate() {
                let ii = i as i64 + t as i64 - r;
                if ii >= 0 && ii < rows as i64 {
                    s += w * tmp[ii as usize * cols + j];
                }
            }
            out[i * cols + j] = s;
        }
    }
    out
}

/// Dense angle maps of every level (no gradients).
pub fn dense_pyramid(
    params: &AngleParams,
    image: &Image,
    cfg: &AngleConfig,
) -> Result<FeaturePyramid> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let levels = level_energies(&mut g, &vars, image, cfg)?;
    let taps = gaussian_taps(cfg.window_sigma);
    let f = cfg.filters;
    let maps = levels
        .iter()
        .map(|level| {
            let grid = level.grid;
            let e = g.value(level.energy);
            let n = grid.len();
            let feats: Vec<Vec<f64>> = (0..f)
                .map(|c| blur_separable(&e.data()[c * n..(c + 1) * n], grid.rows, grid.cols, &taps))
                .collect();
            let angles = (0..n)
                .map(|k| {
                    let u: f64 = (0..f).map(|c| params.mix_u.data()[c] * feats[c][k]).sum();
                    let v: f64 = (0..f).map(|c| params.mix_v.data()[c] * feats[c][k]).sum();
                    0.5 * v.atan2(u)
                })
                .collect();
            LevelMap { grid, angles }
        })
        .collect();
    Ok(FeaturePyramid { levels: maps })
}

/// The enhanced-view relation the angle loss enforces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AngleRelation {
    /// `theta_e = theta + theta' (mod pi)`
    Rotation(f64),
    /// `theta_e = -theta (mod pi)`
    Flip,
}

impl AngleRelation {
    pub fn from_view(v: &AffineView) -> Self {
        match *v {
            AffineView::Rotate { theta } => AngleRelation::Rotation(theta),
            AffineView::VFlip => AngleRelation::Flip,
            AffineView::Identity | AffineView::Resize { .. } => AngleRelation::Rotation(0.0),
        }
    }

    fn residual(&self, orig: f64, enhanced: f64) -> f64 {
        match *self {
            AngleRelation::Rotation(t) => enhanced - orig - t,
            AngleRelation::Flip => enhanced + orig,
        }
    }
}

/// Best `k` for one label given its per-level residuals (first on ties).
pub fn best_k(residuals: &[f64], beta: f64) -> i32 {
    let cost = |k: i32| {
        residuals
            .iter()
            .map(|d| smooth_l1(d - k as f64 * PI, beta))
            .sum::<f64>()
    };
    (K_MIN..=K_MAX)
        .min_by(|&a, &b| cost(a).total_cmp(&cost(b)))
        .unwrap_or(0)
}

/// Angle loss from plain values: `orig[p][m]`, `enhanced[p][m]`.
pub fn ssa_value(orig: &[Vec<f64>], enhanced: &[Vec<f64>], rel: AngleRelation, beta: f64) -> f64 {
    let labels = orig.first().map_or(0, |v| v.len());
    if labels == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for m in 0..labels {
        let d: Vec<f64> = orig
            .iter()
            .zip(enhanced)
            .map(|(o, e)| rel.residual(o[m], e[m]))
            .collect();
        let k = best_k(&d, beta);
        total += d
            .iter()
            .map(|r| smooth_l1(r - k as f64 * PI, beta))
            .sum::<f64>();
    }
    total / labels as f64
}

/// Graph form of [`ssa_value`]; `orig[p]` and `enhanced[p]` are `[1, L]`.
/// The minimizing `k` is picked per label and held constant.
pub fn ssa_loss(
    g: &mut Graph,
    orig: &[Var],
    enhanced: &[Var],
    rel: AngleRelation,
    beta: f64,
) -> Result<Var> {
    if orig.len() != enhanced.len() || orig.is_empty() {
        return Err(AutodiffError::ShapeMismatch {
            op: "ssa_loss",
            lhs: vec![orig.len()],
            rhs: vec![enhanced.len()],
        });
    }
    let labels = g.value(orig[0]).len();
    if labels == 0 {
        return Ok(g.scalar(0.0));
    }
    let mut resid = Vec::with_capacity(orig.len());
    for (&o, &e) in orig.iter().zip(enhanced) {
        let d = match rel {
            AngleRelation::Rotation(t) => {
                let d = g.sub(e, o)?;
                g.add_scalar(d, -t)?
            }
            AngleRelation::Flip => g.add(e, o)?,
        };
        resid.push(d);
    }
    let ks: Vec<f64> = (0..labels)
        .map(|m| {
            let d: Vec<f64> = resid.iter().map(|&r| g.value(r).data()[m]).collect();
            best_k(&d, beta) as f64 * PI
        })
        .collect();
    let target = g.constant(Tensor::matrix(1, labels, ks));
    let mut total: Option<Var> = None;
    for d in resid {
        let l = g.smooth_l1(d, target, beta)?;
        let s = g.sum(l, None)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("at least one level");
    g.scale(total, 1.0 / labels as f64)
}
