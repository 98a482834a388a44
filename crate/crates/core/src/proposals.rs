//! Proposal bags around point labels and the scale-wise score regrouping.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::data::PointLabel;
use crate::geometry::HorizontalBox;

/// Basic scales (pixels, `sqrt(area)`) crossed with aspect ratios (`w/h`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagLayout {
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl Default for BagLayout {
    fn default() -> Self {
        Self {
            scales: vec![16.0, 32.0, 64.0, 128.0],
            ratios: vec![1.0 / 3.0, 0.5, 1.0, 2.0, 3.0],
        }
    }
}

impl BagLayout {
    /// Half-octave scales from 16 to 128 crossed with seven ratios from 1/3
    /// to 3 (`N = 49`).
    pub fn dense() -> Self {
        Self {
            scales: (0..7).map(|k| 16.0 * 2f64.powf(k as f64 / 2.0)).collect(),
            ratios: vec![1.0 / 3.0, 0.5, 2.0 / 3.0, 1.0, 1.5, 2.0, 3.0],
        }
    }

    pub fn new(scales: Vec<f64>, ratios: Vec<f64>) -> Result<Self, String> {
        let l = Self { scales, ratios };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err("bag layout needs at least one scale and one ratio".into());
        }
        if self.scales[0] <= 0.0 || self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err("scales must be positive and strictly increasing".into());
        }
        if self.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err("ratios must be positive".into());
        }
        Ok(())
    }

    /// Number of scale groups `G`.
    pub fn groups(&self) -> usize {
        self.scales.len()
    }

    pub fn num_ratios(&self) -> usize {
        self.ratios.len()
    }

    /// Bag size `N = G * R`.
    pub fn len(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position of `(g, r)` in the g-major bag order.
    pub fn index(&self, g: usize, r: usize) -> usize {
        g * self.ratios.len() + r
    }

    /// `(w, h)` of the proposal at `(g, r)`.
    pub fn extent(&self, g: usize, r: usize) -> (f64, f64) {
        let s = self.scales[g];
        let q = self.ratios[r].sqrt();
        (s * q, s / q)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalBag {
    pub point: PointLabel,
    /// g-major, r-minor.
    pub boxes: Vec<HorizontalBox>,
}

impl ProposalBag {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// The same bag with every box scaled about the origin by `sigma`, i.e.
    /// the index-aligned bag of a resized view.
    pub fn resized(&self, sigma: f64) -> ProposalBag {
        ProposalBag {
            point: PointLabel {
                x: self.point.x * sigma,
                y: self.point.y * sigma,
                ..self.point
            },
            boxes: self
                .boxes
                .iter()
                .map(|b| HorizontalBox::new(b.cx * sigma, b.cy * sigma, b.w * sigma, b.h * sigma))
                .collect(),
        }
    }
}

pub fn generate_bag(p: &PointLabel, layout: &BagLayout) -> ProposalBag {
    let mut boxes = Vec::with_capacity(layout.len());
    for g in 0..layout.groups() {
        for r in 0..layout.num_ratios() {
            let (w, h) = layout.extent(g, r);
            boxes.push(HorizontalBox::new(p.x, p.y, w, h));
        }
    }
    ProposalBag { point: *p, boxes }
}

fn check_rows(op: &'static str, shape: &[usize], layout: &BagLayout) -> Result<(), AutodiffError> {
    if shape.len() != 2 || shape[0] != layout.len() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![layout.groups(), layout.num_ratios()],
        });
    }
    Ok(())
}

/// `N x C` scores to `G x (R*C)`: row `g` concatenates the score rows of the
/// `R` proposals of scale `g`. Because bags are g-major this is a reshape.
pub fn regroup_scores(s: &Tensor, layout: &BagLayout) -> Result<Tensor, AutodiffError> {
    check_rows("regroup_scores", s.shape(), layout)?;
    let k = layout.num_ratios() * s.shape()[1];
    Ok(s.reshaped(vec![layout.groups(), k]))
}

pub fn ungroup_scores(s: &Tensor, layout: &BagLayout) -> Result<Tensor, AutodiffError> {
    if s.shape().len() != 2
        || s.shape()[0] != layout.groups()
        || !s.shape()[1].is_multiple_of(layout.num_ratios())
    {
        return Err(AutodiffError::ShapeMismatch {
            op: "ungroup_scores",
            lhs: s.shape().to_vec(),
            rhs: vec![layout.groups(), layout.num_ratios()],
        });
    }
    let c = s.shape()[1] / layout.num_ratios();
    Ok(s.reshaped(vec![layout.len(), c]))
}

/// Graph form of [`regroup_scores`].
pub fn regroup_var(g: &mut Graph, s: Var, layout: &BagLayout) -> Result<Var, AutodiffError> {
    let shape = g.value(s).shape().to_vec();
    check_rows("regroup_scores", &shape, layout)?;
    g.reshape(s, vec![layout.groups(), layout.num_ratios() * shape[1]])
}
