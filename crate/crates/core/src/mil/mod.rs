//! Dual-stream MIL head, bag scores, the MIL and focal losses and pseudo-box
//! selection.

mod features;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax_raw, AutodiffError, Graph, Tensor, Var};
use crate::geometry::{OrientedBox, Point};

pub use features::{proposal_features, FEATURE_DIM};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the losses.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MilError {
    #[error("empty proposal bag")]
    EmptyBag,
    #[error("class {class} out of range for {classes} classes")]
    BadClass { class: usize, classes: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, MilError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MilConfig {
    pub hidden: usize,
    pub init_std: f64,
    /// Proposals averaged into the pseudo box.
    pub topk: usize,
    /// Proposals scoring below this are ignored when selecting.
    pub score_threshold: f64,
    pub focal_gamma: f64,
    pub focal_balance: f64,
    /// Start the MIL head afresh when proposals first receive angles.
    pub restart_on_orientation: bool,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            init_std: 0.5,
            topk: 3,
            score_threshold: 0.0,
            focal_gamma: 2.0,
            focal_balance: 0.25,
            restart_on_orientation: true,
        }
    }
}

/// Instance and class stream weights of one dual-stream head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamParams {
    pub w_ins: Tensor,
    pub b_ins: Tensor,
    pub w_cls: Tensor,
    pub b_cls: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub main: StreamParams,
    pub refined: StreamParams,
}

#[derive(Debug, Clone, Copy)]
pub struct StreamVars {
    pub w_ins: Var,
    pub b_ins: Var,
    pub w_cls: Var,
    pub b_cls: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct MilVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub main: StreamVars,
    pub refined: StreamVars,
}

impl MilVars {
    /// Same order as [`MilParams::tensors`].
    pub fn all(&self) -> [Var; 12] {
        let (m, r) = (&self.main, &self.refined);
        [
            self.w1, self.b1, self.w2, self.b2, m.w_ins, m.b_ins, m.w_cls, m.b_cls, r.w_ins,
            r.b_ins, r.w_cls, r.b_cls,
        ]
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let d = Normal::new(0.0, std).expect("finite std");
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| d.sample(rng)).collect(),
    )
}

impl StreamParams {
    fn init<R: Rng + ?Sized>(hidden: usize, classes: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w_ins: gaussian(rng, hidden, classes, std),
            b_ins: Tensor::zeros(vec![classes]),
            w_cls: gaussian(rng, hidden, classes, std),
            b_cls: Tensor::zeros(vec![classes]),
        }
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> StreamVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        StreamVars {
            w_ins: leaf(&self.w_ins),
            b_ins: leaf(&self.b_ins),
            w_cls: leaf(&self.w_cls),
            b_cls: leaf(&self.b_cls),
        }
    }
}

impl MilParams {
    pub fn init<R: Rng + ?Sized>(cfg: &MilConfig, classes: usize, rng: &mut R) -> Self {
        let h = cfg.hidden;
        let s1 = cfg.init_std * (2.0 / FEATURE_DIM as f64).sqrt();
        let s2 = cfg.init_std * (2.0 / h as f64).sqrt();
        Self {
            w1: gaussian(rng, FEATURE_DIM, h, s1),
            b1: Tensor::zeros(vec![h]),
            w2: gaussian(rng, h, h, s2),
            b2: Tensor::zeros(vec![h]),
            main: StreamParams::init(h, classes, s2, rng),
            refined: StreamParams::init(h, classes, s2, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.main.b_cls.len()
    }

    pub fn tensors(&self) -> [&Tensor; 12] {
        let (m, r) = (&self.main, &self.refined);
        [
            &self.w1, &self.b1, &self.w2, &self.b2, &m.w_ins, &m.b_ins, &m.w_cls, &m.b_cls,
            &r.w_ins, &r.b_ins, &r.w_cls, &r.b_cls,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        let (m, r) = (&mut self.main, &mut self.refined);
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut m.w_ins,
            &mut m.b_ins,
            &mut m.w_cls,
            &mut m.b_cls,
            &mut r.w_ins,
            &mut r.b_ins,
            &mut r.w_cls,
            &mut r.b_cls,
        ]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MilVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let (w1, b1, w2, b2) = (
            leaf(&self.w1),
            leaf(&self.b1),
            leaf(&self.w2),
            leaf(&self.b2),
        );
        MilVars {
            w1,
            b1,
            w2,
            b2,
            main: self.main.bind(g, trainable),
            refined: self.refined.bind(g, trainable),
        }
    }
}

/// Scores of one bag as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct ScoreVars {
    /// `N x C`, softmax over proposals.
    pub ins: Var,
    /// `N x C`, softmax over classes.
    pub cls: Var,
    /// `C`, `sum_n ins * cls`.
    pub bag: Var,
}

/// Plain-value form of [`ScoreVars`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePair {
    pub ins: Tensor,
    pub cls: Tensor,
}

impl ScorePair {
    pub fn from_logits(ins_logits: &Tensor, cls_logits: &Tensor) -> Self {
        Self {
            ins: softmax_raw(ins_logits, 0),
            cls: softmax_raw(cls_logits, 1),
        }
    }

    pub fn from_vars(g: &Graph, s: &ScoreVars) -> Self {
        Self {
            ins: g.value(s.ins).clone(),
            cls: g.value(s.cls).clone(),
        }
    }

    pub fn bag_score(&self) -> Vec<f64> {
        let (n, c) = (self.ins.rows(), self.ins.cols());
        (0..c)
            .map(|j| (0..n).map(|i| self.ins.at(i, j) * self.cls.at(i, j)).sum())
            .collect()
    }

    /// `ins * cls` of every proposal at `class`.
    pub fn proposal_scores(&self, class: usize) -> Vec<f64> {
        (0..self.ins.rows())
            .map(|i| self.ins.at(i, class) * self.cls.at(i, class))
            .collect()
    }
}

/// Two-layer tanh embedding of an `N x FEATURE_DIM` feature matrix.
pub fn embed(g: &mut Graph, vars: &MilVars, feats: &Tensor) -> Result<Var> {
    if feats.rows() == 0 || feats.is_empty() {
        return Err(MilError::EmptyBag);
    }
    let x = g.constant(feats.clone());
    let h = g.matmul(x, vars.w1)?;
    let h = g.add_row(h, vars.b1)?;
    let h = g.tanh(h)?;
    let e = g.matmul(h, vars.w2)?;
    let e = g.add_row(e, vars.b2)?;
    Ok(g.tanh(e)?)
}

/// Dual-stream scores from an embedding.
pub fn score_stream(g: &mut Graph, s: &StreamVars, emb: Var) -> Result<ScoreVars> {
    let li = g.matmul(emb, s.w_ins)?;
    let li = g.add_row(li, s.b_ins)?;
    let lc = g.matmul(emb, s.w_cls)?;
    let lc = g.add_row(lc, s.b_cls)?;
    let ins = g.softmax(li, 0)?;
    let cls = g.softmax(lc, 1)?;
    let prod = g.mul(ins, cls)?;
    let bag = g.sum(prod, Some(0))?;
    Ok(ScoreVars { ins, cls, bag })
}

/// Main-head scores of one bag plus its embedding (for the refined head).
pub fn score_bag(g: &mut Graph, vars: &MilVars, feats: &Tensor) -> Result<(ScoreVars, Var)> {
    let emb = embed(g, vars, feats)?;
    Ok((score_stream(g, &vars.main, emb)?, emb))
}

/// Main and refined scores without gradients.
pub fn score_bag_values(params: &MilParams, feats: &Tensor) -> Result<(ScorePair, ScorePair)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let (main, emb) = score_bag(&mut g, &vars, feats)?;
    let refined = score_stream(&mut g, &vars.refined, emb)?;
    Ok((
        ScorePair::from_vars(&g, &main),
        ScorePair::from_vars(&g, &refined),
    ))
}

fn one_hot(g: &mut Graph, class: usize, classes: usize) -> Result<(Var, Var)> {
    if class >= classes {
        return Err(MilError::BadClass { class, classes });
    }
    let q: Vec<f64> = (0..classes)
        .map(|c| if c == class { 1.0 } else { 0.0 })
        .collect();
    let nq = q.iter().map(|v| 1.0 - v).collect();
    Ok((
        g.constant(Tensor::vector(q)),
        g.constant(Tensor::vector(nq)),
    ))
}

/// `log p` and `log(1 - p)` of clamped probabilities, plus `p` and `1 - p`.
fn clamped_logs(g: &mut Graph, s: Var) -> Result<[Var; 4]> {
    let p = g.clamp(s, PROB_EPS, 1.0 - PROB_EPS)?;
    let lp = g.log(p)?;
    let np = g.neg(p)?;
    let q = g.add_scalar(np, 1.0)?;
    let lq = g.log(q)?;
    Ok([p, q, lp, lq])
}

fn mean_of(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(g.scalar(0.0));
    };
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / n as f64)?)
}

/// Mean over bags of the class-summed binary cross-entropy.
pub fn mil_loss(g: &mut Graph, bags: &[Var], labels: &[usize]) -> Result<Var> {
    let mut terms = Vec::with_capacity(bags.len());
    for (&s, &y) in bags.iter().zip(labels) {
        let classes = g.value(s).len();
        let (q, nq) = one_hot(g, y, classes)?;
        let [_, _, lp, lq] = clamped_logs(g, s)?;
        let a = g.mul(q, lp)?;
        let b = g.mul(nq, lq)?;
        let ab = g.add(a, b)?;
        let t = g.sum(ab, None)?;
        terms.push(g.neg(t)?);
    }
    mean_of(g, terms)
}

/// Focal form of [`mil_loss`] for the refined head:
/// `balance * sum_c [q (1-p)^gamma (-log p) + (1-q) p^gamma (-log(1-p))]`.
pub fn refined_mil_loss(
    g: &mut Graph,
    bags: &[Var],
    labels: &[usize],
    gamma: f64,
    balance: f64,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(bags.len());
    for (&s, &y) in bags.iter().zip(labels) {
        let classes = g.value(s).len();
        let (q, nq) = one_hot(g, y, classes)?;
        let [p, np, lp, lq] = clamped_logs(g, s)?;
        let mp = g.pow(np, gamma)?;
        let a = g.mul(q, mp)?;
        let a = g.mul(a, lp)?;
        let pp = g.pow(p, gamma)?;
        let b = g.mul(nq, pp)?;
        let b = g.mul(b, lq)?;
        let ab = g.add(a, b)?;
        let t = g.sum(ab, None)?;
        terms.push(g.scale(t, -balance)?);
    }
    mean_of(g, terms)
}

fn clampp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Plain-value [`mil_loss`].
pub fn mil_value(bags: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = bags
        .iter()
        .zip(labels)
        .map(|(s, &y)| {
            s.iter()
                .enumerate()
                .map(|(c, &p)| {
                    let p = clampp(p);
                    if c == y {
                        -p.ln()
                    } else {
                        -(1.0 - p).ln()
                    }
                })
                .sum::<f64>()
        })
        .sum();
    total / bags.len().max(1) as f64
}

/// Plain-value [`refined_mil_loss`].
pub fn focal_value(bags: &[Vec<f64>], labels: &[usize], gamma: f64, balance: f64) -> f64 {
    let total: f64 = bags
        .iter()
        .zip(labels)
        .map(|(s, &y)| {
            s.iter()
                .enumerate()
                .map(|(c, &p)| {
                    let p = clampp(p);
                    if c == y {
                        -(1.0 - p).powf(gamma) * p.ln()
                    } else {
                        -p.powf(gamma) * (1.0 - p).ln()
                    }
                })
                .sum::<f64>()
        })
        .sum();
    balance * total / bags.len().max(1) as f64
}

/// Selected pseudo box and its confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub obb: OrientedBox,
    pub confidence: f64,
    /// Index of the best proposal.
    pub best: usize,
}

/// Score-weighted mean size of the `k` best proposals, oriented like the
/// best one and centered on `point`. With fewer than `k` candidates the best
/// proposal is returned as is.
pub fn select_pseudo_obb(
    point: Point,
    boxes: &[OrientedBox],
    scores: &[f64],
    k: usize,
    threshold: f64,
) -> Option<Selection> {
    if boxes.is_empty() || boxes.len() != scores.len() {
        return None;
    }
    let mut idx: Vec<usize> = (0..boxes.len())
        .filter(|&i| scores[i] >= threshold)
        .collect();
    if idx.is_empty() {
        idx = (0..boxes.len()).collect();
    }
    // Stable, so ties keep bag order.
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let best = idx[0];
    let confidence = scores[best].clamp(0.0, 1.0);
    if k == 0 || k > idx.len() {
        return Some(Selection {
            obb: boxes[best],
            confidence,
            best,
        });
    }
    let top = &idx[..k];
    let total: f64 = top.iter().map(|&i| scores[i].max(0.0)).sum();
    let weight = |i: usize| {
        if total > 0.0 {
            scores[i].max(0.0) / total
        } else {
            1.0 / k as f64
        }
    };
    let w = top.iter().map(|&i| weight(i) * boxes[i].w).sum();
    let h = top.iter().map(|&i| weight(i) * boxes[i].h).sum();
    Some(Selection {
        obb: OrientedBox::new(point[0], point[1], w, h, boxes[best].theta),
        confidence,
        best,
    })
}

#[cfg(test)]
mod tests;
