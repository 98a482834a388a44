//! Finite-difference checks of every training loss at seeded random inputs.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::angle::{best_k, ssa_loss, AngleRelation};
use crate::autodiff::{grad_check_default, AutodiffError, Graph, SparseRows, Tensor, Var};
use crate::mil::{mil_loss, refined_mil_loss, MilError, ScoreVars};
use crate::proposals::BagLayout;
use crate::ssc::{ssc_loss, SscConfig};

/// Largest accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-5;

const SUITE_STREAM: u64 = 0x6772_6164;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

/// Which cases to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fixture {
    Losses,
    /// A loss whose gradient is cut through one factor; must fail.
    Broken,
}

type Loss = Box<dyn Fn(&mut Graph, Var) -> Result<Var, AutodiffError>>;

fn mil_err(e: MilError) -> AutodiffError {
    match e {
        MilError::Autodiff(e) => e,
        // Labels and bag sizes are fixed above.
        other => unreachable!("malformed suite input: {other}"),
    }
}

/// Entries `start..start + rows * cols` of a flat input as a matrix.
fn slice(
    g: &mut Graph,
    v: Var,
    start: usize,
    rows: usize,
    cols: usize,
) -> Result<Var, AutodiffError> {
    let n = g.value(v).len();
    let pick = Rc::new(
        (0..rows * cols)
            .map(|i| vec![(start + i, 1.0)])
            .collect::<SparseRows>(),
    );
    let flat = g.reshape(v, vec![1, n])?;
    let p = g.sparse_pool(flat, pick)?;
    g.reshape(p, vec![rows, cols])
}

fn dual_stream(g: &mut Graph, li: Var, lc: Var) -> Result<ScoreVars, AutodiffError> {
    let ins = g.softmax(li, 0)?;
    let cls = g.softmax(lc, 1)?;
    let p = g.mul(ins, cls)?;
    let bag = g.sum(p, Some(0))?;
    Ok(ScoreVars { ins, cls, bag })
}

const BAG: usize = 6;
const CLASSES: usize = 3;

/// Two bags of logits through the dual-stream head into a bag loss.
fn bag_case(focal: bool) -> (Loss, usize) {
    let per = 2 * BAG * CLASSES;
    let f: Loss = Box::new(move |g, v| {
        let mut bags = Vec::new();
        for b in 0..2 {
            let li = slice(g, v, b * per, BAG, CLASSES)?;
            let lc = slice(g, v, b * per + BAG * CLASSES, BAG, CLASSES)?;
            bags.push(dual_stream(g, li, lc)?.bag);
        }
        if focal {
            refined_mil_loss(g, &bags, &[1, 2], 2.0, 0.25).map_err(mil_err)
        } else {
            mil_loss(g, &bags, &[0, 2]).map_err(mil_err)
        }
    });
    (f, 2 * per)
}

fn ssc_case() -> (Loss, usize) {
    let layout = BagLayout::new(vec![1.0, 2.0, 3.0], vec![1.0, 2.0]).expect("valid layout");
    let n = layout.len();
    let per = n * CLASSES;
    let f: Loss = Box::new(move |g, v| {
        let mut s = Vec::new();
        for k in 0..4 {
            s.push(slice(g, v, k * per, n, CLASSES)?);
        }
        let o = dual_stream(g, s[0], s[1])?;
        let r = dual_stream(g, s[2], s[3])?;
        ssc_loss(g, &[(o, r)], &layout, &SscConfig::default())
    });
    (f, 4 * per)
}

const LEVELS: usize = 3;
const LABELS: usize = 2;
const SSA_BETA: f64 = 0.1;

fn ssa_case(rel: AngleRelation) -> (Loss, usize) {
    let f: Loss = Box::new(move |g, v| {
        let mut o = Vec::new();
        let mut e = Vec::new();
        for m in 0..LEVELS {
            o.push(slice(g, v, m * LABELS, 1, LABELS)?);
            e.push(slice(g, v, (LEVELS + m) * LABELS, 1, LABELS)?);
        }
        ssa_loss(g, &o, &e, rel, SSA_BETA)
    });
    (f, 2 * LEVELS * LABELS)
}

/// Whether an angle input sits within `margin` of a smooth-L1 kink or a
/// change of the minimizing `k`, where central differences are meaningless.
fn near_ssa_kink(x: &[f64], rel: AngleRelation, margin: f64) -> bool {
    (0..LABELS).any(|p| {
        let d: Vec<f64> = (0..LEVELS)
            .map(|m| {
                let (o, e) = (x[m * LABELS + p], x[(LEVELS + m) * LABELS + p]);
                match rel {
                    AngleRelation::Rotation(t) => e - o - t,
                    AngleRelation::Flip => e + o,
                }
            })
            .collect();
        let k = best_k(&d, SSA_BETA);
        let shifted = |s: f64| {
            let dd: Vec<f64> = d.iter().map(|r| r + s).collect();
            best_k(&dd, SSA_BETA)
        };
        let tie = shifted(margin) != k || shifted(-margin) != k;
        tie || d
            .iter()
            .any(|r| ((r - k as f64 * PI).abs() - SSA_BETA).abs() < margin)
    })
}

/// `sum(x * stop(x))`: the analytic gradient misses half of `2x`.
fn broken_case() -> (Loss, usize) {
    let f: Loss = Box::new(|g, v| {
        let frozen = g.constant(g.value(v).clone());
        let p = g.mul(v, frozen)?;
        g.sum(p, None)
    });
    (f, 4)
}

fn run_case(
    name: &str,
    (f, len): (Loss, usize),
    points: usize,
    rng: &mut ChaCha8Rng,
    range: f64,
    skip: impl Fn(&[f64]) -> bool,
) -> Result<GradCase, AutodiffError> {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < points {
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-range..range)).collect();
        if skip(&x) {
            continue;
        }
        let rep = grad_check_default(&f, &Tensor::vector(x))?;
        worst = worst.max(rep.max_rel_error);
        done += 1;
    }
    Ok(GradCase {
        name: name.to_string(),
        points,
        max_rel_error: worst,
    })
}

/// Runs each case at `points` seeded random inputs.
pub fn gradcheck_suite(
    seed: u64,
    points: usize,
    fixture: Fixture,
) -> Result<Vec<GradCase>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::data::derive_seed(seed, SUITE_STREAM));
    let none = |_: &[f64]| false;
    if fixture == Fixture::Broken {
        return Ok(vec![run_case(
            "broken",
            broken_case(),
            points,
            &mut rng,
            2.0,
            none,
        )?]);
    }
    let rot = AngleRelation::Rotation(rng.gen_range(-PI..PI));
    Ok(vec![
        run_case("mil", bag_case(false), points, &mut rng, 2.0, none)?,
        run_case("focal", bag_case(true), points, &mut rng, 2.0, none)?,
        run_case("ssc", ssc_case(), points, &mut rng, 2.0, none)?,
        run_case("ssa_rotation", ssa_case(rot), points, &mut rng, 1.5, |x| {
            near_ssa_kink(x, rot, 1e-3)
        })?,
        run_case(
            "ssa_flip",
            ssa_case(AngleRelation::Flip),
            points,
            &mut rng,
            1.5,
            |x| near_ssa_kink(x, AngleRelation::Flip, 1e-3),
        )?,
    ])
}
