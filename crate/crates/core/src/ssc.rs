//! Scale-sensitive consistency between the score distributions of the
//! original view and the resized view.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_row, smooth_l1, AutodiffError, Graph, Tensor, Var};
use crate::mil::{ScorePair, ScoreVars};
use crate::proposals::{regroup_scores, regroup_var, BagLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SscConfig {
    /// Weight of the instance-stream term.
    pub w_ins: f64,
    /// Weight of the class-stream term.
    pub w_cls: f64,
    pub beta: f64,
}

impl Default for SscConfig {
    fn default() -> Self {
        Self {
            w_ins: 2.0,
            w_cls: 1.0,
            beta: 1.0,
        }
    }
}

impl SscConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.w_ins < 0.0 || self.w_cls < 0.0 || self.beta <= 0.0 {
            return Err("SSC weights must be non-negative and beta positive".into());
        }
        Ok(())
    }
}

/// Per-group cosine distances `1 - cos` between the two views.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSimilarity {
    pub sim_ins: Vec<f64>,
    pub sim_cls: Vec<f64>,
    /// Groups with a zero-norm row on either side; their distance is 1.
    pub flagged: usize,
}

impl GroupSimilarity {
    pub fn mean(&self) -> f64 {
        let n = self.sim_ins.len() + self.sim_cls.len();
        (self.sim_ins.iter().sum::<f64>() + self.sim_cls.iter().sum::<f64>()) / n.max(1) as f64
    }
}

fn distances(a: &Tensor, b: &Tensor) -> (Vec<f64>, usize) {
    let mut flagged = 0;
    let d = (0..a.rows())
        .map(|g| {
            let (cos, nu, nv) = cosine_row(a.row(g), b.row(g));
            if nu == 0.0 || nv == 0.0 {
                flagged += 1;
            }
            1.0 - cos
        })
        .collect();
    (d, flagged)
}

pub fn group_similarity(
    o: &ScorePair,
    d: &ScorePair,
    layout: &BagLayout,
) -> Result<GroupSimilarity, AutodiffError> {
    let (si, fi) = distances(
        &regroup_scores(&o.ins, layout)?,
        &regroup_scores(&d.ins, layout)?,
    );
    let (sc, fc) = distances(
        &regroup_scores(&o.cls, layout)?,
        &regroup_scores(&d.cls, layout)?,
    );
    Ok(GroupSimilarity {
        sim_ins: si,
        sim_cls: sc,
        flagged: fi + fc,
    })
}

/// Plain-value SSC loss summed over labels.
pub fn ssc_value(
    pairs: &[(ScorePair, ScorePair)],
    layout: &BagLayout,
    cfg: &SscConfig,
) -> Result<f64, AutodiffError> {
    let mut total = 0.0;
    for (o, d) in pairs {
        let s = group_similarity(o, d, layout)?;
        let li = cfg.w_ins
            * s.sim_ins
                .iter()
                .map(|&v| smooth_l1(v, cfg.beta))
                .sum::<f64>();
        let lc = cfg.w_cls
            * s.sim_cls
                .iter()
                .map(|&v| smooth_l1(v, cfg.beta))
                .sum::<f64>();
        total += li + lc;
    }
    Ok(total)
}

fn stream_term(
    g: &mut Graph,
    a: Var,
    b: Var,
    layout: &BagLayout,
    beta: f64,
) -> Result<Var, AutodiffError> {
    let ra = regroup_var(g, a, layout)?;
    let rb = regroup_var(g, b, layout)?;
    let cos = g.cosine_similarity(ra, rb)?;
    let neg = g.neg(cos)?;
    let dist = g.add_scalar(neg, 1.0)?;
    let zero = g.constant(Tensor::zeros(vec![layout.groups()]));
    let l = g.smooth_l1(dist, zero, beta)?;
    g.sum(l, None)
}

/// Graph form of [`ssc_value`]: `(original, resized)` scores per label.
pub fn ssc_loss(
    g: &mut Graph,
    pairs: &[(ScoreVars, ScoreVars)],
    layout: &BagLayout,
    cfg: &SscConfig,
) -> Result<Var, AutodiffError> {
    let mut total: Option<Var> = None;
    for (o, d) in pairs {
        let li = stream_term(g, o.ins, d.ins, layout, cfg.beta)?;
        let lc = stream_term(g, o.cls, d.cls, layout, cfg.beta)?;
        let li = g.scale(li, cfg.w_ins)?;
        let lc = g.scale(lc, cfg.w_cls)?;
        let t = g.add(li, lc)?;
        total = Some(match total {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.scalar(0.0),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check_default;

    fn layout() -> BagLayout {
        BagLayout::new(vec![1.0, 2.0], vec![1.0, 2.0]).unwrap()
    }

    fn random_pair(rng: &mut ChaCha8Rng) -> ScorePair {
        let l: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        ScorePair::from_logits(&Tensor::matrix(4, 2, l), &Tensor::matrix(4, 2, c))
    }

    #[test]
    fn identical_views_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pair(&mut rng);
        let s = group_similarity(&p, &p, &layout()).unwrap();
        assert!(s.sim_ins.iter().chain(&s.sim_cls).all(|v| v.abs() < 1e-12));
        assert!(ssc_value(&[(p.clone(), p)], &layout(), &SscConfig::default()).unwrap() < 1e-20);
    }

    #[test]
    fn orthogonal_antiparallel_and_zero_rows() {
        let one = BagLayout::new(vec![1.0], vec![1.0]).unwrap();
        let mk = |v: Vec<f64>| ScorePair {
            ins: Tensor::matrix(1, 2, v.clone()),
            cls: Tensor::matrix(1, 2, v),
        };
        let s = group_similarity(&mk(vec![1.0, 0.0]), &mk(vec![0.0, 1.0]), &one).unwrap();
        assert_eq!(s.sim_ins, vec![1.0]);
        let s = group_similarity(&mk(vec![1.0, 0.5]), &mk(vec![-1.0, -0.5]), &one).unwrap();
        assert!((s.sim_ins[0] - 2.0).abs() < 1e-12);
        let s = group_similarity(&mk(vec![0.0, 0.0]), &mk(vec![1.0, 0.5]), &one).unwrap();
        assert_eq!(s.sim_ins, vec![1.0]);
        assert_eq!(s.flagged, 2);
    }

    #[test]
    fn half_distance_hand_value() {
        // cos = 0.5 in both streams: vectors 60 degrees apart.
        let one = BagLayout::new(vec![1.0], vec![1.0]).unwrap();
        let a = Tensor::matrix(1, 2, vec![1.0, 0.0]);
        let b = Tensor::matrix(1, 2, vec![0.5, 0.75f64.sqrt()]);
        let o = ScorePair {
            ins: a.clone(),
            cls: a,
        };
        let d = ScorePair {
            ins: b.clone(),
            cls: b,
        };
        let v = ssc_value(&[(o.clone(), d.clone())], &one, &SscConfig::default()).unwrap();
        assert!((v - 0.375).abs() < 1e-12);
        let v2 = ssc_value(
            &[(o.clone(), d.clone()), (o, d)],
            &one,
            &SscConfig::default(),
        )
        .unwrap();
        assert_eq!(v2, 2.0 * v);
    }

    #[test]
    fn graph_matches_values_and_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = layout();
        let cfg = SscConfig::default();
        for _ in 0..20 {
            let x = Tensor::vector((0..32).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let build = |g: &mut Graph, v: Var| -> Result<Var, AutodiffError> {
                let m = g.reshape(v, vec![4, 8])?;
                let pick = |g: &mut Graph, k: usize| -> Result<Var, AutodiffError> {
                    let rows = std::rc::Rc::new(
                        (0..4)
                            .flat_map(|i| (0..2).map(move |j| vec![(i * 8 + 2 * k + j, 1.0)]))
                            .collect::<crate::autodiff::SparseRows>(),
                    );
                    let flat = g.reshape(m, vec![1, 32])?;
                    let p = g.sparse_pool(flat, rows)?;
                    g.reshape(p, vec![4, 2])
                };
                let (a, b, c, d) = (pick(g, 0)?, pick(g, 1)?, pick(g, 2)?, pick(g, 3)?);
                let s = |g: &mut Graph, li: Var, lc: Var| -> Result<ScoreVars, AutodiffError> {
                    let ins = g.softmax(li, 0)?;
                    let cls = g.softmax(lc, 1)?;
                    let p = g.mul(ins, cls)?;
                    let bag = g.sum(p, Some(0))?;
                    Ok(ScoreVars { ins, cls, bag })
                };
                let o = s(g, a, b)?;
                let r = s(g, c, d)?;
                ssc_loss(g, &[(o, r)], &l, &cfg)
            };
            let rep = grad_check_default(build, &x).unwrap();
            assert!(rep.max_rel_error < 1e-5, "{}", rep.max_rel_error);

            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let loss = build(&mut g, v).unwrap();
            let col = |k: usize| {
                Tensor::matrix(
                    4,
                    2,
                    (0..4)
                        .flat_map(|i| x.data()[i * 8 + 2 * k..i * 8 + 2 * k + 2].to_vec())
                        .collect(),
                )
            };
            let o = ScorePair::from_logits(&col(0), &col(1));
            let d = ScorePair::from_logits(&col(2), &col(3));
            let want = ssc_value(&[(o, d)], &l, &cfg).unwrap();
            assert!((g.value(loss).item() - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn positive_row_scaling_is_invisible(seed in 0u64..500, k in 0.1f64..10.0, grp in 0usize..2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (o, d) = (random_pair(&mut rng), random_pair(&mut rng));
            let base = ssc_value(&[(o.clone(), d.clone())], &layout(), &SscConfig::default()).unwrap();
            prop_assert!(base >= 0.0);
            let scale = |p: &ScorePair| {
                let f = |t: &Tensor| {
                    let mut t = t.clone();
                    for v in &mut t.data_mut()[grp * 4..grp * 4 + 4] {
                        *v *= k;
                    }
                    t
                };
                ScorePair { ins: f(&p.ins), cls: f(&p.cls) }
            };
            let moved = ssc_value(&[(scale(&o), scale(&d))], &layout(), &SscConfig::default()).unwrap();
            prop_assert!((base - moved).abs() < 1e-12);
        }
    }
}
