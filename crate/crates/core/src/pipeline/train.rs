use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, RunConfig};
use crate::angle::{
    dense_pyramid, ds_match, pyramid_label_angles, ssa_loss, AngleParams, AngleRelation, DsConfig,
    FeaturePyramid,
};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{derive_seed, LabeledScene, PointLabel};
use crate::geometry::OrientedBox;
use crate::image::Image;
use crate::mil::{
    mil_loss, proposal_features, refined_mil_loss, score_bag, score_stream, MilParams, ScoreVars,
    FEATURE_DIM,
};
use crate::optim::Optimizer;
use crate::proposals::{generate_bag, ProposalBag};
use crate::scheduler::{
    component_gates, total_loss_graph, LossComponents, Stage, StageState, COMPONENT_NAMES,
};
use crate::ssc::ssc_loss;
use crate::views::{build_resized_with, build_rotflp, sample_sigma};

const TRAIN_STREAM: u64 = 0x74_7261_696e;

/// Learned parameters of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub classes: Vec<String>,
    pub mil: MilParams,
    pub angle: AngleParams,
    /// Whether training reached stage 3, i.e. whether proposals get angles
    /// from dense-to-sparse matching.
    pub ds_enabled: bool,
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        super::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        super::read_json(path)
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: Stage,
    pub resized_gate: u8,
    pub rotflp_gate: u8,
    pub components: LossComponents<f64>,
    pub total: f64,
    pub lr: f64,
}

/// Writes the log as JSON lines.
pub fn write_log(path: &Path, log: &[LossRecord]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for r in log {
        let line = serde_json::to_string(r).map_err(|source| PipelineError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub model: TrainedModel,
    pub log: Vec<LossRecord>,
}

/// Horizontal proposals of `bag` oriented by dense-to-sparse matching, or
/// left horizontal without a pyramid.
pub fn orient_bag(
    bag: &ProposalBag,
    pyr: Option<&FeaturePyramid>,
    ds: &DsConfig,
) -> Vec<OrientedBox> {
    bag.boxes
        .iter()
        .map(|b| b.with_angle(pyr.map_or(0.0, |p| ds_match(b, p, ds))))
        .collect()
}

pub fn bag_features(image: &Image, boxes: &[OrientedBox]) -> Tensor {
    let data = boxes
        .iter()
        .flat_map(|b| proposal_features(image, b))
        .collect();
    Tensor::matrix(boxes.len(), FEATURE_DIM, data)
}

/// Labels usable in this scene: inside the canvas with a known class.
fn usable(points: &[PointLabel], classes: usize) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| points[i].class_id < classes)
        .collect()
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Option<Var>, PipelineError> {
    let mut acc: Option<Var> = None;
    for &v in vars {
        acc = Some(match acc {
            Some(a) => g.add(a, v)?,
            None => v,
        });
    }
    Ok(acc)
}

#[derive(Default)]
struct StepTerms {
    ori: Vec<Var>,
    refined: Vec<Var>,
    labels: Vec<usize>,
    res: Vec<Var>,
    res_labels: Vec<usize>,
    ssc_pairs: Vec<(ScoreVars, ScoreVars)>,
    rfv: Vec<Var>,
    rfv_labels: Vec<usize>,
    ssa: Vec<Var>,
}

/// Runs the staged loop on `scenes`.
fn seeded_init(cfg: &RunConfig) -> (MilParams, AngleParams, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TRAIN_STREAM));
    let mil = MilParams::init(&cfg.mil, cfg.dataset.scene.num_classes(), &mut rng);
    let angle = AngleParams::init(&cfg.angle, &mut rng);
    (mil, angle, rng)
}

/// The parameters a run of `cfg` starts from.
pub fn init_model(cfg: &RunConfig) -> TrainedModel {
    let (mil, angle, _) = seeded_init(cfg);
    TrainedModel {
        classes: cfg.dataset.scene.classes.clone(),
        mil,
        angle,
        ds_enabled: false,
    }
}

pub fn train(cfg: &RunConfig, scenes: &[LabeledScene]) -> Result<TrainOutput, PipelineError> {
    cfg.validate()?;
    let classes = cfg.dataset.scene.num_classes();
    let (mut mil, mut angle, mut rng) = seeded_init(cfg);
    let steps = cfg.schedule.steps;
    let mut log = Vec::with_capacity(steps);
    let mut ds_enabled = false;
    if steps == 0 || scenes.is_empty() {
        return Ok(TrainOutput {
            model: TrainedModel {
                classes: cfg.dataset.scene.classes.clone(),
                mil,
                angle,
                ds_enabled,
            },
            log,
        });
    }
    let sched = if cfg.schedule.stage1_only {
        None
    } else {
        Some(cfg.schedule.stage_schedule()?)
    };
    let mut opt_mil = Optimizer::new(&cfg.optim, &mil.tensors());
    let mut opt_angle = Optimizer::new(&cfg.optim, &angle.tensors());
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut cursor = order.len();

    for step in 0..steps {
        let state = match &sched {
            Some(s) => s.stage_at(step)?,
            None => StageState::of(Stage::S1ScaleAug),
        };
        if state.ds_active() && !ds_enabled {
            ds_enabled = true;
            // Weights fitted to horizontal proposals transfer badly to
            // oriented ones.
            if cfg.mil.restart_on_orientation {
                mil = MilParams::init(&cfg.mil, classes, &mut rng);
                opt_mil = Optimizer::new(&cfg.optim, &mil.tensors());
            }
        }
        let gates = component_gates(&state, cfg.schedule.wiring);
        let need_resized = gates[2] == 1 || gates[4] == 1;
        let need_rotflp = gates[3] == 1 || gates[5] == 1;

        let mut g = Graph::new();
        let mv = mil.bind(&mut g, true);
        let av = angle.bind(&mut g, true);
        let mut t = StepTerms::default();
        for _ in 0..cfg.schedule.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ls = &scenes[order[cursor]];
            cursor += 1;
            let keep = usable(&ls.points, classes);
            if keep.is_empty() {
                continue;
            }
            let pyr = if state.ds_active() {
                Some(dense_pyramid(&angle, &ls.scene.image, &cfg.angle)?)
            } else {
                None
            };
            let mut main_o = Vec::with_capacity(keep.len());
            for &i in &keep {
                let p = &ls.points[i];
                let bag = generate_bag(p, &cfg.layout);
                let boxes = orient_bag(&bag, pyr.as_ref(), &cfg.ds);
                let feats = bag_features(&ls.scene.image, &boxes);
                let (s, emb) = score_bag(&mut g, &mv, &feats)?;
                let r = score_stream(&mut g, &mv.refined, emb)?;
                t.ori.push(s.bag);
                t.refined.push(r.bag);
                t.labels.push(p.class_id);
                main_o.push((s, boxes));
            }
            if need_resized {
                let sigma = sample_sigma(&cfg.views, &mut rng);
                let bundle = build_resized_with(ls, sigma);
                let image = &bundle.enhanced.scene.image;
                for (k, &i) in keep.iter().enumerate() {
                    if !bundle.enhanced.in_view[i] {
                        continue;
                    }
                    let boxes: Vec<OrientedBox> =
                        main_o[k].1.iter().map(|b| scale_box(b, sigma)).collect();
                    let feats = bag_features(image, &boxes);
                    let (s, _) = score_bag(&mut g, &mv, &feats)?;
                    t.res.push(s.bag);
                    t.res_labels.push(ls.points[i].class_id);
                    t.ssc_pairs.push((main_o[k].0, s));
                }
            }
            if need_rotflp {
                let bundle = build_rotflp(ls, &cfg.views, &mut rng);
                let valid: Vec<usize> = keep
                    .iter()
                    .copied()
                    .filter(|&i| bundle.enhanced.in_view[i])
                    .collect();
                if valid.is_empty() {
                    continue;
                }
                let image = &bundle.enhanced.scene.image;
                let epyr = if state.ds_active() {
                    Some(dense_pyramid(&angle, image, &cfg.angle)?)
                } else {
                    None
                };
                for &i in &valid {
                    let p = &bundle.enhanced.points[i];
                    let boxes = orient_bag(&generate_bag(p, &cfg.layout), epyr.as_ref(), &cfg.ds);
                    let feats = bag_features(image, &boxes);
                    let (s, _) = score_bag(&mut g, &mv, &feats)?;
                    t.rfv.push(s.bag);
                    t.rfv_labels.push(p.class_id);
                }
                let po: Vec<_> = valid
                    .iter()
                    .map(|&i| bundle.original.points[i].pos())
                    .collect();
                let pe: Vec<_> = valid
                    .iter()
                    .map(|&i| bundle.enhanced.points[i].pos())
                    .collect();
                let o = pyramid_label_angles(
                    &mut g,
                    &av,
                    &bundle.original.scene.image,
                    &po,
                    &cfg.angle,
                    &cfg.ds,
                )?;
                let e = pyramid_label_angles(&mut g, &av, image, &pe, &cfg.angle, &cfg.ds)?;
                let rel = AngleRelation::from_view(&bundle.transform);
                t.ssa.push(ssa_loss(&mut g, &o, &e, rel, cfg.angle.beta)?);
            }
        }

        let lr = cfg.optim.lr_at(step, steps);
        if t.ori.is_empty() {
            log.push(LossRecord {
                step,
                stage: state.stage,
                resized_gate: state.resized_gate,
                rotflp_gate: state.rotflp_gate,
                components: LossComponents::default(),
                total: 0.0,
                lr,
            });
            continue;
        }
        let on = |k: usize| gates[k] == 1;
        let mut comps = LossComponents::<Var> {
            mil_ori: Some(mil_loss(&mut g, &t.ori, &t.labels)?),
            mil_ref: Some(refined_mil_loss(
                &mut g,
                &t.refined,
                &t.labels,
                cfg.mil.focal_gamma,
                cfg.mil.focal_balance,
            )?),
            ..Default::default()
        };
        if on(2) {
            comps.mil_res = Some(mil_loss(&mut g, &t.res, &t.res_labels)?);
        }
        if on(3) {
            comps.mil_rfv = Some(mil_loss(&mut g, &t.rfv, &t.rfv_labels)?);
        }
        if on(4) {
            comps.ssc = Some(ssc_loss(&mut g, &t.ssc_pairs, &cfg.layout, &cfg.ssc)?);
        }
        if on(5) {
            let s = match sum_vars(&mut g, &t.ssa)? {
                Some(s) => g.scale(s, 1.0 / t.ssa.len() as f64)?,
                None => g.scalar(0.0),
            };
            comps.ssa = Some(s);
        }
        let total = total_loss_graph(&mut g, &comps, &state, cfg.schedule.wiring)?;
        let values = comps.as_array().map(|v| v.map(|v| g.value(v).item()));
        for (v, name) in values.iter().zip(COMPONENT_NAMES) {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(PipelineError::NonFiniteLoss {
                        step,
                        component: name,
                    });
                }
            }
        }
        let [mil_ori, mil_ref, mil_res, mil_rfv, ssc, ssa] = values;
        log.push(LossRecord {
            step,
            stage: state.stage,
            resized_gate: state.resized_gate,
            rotflp_gate: state.rotflp_gate,
            components: LossComponents {
                mil_ori,
                mil_ref,
                mil_res,
                mil_rfv,
                ssc,
                ssa,
            },
            total: g.value(total).item(),
            lr,
        });
        let mut grads = g.backward(total)?;
        let mg: Vec<Option<Tensor>> = mv.all().iter().map(|&v| grads.take(v)).collect();
        opt_mil.step(&mut mil.tensors_mut(), &mg, lr);
        if !t.ssa.is_empty() {
            let ag = [
                grads.take(av.kernel),
                grads.take(av.mix_u),
                grads.take(av.mix_v),
            ];
            opt_angle.step(&mut angle.tensors_mut(), &ag, lr);
        }
    }
    Ok(TrainOutput {
        model: TrainedModel {
            classes: cfg.dataset.scene.classes.clone(),
            mil,
            angle,
            ds_enabled,
        },
        log,
    })
}

fn scale_box(b: &OrientedBox, sigma: f64) -> OrientedBox {
    OrientedBox::new(
        b.cx * sigma,
        b.cy * sigma,
        b.w * sigma,
        b.h * sigma,
        b.theta,
    )
}
