//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::f64::consts::{FRAC_PI_4, PI};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pointobb::angle::{ds_level, ssa_value, AngleConfig, AngleRelation, DsConfig};
use pointobb::autodiff::{Graph, Tensor};
use pointobb::data::{
    derive_seed, format_dota, generate_dataset, parse_dota, DatasetConfig, DotaRecord, LabeledScene,
};
use pointobb::geometry::{rotated_iou, OrientedBox, Point};
use pointobb::mil::{mil_loss, score_bag, score_bag_values, MilConfig, MilParams};
use pointobb::optim::{OptimConfig, Optimizer};
use pointobb::pipeline::*;
use pointobb::proposals::{generate_bag, BagLayout};
use pointobb::scheduler::{component_gates, total_loss, Stage, StageState};
use pointobb::ssc::{group_similarity, ssc_loss, SscConfig};
use pointobb::views::{build_resized_with, sample_sigma, ViewConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(t: Duration, limit_s: u64) -> bool {
    t <= Duration::from_secs(limit_s)
}

// 1
fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let cases = gradcheck_suite(0, 20, Fixture::Losses).expect("suite runs");
    let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let broken = gradcheck_suite(0, 5, Fixture::Broken).expect("fixture runs");
    let el = t.elapsed();
    let pass = cases.iter().all(GradCase::passed) && !broken[0].passed() && within(el, 60);
    let names: Vec<&str> = cases.iter().map(|c| c.name.as_str()).collect();
    outcome(
        pass,
        format!(
            "{names:?} at 20 points, worst rel error {worst:.2e} (< {GRADCHECK_TOL:e}); broken fixture {:.2e}; {el:.1?}",
            broken[0].max_rel_error
        ),
    )
}

/// Vertical extent of a convex polygon at abscissa `x`.
fn y_span(poly: &[Point; 4], x: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..4 {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % 4];
        if (x0 - x).signum() * (x1 - x).signum() > 0.0 || x0 == x1 {
            continue;
        }
        let y = y0 + (x - x0) * (y1 - y0) / (x1 - x0);
        lo = lo.min(y);
        hi = hi.max(y);
    }
    (hi >= lo).then_some((lo, hi))
}

/// Scanline integration of the overlap area with the midpoint rule.
fn scanline_iou(a: &OrientedBox, b: &OrientedBox, slices: usize) -> f64 {
    let (pa, pb) = (a.to_corners(), b.to_corners());
    let (ba, bb) = (a.bounds(), b.bounds());
    let (x0, x1) = (ba[0].max(bb[0]), ba[2].min(bb[2]));
    if x1 <= x0 {
        return 0.0;
    }
    let dx = (x1 - x0) / slices as f64;
    let mut inter = 0.0;
    for i in 0..slices {
        let x = x0 + (i as f64 + 0.5) * dx;
        if let (Some((l0, h0)), Some((l1, h1))) = (y_span(&pa, x), y_span(&pb, x)) {
            inter += (h0.min(h1) - l0.max(l1)).max(0.0) * dx;
        }
    }
    inter / (a.area() + b.area() - inter)
}

// 2
fn geometry_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut overlapping = 0;
    for _ in 0..1000 {
        let mut rand_box = |c: f64| {
            OrientedBox::new(
                rng.gen_range(-c..c),
                rng.gen_range(-c..c),
                rng.gen_range(1.0..10.0),
                rng.gen_range(1.0..10.0),
                rng.gen_range(-PI..PI),
            )
        };
        let (a, b) = (rand_box(1.0), rand_box(4.0));
        let got = rotated_iou(&a, &b);
        if got > 0.0 {
            overlapping += 1;
        }
        worst = worst.max((got - scanline_iou(&a, &b, 4000)).abs());
    }
    let s = 2f64.sqrt();
    let square = rotated_iou(
        &OrientedBox::new(0.0, 0.0, s, s, 0.0),
        &OrientedBox::new(0.0, 0.0, s, s, FRAC_PI_4),
    );
    let el = t.elapsed();
    let pass = worst < 1e-3 && (square - 0.7071).abs() < 1e-3 && within(el, 60);
    outcome(
        pass,
        format!("1000 pairs ({overlapping} overlapping), max |iou - scanline| {worst:.2e}; 45 deg square {square:.4}; {el:.1?}"),
    )
}

// 3
fn ssa_zeros() -> Outcome {
    let b = AngleConfig::default().beta;
    let rot = AngleRelation::Rotation(0.5);
    let zeros = [
        ssa_value(&[vec![0.3]], &[vec![0.8]], rot, b),
        ssa_value(&[vec![1.5]], &[vec![1.5 + 0.5 - PI]], rot, b),
        ssa_value(&[vec![0.3]], &[vec![-0.3]], AngleRelation::Flip, b),
        ssa_value(&[vec![0.3]], &[vec![PI - 0.3]], AngleRelation::Flip, b),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut shift_worst: f64 = 0.0;
    for trial in 0..200 {
        let levels = 3;
        let labels = 4;
        let mut draw = || -> Vec<Vec<f64>> {
            (0..levels)
                .map(|_| {
                    (0..labels)
                        .map(|_| rng.gen_range(-PI / 2.0..PI / 2.0))
                        .collect()
                })
                .collect()
        };
        let (o, e) = (draw(), draw());
        let rel = if trial % 2 == 0 {
            AngleRelation::Rotation(rng.gen_range(-PI..PI))
        } else {
            AngleRelation::Flip
        };
        let shifted: Vec<Vec<f64>> = e
            .iter()
            .map(|l| l.iter().map(|v| v + PI).collect())
            .collect();
        let d = (ssa_value(&o, &e, rel, b) - ssa_value(&o, &shifted, rel, b)).abs();
        shift_worst = shift_worst.max(d);
    }
    let pass = zeros.iter().all(|&z| z == 0.0) && shift_worst < 1e-12;
    outcome(
        pass,
        format!(
            "k-cycle cases {zeros:?}; max change under +pi shift {shift_worst:.1e} over 200 draws"
        ),
    )
}

/// Mean group cosine distance between the two views over the batch.
fn ssc_batch_distance(params: &MilParams, batch: &[(Tensor, Tensor)], layout: &BagLayout) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|(fo, fr)| {
            let (o, _) = score_bag_values(params, fo).expect("scores");
            let (r, _) = score_bag_values(params, fr).expect("scores");
            group_similarity(&o, &r, layout)
                .expect("same layout")
                .mean()
        })
        .sum();
    total / batch.len() as f64
}

// 4
fn ssc_only() -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::default();
    let data = DatasetConfig {
        num_scenes: 4,
        ..cfg.dataset.clone()
    };
    let scenes = generate_dataset(&data, derive_seed(4, 1)).expect("dataset");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(4, 2));
    let layout = &cfg.layout;
    let mut batch = Vec::new();
    let mut labels = Vec::new();
    for ls in &scenes {
        let sigma = sample_sigma(&ViewConfig::default(), &mut rng);
        let bundle = build_resized_with(ls, sigma);
        for (i, p) in ls.points.iter().enumerate() {
            if !bundle.enhanced.in_view[i] {
                continue;
            }
            let bag = generate_bag(p, layout);
            let ob: Vec<OrientedBox> = bag.boxes.iter().map(|b| b.with_angle(0.0)).collect();
            let rb: Vec<OrientedBox> = bag
                .resized(sigma)
                .boxes
                .iter()
                .map(|b| b.with_angle(0.0))
                .collect();
            batch.push((
                bag_features(&ls.scene.image, &ob),
                bag_features(&bundle.enhanced.scene.image, &rb),
            ));
            labels.push(p.class_id);
        }
    }
    // A fresh head scores every proposal nearly alike in both views, so fit
    // it to the bag labels first to open a real gap.
    let mut params = MilParams::init(&MilConfig::default(), data.scene.num_classes(), &mut rng);
    let optim = OptimConfig::default();
    let lr = 0.05;
    let mut opt = Optimizer::new(&optim, &params.tensors());
    for _ in 0..100 {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, true);
        let mut bags = Vec::new();
        for (fo, _) in &batch {
            bags.push(score_bag(&mut g, &vars, fo).expect("scores").0.bag);
        }
        let loss = mil_loss(&mut g, &bags, &labels).expect("loss");
        let mut grads = g.backward(loss).expect("backward");
        let gs: Vec<Option<Tensor>> = vars.all().iter().map(|&v| grads.take(v)).collect();
        opt.step(&mut params.tensors_mut(), &gs, lr);
    }

    let mut opt = Optimizer::new(&optim, &params.tensors());
    let before = ssc_batch_distance(&params, &batch, layout);
    for _ in 0..200 {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, true);
        let mut pairs = Vec::new();
        for (fo, fr) in &batch {
            let (o, _) = score_bag(&mut g, &vars, fo).expect("scores");
            let (r, _) = score_bag(&mut g, &vars, fr).expect("scores");
            pairs.push((o, r));
        }
        let loss = ssc_loss(&mut g, &pairs, layout, &SscConfig::default()).expect("loss");
        let mut grads = g.backward(loss).expect("backward");
        let gs: Vec<Option<Tensor>> = vars.all().iter().map(|&v| grads.take(v)).collect();
        opt.step(&mut params.tensors_mut(), &gs, lr);
    }
    let after = ssc_batch_distance(&params, &batch, layout);
    let drop = 1.0 - after / before;
    let el = t.elapsed();
    let pass = before > 1e-3 && drop >= 0.9 && within(el, 60);
    outcome(
        pass,
        format!(
            "{} labels, mean group cosine distance {before:.3e} -> {after:.3e} ({:.1}% reduction); {el:.1?}",
            batch.len(),
            100.0 * drop
        ),
    )
}

// 5
fn ds_levels() -> Outcome {
    let base = DsConfig::default().basescale;
    let levels = AngleConfig::default().strides().len();
    let ex = [
        ds_level(56.0, 56.0, base, levels),
        ds_level(112.0, 112.0, base, levels),
        ds_level(448.0, 448.0, base, levels),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut props: Vec<(f64, usize)> = (0..10_000)
        .map(|_| {
            let (w, h) = (rng.gen_range(1.0..600.0), rng.gen_range(1.0..600.0));
            ((w * h as f64).sqrt(), ds_level(w, h, base, levels))
        })
        .collect();
    props.sort_by(|a, b| a.0.total_cmp(&b.0));
    let violations = props.windows(2).filter(|w| w[1].1 < w[0].1).count();
    let used: std::collections::BTreeSet<usize> = props.iter().map(|p| p.1).collect();
    let pass = ex == [0, 1, 2] && levels == 3 && violations == 0 && used.len() == 3;
    outcome(
        pass,
        format!("56/112/448 -> {ex:?} with {levels} levels; 10000 proposals, {violations} order violations, levels used {used:?}"),
    )
}

// 6
fn angle_recovery_run() -> Outcome {
    let t = Instant::now();
    let mut data = DatasetConfig::default();
    data.scene.aspect = (2.0, 3.5);
    let scenes = generate_dataset(&data, 7).expect("dataset");
    let cfg = AngleTrainConfig::default();
    let (params, _) = train_angle_only(&scenes, &cfg, 1).expect("training");
    let rec = angle_recovery(&params, &scenes, &cfg.angle, &cfg.ds, 2.0).expect("recovery");
    let frac = rec.fraction_below(5.0);
    let el = t.elapsed();
    let pass = frac >= 0.8 && rec.objects_skipped == 0 && within(el, 600);
    outcome(
        pass,
        format!(
            "{} scenes, {} steps: {:.1}% of {} objects within 5 deg (offset {} deg); {el:.1?}",
            scenes.len(),
            cfg.steps,
            100.0 * frac,
            rec.errors_deg.len(),
            rec.offset_deg
        ),
    )
}

struct EndToEnd {
    outcome: Outcome,
    cfg: RunConfig,
    log: Vec<LossRecord>,
}

fn run_and_score(
    cfg: &RunConfig,
    train_set: &[LabeledScene],
    holdout: &[LabeledScene],
) -> (Metrics, Vec<LossRecord>) {
    let out = train(cfg, train_set).expect("training");
    let ps = generate_pseudo(&out.model, cfg, holdout).expect("pseudo labels");
    (
        evaluate(&ps, holdout, &cfg.dataset.scene.classes).expect("evaluation"),
        out.log,
    )
}

// 7
fn end_to_end() -> EndToEnd {
    let t = Instant::now();
    let cfg = RunConfig::default();
    let train_set = generate_dataset(&cfg.dataset, derive_seed(cfg.seed, 1)).expect("dataset");
    let hold_cfg = DatasetConfig {
        num_scenes: cfg.holdout_scenes,
        ..cfg.dataset.clone()
    };
    let holdout = generate_dataset(&hold_cfg, derive_seed(cfg.seed, 2)).expect("dataset");
    let classes = &cfg.dataset.scene.classes;
    let (_, _, baseline) = best_fixed_box(&holdout, &cfg.layout, classes).expect("baseline");
    let (full, log) = run_and_score(&cfg, &train_set, &holdout);
    let mut s1 = cfg.clone();
    s1.schedule.stage1_only = true;
    let (ablation, _) = run_and_score(&s1, &train_set, &holdout);
    let el = t.elapsed();
    let pass = full.miou >= baseline + 0.15 && full.ap50 > ablation.ap50 && within(el, 1200);
    EndToEnd {
        outcome: outcome(
            pass,
            format!(
                "mIoU {:.3} vs fixed-box baseline {baseline:.3} (needs >= {:.3}); AP50 {:.3} vs stage-1-only {:.3}; {el:.1?}",
                full.miou,
                baseline + 0.15,
                full.ap50,
                ablation.ap50
            ),
        ),
        cfg,
        log,
    }
}

// 8
fn scheduler_log(cfg: &RunConfig, log: &[LossRecord]) -> Outcome {
    let sched = cfg.schedule.stage_schedule().expect("schedule");
    let wiring = cfg.schedule.wiring;
    let mut bad = Vec::new();
    for r in log {
        let state = StageState {
            stage: r.stage,
            resized_gate: r.resized_gate,
            rotflp_gate: r.rotflp_gate,
        };
        let expect = if r.step < sched.burn_in_1 {
            Stage::S1ScaleAug
        } else if r.step < sched.burn_in_2 {
            Stage::S2AngleBurn
        } else {
            Stage::S3DsMatch
        };
        let gates = component_gates(&state, wiring);
        let present = r.components.as_array().map(|c| c.is_some() as u8);
        let sum_ok = matches!(total_loss(&r.components, &state, wiring), Ok(v) if (v - r.total).abs() <= 1e-9 * v.abs().max(1.0));
        if r.resized_gate + r.rotflp_gate != 1 || r.stage != expect || present != gates || !sum_ok {
            bad.push(r.step);
        }
    }
    let first = |s: Stage| log.iter().position(|r| r.stage == s);
    let (b1, b2) = (first(Stage::S2AngleBurn), first(Stage::S3DsMatch));
    let pass = bad.is_empty()
        && log.len() == cfg.schedule.steps
        && b1 == Some(sched.burn_in_1)
        && b2 == Some(sched.burn_in_2);
    outcome(
        pass,
        format!(
            "{} steps, gate sum 1 and components match gates at every step ({} bad); switches at {b1:?}/{b2:?}, burn-ins {}/{}",
            log.len(),
            bad.len(),
            sched.burn_in_1,
            sched.burn_in_2
        ),
    )
}

// 9
fn formats(cfg: &RunConfig) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let classes = &cfg.dataset.scene.classes;
    let records: Vec<DotaRecord> = (0..1000)
        .map(|_| {
            let b = OrientedBox::new(
                rng.gen_range(0.0..1024.0),
                rng.gen_range(0.0..1024.0),
                rng.gen_range(2.0..200.0),
                rng.gen_range(2.0..200.0),
                rng.gen_range(-PI..PI),
            );
            DotaRecord::new(
                b,
                classes[rng.gen_range(0..classes.len())].clone(),
                rng.gen_range(0..2),
            )
        })
        .collect();
    let text = format_dota(&records);
    let back = parse_dota(&text).expect("parses");
    let worst = max_corner_error(&records, &back);
    let labels_ok = records
        .iter()
        .zip(&back)
        .all(|(a, b)| a.class_name == b.class_name && a.difficulty == b.difficulty);
    // A second trip must not drift further.
    let again = parse_dota(&format_dota(&back)).expect("parses");
    let drift = max_corner_error(&back, &again);
    let stable = again.len() == back.len() && drift <= 1e-4;

    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("metrics.json");
    let m = Metrics {
        miou: 0.5,
        ap50: 0.25,
        per_class: classes.iter().map(|c| (c.clone(), 0.25)).collect(),
    };
    MetricsReport::new(m, cfg.hash())
        .write(&path)
        .expect("writes");
    let schema = metrics_schema_errors(&std::fs::read_to_string(&path).expect("reads"));
    let pass = back.len() == 1000 && worst <= 1e-4 && labels_ok && stable && schema.is_empty();
    outcome(
        pass,
        format!(
            "1000 boxes, max corner error {worst:.1e} px, second trip {drift:.1e} px (tolerance 1e-4); metrics schema problems {schema:?}"
        ),
    )
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Worst corner distance between paired records; corners may come back in a
/// different cyclic order.
fn max_corner_error(a: &[DotaRecord], b: &[DotaRecord]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(a, b)| {
            let (ca, cb) = (a.obb.to_corners(), b.obb.to_corners());
            (0..4)
                .map(|s| {
                    (0..4)
                        .map(|i| dist(ca[i], cb[(i + s) % 4]))
                        .fold(0.0, f64::max)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

fn metrics_schema_errors(text: &str) -> Vec<String> {
    let mut errs = Vec::new();
    let v: serde_json::Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return vec![e.to_string()],
    };
    let Some(obj) = v.as_object() else {
        return vec!["not an object".into()];
    };
    for key in obj.keys() {
        if !["miou", "ap50", "per_class", "config_hash"].contains(&key.as_str()) {
            errs.push(format!("unexpected key {key}"));
        }
    }
    for key in ["miou", "ap50"] {
        if !obj.get(key).is_some_and(serde_json::Value::is_f64) {
            errs.push(format!("{key} is not a float"));
        }
    }
    match obj.get("per_class").and_then(|p| p.as_object()) {
        Some(p) if p.values().all(serde_json::Value::is_f64) => {}
        _ => errs.push("per_class is not a name -> float map".into()),
    }
    match obj.get("config_hash").and_then(|h| h.as_str()) {
        Some(h) if !h.is_empty() && h.chars().all(|c| c.is_ascii_hexdigit()) => {}
        _ => errs.push("config_hash is not hex".into()),
    }
    errs
}

fn report(n: usize, o: &Outcome) {
    println!(
        "criterion {n}: {} - {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters come through here as arguments.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut all = true;
    let mut record = |n: usize, o: Outcome| {
        report(n, &o);
        all &= o.pass;
    };
    record(1, gradient_suite());
    record(2, geometry_oracle());
    record(3, ssa_zeros());
    record(4, ssc_only());
    record(5, ds_levels());
    record(6, angle_recovery_run());
    let e2e = end_to_end();
    let log_check = scheduler_log(&e2e.cfg, &e2e.log);
    let fmt = formats(&e2e.cfg);
    record(7, e2e.outcome);
    record(8, log_check);
    record(9, fmt);
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
