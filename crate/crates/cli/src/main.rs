use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pointobb::data::{
    derive_seed, generate_dataset, read_archive, scene_dir, write_archive, DatasetConfig,
    LabeledScene,
};
use pointobb::pipeline::{
    evaluate, generate_pseudo, gradcheck_suite, read_pseudo, render_svg, train, write_log,
    write_pseudo, Fixture, MetricsReport, PipelineError, PseudoLabelSet, RunConfig, TrainedModel,
    GRADCHECK_TOL,
};

const MODEL_FILE: &str = "model.json";
const CONFIG_FILE: &str = "config.toml";
const LOG_FILE: &str = "log.jsonl";
const METRICS_FILE: &str = "metrics.json";

/// Stream ids under the run seed for generated train and holdout scenes.
const TRAIN_DATA_STREAM: u64 = 1;
const HOLDOUT_DATA_STREAM: u64 = 2;

#[derive(Parser)]
#[command(
    name = "pointobb",
    version,
    about = "Oriented pseudo boxes from point labels on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene archive.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Run config whose `dataset` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on an archive (or on scenes generated from the config) and
    /// write the model, loss log and resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training archive. Without it scenes are generated from the seed.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Archive to evaluate on afterwards. Without `--data` a holdout set
        /// is generated instead.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Pseudo boxes for every point of an archive.
    Pseudo {
        /// Directory written by `train`.
        #[arg(long, required_unless_present = "from_gt")]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Emit the ground-truth box of each point instead.
        #[arg(long)]
        from_gt: bool,
    },
    /// Score pseudo boxes against the archive ground truth.
    Eval {
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Config hashed into the report; defaults to the one next to the
        /// pseudo labels, then to the built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `<pseudo>/metrics.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        points: usize,
        /// Run the deliberately broken test fixture instead.
        #[arg(long)]
        broken_fixture: bool,
    },
    /// SVG overlays: ground truth solid, pseudo boxes dashed, points as crosses.
    Viz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pseudo: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Only this scene.
        #[arg(long)]
        scene: Option<usize>,
    },
}

/// Bad input paths or arguments; exits with status 2 like parse errors.
/// Invalid config files are treated the same way.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn need_dir(p: &Path, what: &str) -> Result<()> {
    if !p.is_dir() {
        return Err(usage(format!(
            "{what} directory not found: {}",
            p.display()
        )));
    }
    Ok(())
}

fn need_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(usage(format!("{what} file not found: {}", p.display())));
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            need_file(p, "config")?;
            Ok(RunConfig::load(p)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn load_archive(dir: &Path) -> Result<(DatasetConfig, Vec<LabeledScene>)> {
    need_dir(dir, "data")?;
    need_file(&dir.join("dataset.json"), "dataset")?;
    let out = read_archive(dir).with_context(|| format!("reading archive {}", dir.display()))?;
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(out: &Path, config: Option<&Path>, scenes: Option<usize>, seed: u64) -> Result<()> {
    let mut cfg = load_config(config)?.dataset;
    if let Some(n) = scenes {
        cfg.num_scenes = n;
    }
    let data = generate_dataset(&cfg, seed)?;
    write_archive(out, &cfg, &data)?;
    eprintln!("wrote {} scenes to {}", data.len(), out.display());
    Ok(())
}

struct TrainArgs<'a> {
    config: Option<&'a Path>,
    out: &'a Path,
    data: Option<&'a Path>,
    eval_data: Option<&'a Path>,
    seed: Option<u64>,
    steps: Option<usize>,
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.schedule.steps = s;
    }
    cfg.output_dir = Some(a.out.to_path_buf());
    cfg.validate()?;
    let (train_set, holdout) = match a.data {
        Some(dir) => {
            let (dcfg, scenes) = load_archive(dir)?;
            if dcfg.scene.classes != cfg.dataset.scene.classes {
                return Err(usage("archive classes differ from the config classes"));
            }
            let holdout = a.eval_data.map(load_archive).transpose()?.map(|(_, s)| s);
            (scenes, holdout)
        }
        None => {
            let scenes = generate_dataset(&cfg.dataset, derive_seed(cfg.seed, TRAIN_DATA_STREAM))?;
            let holdout = match a.eval_data {
                Some(dir) => load_archive(dir)?.1,
                None => {
                    let hcfg = DatasetConfig {
                        num_scenes: cfg.holdout_scenes,
                        ..cfg.dataset.clone()
                    };
                    generate_dataset(&hcfg, derive_seed(cfg.seed, HOLDOUT_DATA_STREAM))?
                }
            };
            (scenes, Some(holdout))
        }
    };
    create_dir(a.out)?;
    eprintln!(
        "training {} steps on {} scenes",
        cfg.schedule.steps,
        train_set.len()
    );
    let out = train(&cfg, &train_set)?;
    out.model.save(&a.out.join(MODEL_FILE))?;
    write_log(&a.out.join(LOG_FILE), &out.log)?;
    std::fs::write(a.out.join(CONFIG_FILE), cfg.to_toml())?;
    if let Some(hold) = holdout {
        let pseudo = generate_pseudo(&out.model, &cfg, &hold)?;
        let m = evaluate(&pseudo, &hold, &cfg.dataset.scene.classes)?;
        let report = MetricsReport::new(m, cfg.hash());
        report.write(&a.out.join(METRICS_FILE))?;
        println!("miou {:.4} ap50 {:.4}", report.miou, report.ap50);
    }
    Ok(())
}

fn run_pseudo(model: Option<&Path>, data: &Path, out: &Path, from_gt: bool) -> Result<()> {
    let (dcfg, scenes) = load_archive(data)?;
    let classes = dcfg.scene.classes.clone();
    let set = if from_gt {
        PseudoLabelSet::from_ground_truth(&scenes)
    } else {
        let dir = model.ok_or_else(|| usage("--model is required"))?;
        need_dir(dir, "model")?;
        need_file(&dir.join(MODEL_FILE), "model")?;
        let cfg = load_config(Some(&dir.join(CONFIG_FILE)))?;
        let m = TrainedModel::load(&dir.join(MODEL_FILE))?;
        if m.classes != classes {
            return Err(usage("archive classes differ from the model classes"));
        }
        create_dir(out)?;
        std::fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
        generate_pseudo(&m, &cfg, &scenes)?
    };
    create_dir(out)?;
    write_pseudo(out, &set, &classes)?;
    eprintln!("wrote {} pseudo boxes to {}", set.len(), out.display());
    Ok(())
}

fn run_eval(pseudo: &Path, data: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    need_dir(pseudo, "pseudo-label")?;
    let (dcfg, scenes) = load_archive(data)?;
    let cfg = match config {
        Some(p) => load_config(Some(p))?,
        None if pseudo.join(CONFIG_FILE).is_file() => load_config(Some(&pseudo.join(CONFIG_FILE)))?,
        None => RunConfig::default(),
    };
    let set = read_pseudo(pseudo, &dcfg.scene.classes)?;
    if set.scenes.is_empty() && !scenes.is_empty() {
        return Err(usage(format!(
            "no pseudo labels under {}",
            pseudo.display()
        )));
    }
    let m = evaluate(&set, &scenes, &dcfg.scene.classes)?;
    let report = MetricsReport::new(m, cfg.hash());
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| pseudo.join(METRICS_FILE));
    report.write(&path)?;
    println!("miou {:.4} ap50 {:.4}", report.miou, report.ap50);
    Ok(())
}

fn run_gradcheck(seed: u64, points: usize, broken: bool) -> Result<bool> {
    if points == 0 {
        return Err(usage("--points must be positive"));
    }
    let fixture = if broken {
        Fixture::Broken
    } else {
        Fixture::Losses
    };
    let cases = gradcheck_suite(seed, points, fixture)?;
    let mut ok = true;
    for c in &cases {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<14} {:>3} points  max rel err {:.3e}  {verdict}",
            c.name, c.points, c.max_rel_error
        );
        ok &= c.passed();
    }
    if !ok {
        eprintln!("gradient check failed (tolerance {GRADCHECK_TOL:e})");
    }
    Ok(ok)
}

fn run_viz(data: &Path, pseudo: Option<&Path>, out: &Path, only: Option<usize>) -> Result<()> {
    let (dcfg, scenes) = load_archive(data)?;
    let set = match pseudo {
        Some(p) => {
            need_dir(p, "pseudo-label")?;
            Some(read_pseudo(p, &dcfg.scene.classes)?)
        }
        None => None,
    };
    if let Some(i) = only {
        if i >= scenes.len() {
            return Err(usage(format!(
                "scene {i} out of range ({} scenes)",
                scenes.len()
            )));
        }
    }
    create_dir(out)?;
    let mut written = 0;
    for (i, ls) in scenes.iter().enumerate() {
        if only.is_some_and(|k| k != i) {
            continue;
        }
        let gt: Vec<_> = ls.scene.objects.iter().map(|o| o.obb).collect();
        let boxes: Vec<_> = set
            .as_ref()
            .and_then(|s| s.scenes.get(i))
            .map(|v| v.iter().map(|l| l.obb).collect())
            .unwrap_or_default();
        let points: Vec<_> = ls.points.iter().map(|p| p.pos()).collect();
        let svg = render_svg(&ls.scene.image, &gt, &boxes, &points);
        let name = scene_dir(out, i).with_extension("svg");
        std::fs::write(&name, svg).with_context(|| format!("writing {}", name.display()))?;
        written += 1;
    }
    if written == 0 {
        bail!("no scenes to draw");
    }
    eprintln!("wrote {written} SVG files to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            config,
            scenes,
            seed,
        } => gen_data(&out, config.as_deref(), scenes, seed)?,
        Command::Train {
            config,
            out,
            data,
            eval_data,
            seed,
            steps,
        } => run_train(TrainArgs {
            config: config.as_deref(),
            out: &out,
            data: data.as_deref(),
            eval_data: eval_data.as_deref(),
            seed,
            steps,
        })?,
        Command::Pseudo {
            model,
            data,
            out,
            from_gt,
        } => run_pseudo(model.as_deref(), &data, &out, from_gt)?,
        Command::Eval {
            pseudo,
            data,
            config,
            out,
        } => run_eval(&pseudo, &data, config.as_deref(), out.as_deref())?,
        Command::Gradcheck {
            seed,
            points,
            broken_fixture,
        } => return run_gradcheck(seed, points, broken_fixture),
        Command::Viz {
            data,
            pseudo,
            out,
            scene,
        } => run_viz(&data, pseudo.as_deref(), &out, scene)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let bad_config = matches!(
                e.downcast_ref::<PipelineError>(),
                Some(PipelineError::Config(_))
            );
            if bad_config || e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
