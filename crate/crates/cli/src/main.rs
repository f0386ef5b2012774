use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use clockdistill::checkpoint::Checkpoint;
use clockdistill::data::{generate_dataset, write_png};
use clockdistill::detector::Detector;
use clockdistill::eval::EvalReport;
use clockdistill::harness::{
    compute_teacher_targets, distill_student, evaluate, export_attention, train_teacher,
    ExperimentConfig, ExperimentRunner, LayerSelector, MetricsLog,
};

#[derive(Parser)]
#[command(name = "clockdistill", version, about = "Detection transformer distillation experiments")]
struct Cli {
    /// Experiment config (JSON); missing fields take the reference values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run without any parallelism.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Dataset directory written by `gen-data`; replaces in-memory generation.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the train and validation splits to disk.
    GenData,
    /// Train the teacher with the detection loss only.
    TrainTeacher,
    /// Train the student against a frozen teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
    },
    /// COCO-style evaluation of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Write encoder attention heatmaps for one validation image.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the validation split.
        #[arg(long, default_value_t = 0)]
        image: usize,
        /// `last`, `all` or a layer index.
        #[arg(long, default_value = "last")]
        layer: String,
    },
    /// Baseline, Mem, Mem+LM and Mem+LM+TQ over the ablation seeds.
    AblateComponents {
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Baseline against full recipe over the student depth grid.
    AblateLayers {
        #[arg(long)]
        teacher: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::reference(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= cli.deterministic;
    if let Some(d) = &cli.data {
        cfg.train_data.dir = Some(d.join("train"));
        cfg.val_data.dir = Some(d.join("val"));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Detector> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ck.to_detector()?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn summary(name: &str, r: &EvalReport) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    format!(
        "{name}: AP {:.4}  AP50 {:.4}  AP75 {:.4}  APs {}  APm {}  APl {}  ({} images, {:.2}s)",
        r.ap,
        r.ap50,
        r.ap75,
        opt(r.ap_small),
        opt(r.ap_medium),
        opt(r.ap_large),
        r.num_images,
        r.eval_seconds
    )
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let out = &cli.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), &cfg)?;

    match &cli.command {
        Command::GenData => {
            for (name, split) in [("train", &cfg.train_data), ("val", &cfg.val_data)] {
                let dir = out.join(name);
                let d = generate_dataset(&split.spec, &dir)?;
                println!("{name}: {} images, {} objects in {}", d.num_images, d.num_objects, d.dir.display());
            }
        }
        Command::TrainTeacher => {
            let (train, val) = (cfg.train_data.load()?, cfg.val_data.load()?);
            let mut log = MetricsLog::to_file(&out.join("teacher_metrics.jsonl"))?;
            let t = train_teacher(&cfg, &train, &val, &mut log, Some(out))?;
            log.write_json(&t.report)?;
            log.flush()?;
            t.checkpoint()?.save(&out.join("teacher.ckpt"))?;
            println!("{}", summary("teacher", &t.report));
        }
        Command::Distill { teacher } => {
            let teacher = load_model(teacher)?;
            let (train, val) = (cfg.train_data.load()?, cfg.val_data.load()?);
            let targets = if cfg.toggles.any() {
                compute_teacher_targets(
                    &teacher,
                    &train,
                    &cfg.distill,
                    cfg.toggles.target_queries,
                    cfg.eval.batch_size,
                )?
            } else {
                Vec::new()
            };
            let mut log = MetricsLog::to_file(&out.join("student_metrics.jsonl"))?;
            let s = distill_student(
                &cfg,
                &teacher.config,
                &targets,
                &train,
                &val,
                &mut log,
                "student",
                Some(out),
            )?;
            log.write_json(&s.report)?;
            log.flush()?;
            s.checkpoint()?.save(&out.join("student.ckpt"))?;
            println!("{}", summary(&format!("student ({})", cfg.toggles.label()), &s.report));
        }
        Command::Evaluate { checkpoint, split } => {
            let det = load_model(checkpoint)?;
            let samples = match split.as_str() {
                "val" => cfg.val_data.load()?,
                "train" => cfg.train_data.load()?,
                other => bail!("unknown split `{other}` (expected `train` or `val`)"),
            };
            let r = evaluate(&det, &samples, &cfg.eval)?;
            write_json(&out.join(format!("eval_{split}.json")), &r)?;
            println!("{}", summary(split, &r));
        }
        Command::ExportAttn {
            checkpoint,
            image,
            layer,
        } => {
            let det = load_model(checkpoint)?;
            let selector: LayerSelector = layer.parse()?;
            let val = cfg.val_data.load()?;
            let sample = val
                .get(*image)
                .with_context(|| format!("image {image} outside the {} validation images", val.len()))?;
            let dir = out.join("attention");
            let stem = format!("val{image:04}");
            let files = export_attention(&det, &sample.image, selector, &dir, &stem)?;
            write_png(&dir.join(format!("{stem}_input.png")), &sample.image)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::AblateComponents { teacher } | Command::AblateLayers { teacher } => {
            let teacher = load_model(teacher)?;
            let (train, val) = (cfg.train_data.load()?, cfg.val_data.load()?);
            let name = match cli.command {
                Command::AblateComponents { .. } => "components",
                _ => "layers",
            };
            let log = MetricsLog::to_file(&out.join(format!("{name}_metrics.jsonl")))?;
            let mut runner = ExperimentRunner::new(cfg.clone(), teacher, train, val, log)?;
            runner.failure_dir = Some(out.clone());
            let table = if name == "components" {
                let r = runner.ablate_components()?;
                write_json(&out.join("components.json"), &r)?;
                r.to_table()
            } else {
                let r = runner.ablate_layers()?;
                write_json(&out.join("layers.json"), &r)?;
                r.to_table()
            };
            runner.log.flush()?;
            print!("{table}");
        }
    }
    Ok(())
}
