//! Command implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cdal::config::{Config, DataSource};
use cdal::data::{self, Sample};
use cdal::metrics::{self, ConfusionCounts, MetricsReport};
use cdal::networks::GeneratorState;
use cdal::sampling::{self, InferenceConfig, TrainedGenerator};
use cdal::training::{self, Trainer};
use cdal::{Error, NoiseSchedule};
use ndarray::{Array2, Array3, Axis};
use serde::Serialize;

use crate::{manifest, AblateArgs, Common, EvaluateArgs, PredictArgs, SynthArgs, TrainArgs};

/// Images per inference batch.
const PREDICT_CHUNK: usize = 8;

fn resolve(common: &Common, base: Config) -> Result<Config> {
    let config = match &common.config {
        Some(path) => manifest::load_config(path)?,
        None => base,
    };
    let mut overrides = common.overrides.clone();
    if common.no_attention {
        overrides.push("train.use_attention=false".into());
    }
    if common.no_latent {
        overrides.push("train.use_latent=false".into());
    }
    if let Some(s) = &common.attn_scale {
        overrides.push(format!("train.attn_scale={s}"));
    }
    if let Some(t) = common.timesteps {
        overrides.push(format!("diffusion.timesteps={t}"));
    }
    if let Some(n) = common.instances {
        overrides.push(format!("inference.n_instances={n}"));
    }
    if let Some(x) = common.threshold {
        overrides.push(format!("inference.threshold={x:?}"));
    }
    if let Some(seed) = common.seed {
        for key in ["train.seed", "inference.seed", "synth.seed"] {
            overrides.push(format!("{key}={seed}"));
        }
    }
    Ok(config.with_overrides(&overrides)?)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_samples(config: &Config) -> Result<Vec<Sample>> {
    match config.data.source {
        DataSource::Synthetic => Ok(data::generate_synthetic(&config.synth, config.data.count)?),
        DataSource::Folder => load_folder_samples(config.data_root()?, config),
    }
}

fn load_folder_samples(root: &Path, config: &Config) -> Result<Vec<Sample>> {
    if !root.is_dir() {
        return Err(Error::config("data.root", format!("`{}` does not exist", root.display())).into());
    }
    let report = data::load_folder(root, &config.folder_layout())?;
    if report.samples.is_empty() {
        return Err(Error::config("data.root", format!("no usable image/mask pairs under `{}`", root.display())).into());
    }
    Ok(report.samples)
}

/// Training and validation samples under the configured fold split.
fn split(config: &Config, samples: Vec<Sample>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if config.data.folds >= 2 {
        Ok(data::kfold_split(&samples, config.data.folds, config.data.fold, config.data.split_seed)?)
    } else {
        Ok((samples, Vec::new()))
    }
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut config = resolve(&args.common, Config::default())?;
    if let Some(n) = args.count {
        config.data.count = n;
    }
    config.synth.validate()?;
    let samples = data::generate_synthetic(&config.synth, config.data.count)?;
    create_dir(&args.common.out)?;
    data::export_folder(&samples, &args.common.out)?;
    tracing::info!(count = samples.len(), out = %args.common.out.display(), "synthetic dataset written");
    manifest::write(&args.common.out, "synth", &config, config.synth.seed)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let config = resolve(&args.common, Config::default())?;
    config.validate()?;
    let out = &args.common.out;
    let samples = load_samples(&config)?;
    let (train_set, val_set) = split(&config, samples)?;
    let train_data = data::to_train_data::<f32>(&train_set)?;
    create_dir(out)?;
    fs::write(out.join("config.toml"), config.to_toml_string())?;

    let mut trainer = match &args.resume {
        Some(dir) => {
            let mut t = Trainer::<f32>::load(dir)?;
            if t.schedule.timesteps() != config.diffusion.timesteps {
                return Err(Error::config(
                    "diffusion.timesteps",
                    format!("checkpoint uses T = {}, config asks for {}", t.schedule.timesteps(), config.diffusion.timesteps),
                )
                .into());
            }
            t.config.max_steps = config.train.max_steps;
            t
        }
        None => Trainer::new(
            config.train.clone(),
            &config.model,
            &config.discriminator,
            config.diffusion.schedule()?,
        )?,
    };
    tracing::info!(
        samples = train_data.len(),
        generator_params = trainer.generator.params.num_scalars(),
        discriminator_params = trainer.discriminator.params.num_scalars(),
        timesteps = trainer.schedule.timesteps(),
        "training"
    );
    let log_path = out.join("train_log.jsonl");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);
    let start = Instant::now();
    let records = trainer.train(&train_data, Some(&out.join("checkpoints")), Some(&mut log))?;
    log.flush()?;

    let tail = &records[records.len().saturating_sub(50)..];
    let avg = |f: fn(&training::TrainLogRecord) -> f64| {
        if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().map(f).sum::<f64>() / tail.len() as f64
        }
    };
    let mut summary = serde_json::json!({
        "steps": trainer.step,
        "train_samples": train_set.len(),
        "validation_samples": val_set.len(),
        "generator_loss_last50": avg(|r| r.generator_loss),
        "discriminator_real_loss_last50": avg(|r| r.discriminator_real_loss),
        "discriminator_fake_loss_last50": avg(|r| r.discriminator_fake_loss),
        "discriminator_accuracy_last50": avg(|r| r.discriminator_accuracy),
        "wall_time_s": start.elapsed().as_secs_f64(),
    });
    if !val_set.is_empty() {
        let model = TrainedGenerator {
            state: trainer.generator.clone(),
            timesteps: trainer.schedule.timesteps(),
        };
        let inference = inference_config(&config, trainer.config.use_latent);
        let (report, _) = score_model(&model, &trainer.schedule, &inference, &val_set, config.label_channels(), &config)?;
        write_report(out, &report, &[])?;
        summary["validation_dice"] = report.mean.dice.into();
        summary["validation_miou"] = report.mean.iou.into();
    }
    write_json(&out.join("summary.json"), &summary)?;
    tracing::info!(steps = trainer.step, out = %out.display(), "training finished");
    manifest::write(out, "train", &config, config.train.seed)
}

fn checkpoint_dir(path: &Path) -> Result<PathBuf> {
    for candidate in [path.to_path_buf(), path.join("checkpoints").join("final")] {
        if candidate.join("checkpoint.json").is_file() {
            return Ok(candidate);
        }
    }
    bail!("no checkpoint found at {}", path.display())
}

/// Loads a generator and resolves the run config against it. The config may
/// not ask for a different step count than the model was trained with.
fn load_model(checkpoint: &Path, common: &Common) -> Result<(TrainedGenerator<f32>, NoiseSchedule, Config, bool)> {
    let dir = checkpoint_dir(checkpoint)?;
    let (state, schedule, train_config): (GeneratorState<f32>, _, _) = training::load_generator(&dir)?;
    let mut base = Config::default();
    base.model = state.config().clone();
    base.discriminator.resolution = base.model.resolution;
    base.discriminator.label_channels = base.model.label_channels;
    base.diffusion.timesteps = schedule.timesteps();
    base.diffusion.beta_min = schedule.beta_min();
    base.diffusion.beta_max = schedule.beta_max();
    base.data.classes = match base.model.label_channels {
        1 => 1,
        k => k - 1,
    };
    let config = resolve(common, base)?;
    if config.diffusion.timesteps != schedule.timesteps() {
        return Err(Error::config(
            "diffusion.timesteps",
            format!(
                "checkpoint was trained with T = {} but T = {} was requested",
                schedule.timesteps(),
                config.diffusion.timesteps
            ),
        )
        .into());
    }
    if config.label_channels() != state.config().label_channels {
        return Err(Error::config(
            "data.classes",
            format!("checkpoint predicts {} label channels", state.config().label_channels),
        )
        .into());
    }
    config.inference.validate()?;
    let timesteps = schedule.timesteps();
    Ok((TrainedGenerator { state, timesteps }, schedule, config, train_config.use_latent))
}

fn inference_config(config: &Config, trained_with_latent: bool) -> InferenceConfig {
    InferenceConfig {
        use_latent: config.inference.use_latent && trained_with_latent,
        ..config.inference.clone()
    }
}

/// Per-sample class maps and foreground probabilities.
struct Outputs {
    classes: Vec<Array2<u8>>,
    probs: Vec<Array2<f32>>,
}

fn run_inference(
    model: &TrainedGenerator<f32>,
    schedule: &NoiseSchedule,
    inference: &InferenceConfig,
    images: &[Array3<f32>],
    label_channels: usize,
) -> Result<Outputs> {
    let views: Vec<_> = images.iter().map(|i| i.view().insert_axis(Axis(0))).collect();
    let batch = ndarray::concatenate(Axis(0), &views)?;
    let pred = sampling::predict_in_chunks(&batch, label_channels, model, schedule, inference, PREDICT_CHUNK)?;
    let fg = sampling::foreground_probability(&pred.mean);
    let classes = pred
        .mask
        .axis_iter(Axis(0))
        .map(|m| metrics::hard_classes(m))
        .collect::<cdal::Result<Vec<_>>>()?;
    let probs = fg.axis_iter(Axis(0)).map(|p| p.index_axis(Axis(0), 0).to_owned()).collect();
    Ok(Outputs { classes, probs })
}

fn write_outputs(dir: &Path, stems: &[String], outputs: &Outputs, label_channels: usize) -> Result<()> {
    create_dir(dir)?;
    let classes = if label_channels == 1 { 1 } else { label_channels - 1 };
    for ((stem, mask), prob) in stems.iter().zip(&outputs.classes).zip(&outputs.probs) {
        data::write_mask_png(&dir.join(format!("{stem}.pred.png")), mask, classes)?;
        data::write_probability_png(&dir.join(format!("{stem}.prob.png")), prob)?;
    }
    Ok(())
}

fn list_pngs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let (model, schedule, config, with_latent) = load_model(&args.checkpoint, &args.common)?;
    let input = if args.input.join("images").is_dir() {
        args.input.join("images")
    } else {
        args.input.clone()
    };
    let files = list_pngs(&input)?;
    if files.is_empty() {
        bail!("no PNG images in {}", input.display());
    }
    let c = model.state.config();
    let images = files
        .iter()
        .map(|(_, p)| data::load_image(p, c.resolution, c.image_channels))
        .collect::<cdal::Result<Vec<_>>>()?;
    let inference = inference_config(&config, with_latent);
    let outputs = run_inference(&model, &schedule, &inference, &images, c.label_channels)?;
    let stems: Vec<String> = files.into_iter().map(|(s, _)| s).collect();
    write_outputs(&args.common.out, &stems, &outputs, c.label_channels)?;
    tracing::info!(images = stems.len(), out = %args.common.out.display(), "predictions written");
    manifest::write(&args.common.out, "predict", &config, config.inference.seed)
}

#[derive(Serialize)]
struct ImageScore {
    id: String,
    dice: f64,
    iou: f64,
    precision: f64,
    recall: f64,
}

/// Dataset report plus per-image scores.
fn score(config: &Config, ids: &[String], counts: &[ConfusionCounts]) -> Result<(MetricsReport, Vec<ImageScore>)> {
    let report = metrics::evaluate_counts(counts, config.metrics.aggregation)?;
    let per_image = ids
        .iter()
        .zip(counts)
        .map(|(id, c)| {
            let m = metrics::compute_metrics(c).mean;
            ImageScore {
                id: id.clone(),
                dice: m.dice,
                iou: m.iou,
                precision: m.precision,
                recall: m.recall,
            }
        })
        .collect();
    Ok((report, per_image))
}

fn score_model(
    model: &TrainedGenerator<f32>,
    schedule: &NoiseSchedule,
    inference: &InferenceConfig,
    samples: &[Sample],
    label_channels: usize,
    config: &Config,
) -> Result<(MetricsReport, Outputs)> {
    let images: Vec<Array3<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let outputs = run_inference(model, schedule, inference, &images, label_channels)?;
    let counts = samples
        .iter()
        .zip(&outputs.classes)
        .map(|(s, pred)| metrics::confusion_from_classes(pred, &s.class_map(), config.data.classes))
        .collect::<cdal::Result<Vec<_>>>()?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let (report, _) = score(config, &ids, &counts)?;
    Ok((report, outputs))
}

fn write_report(out: &Path, report: &MetricsReport, per_image: &[ImageScore]) -> Result<()> {
    write_json(
        &out.join("metrics.json"),
        &serde_json::json!({ "report": report, "images": per_image }),
    )?;
    let mut csv = String::from(MetricsReport::CSV_HEADER);
    csv.push('\n');
    for row in report.csv_rows("all") {
        csv.push_str(&row);
        csv.push('\n');
    }
    fs::write(out.join("metrics.csv"), csv)?;
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let out = &args.common.out;
    let (config, prediction) = match (&args.checkpoint, &args.pred) {
        (Some(ckpt), None) => {
            let (model, schedule, config, with_latent) = load_model(ckpt, &args.common)?;
            (config, Some((model, schedule, with_latent)))
        }
        (None, Some(_)) => (resolve(&args.common, Config::default())?, None),
        _ => return Err(Error::config("evaluate", "pass exactly one of --checkpoint or --pred").into()),
    };
    let samples = load_folder_samples(&args.data, &config)?;
    let (_, mut eval_set) = split(&config, samples.clone())?;
    if eval_set.is_empty() {
        eval_set = samples;
    }
    let ids: Vec<String> = eval_set.iter().map(|s| s.id.clone()).collect();
    create_dir(out)?;

    let predicted: Vec<Array2<u8>> = match (&prediction, &args.pred) {
        (Some((model, schedule, with_latent)), _) => {
            let inference = inference_config(&config, *with_latent);
            let images: Vec<Array3<f32>> = eval_set.iter().map(|s| s.image.clone()).collect();
            let lc = model.state.config().label_channels;
            let outputs = run_inference(model, schedule, &inference, &images, lc)?;
            write_outputs(&out.join("predictions"), &ids, &outputs, lc)?;
            outputs.classes
        }
        (None, Some(dir)) => {
            let mode = config.folder_layout().mask;
            ids.iter()
                .map(|id| {
                    let path = [format!("{id}.pred.png"), format!("{id}.png")]
                        .iter()
                        .map(|name| dir.join(name))
                        .find(|p| p.is_file())
                        .with_context(|| format!("no prediction for `{id}` in {}", dir.display()))?;
                    Ok(data::load_mask(&path, config.model.resolution, mode)?)
                })
                .collect::<Result<Vec<_>>>()?
        }
        (None, None) => unreachable!("checked above"),
    };
    let counts = eval_set
        .iter()
        .zip(&predicted)
        .map(|(s, pred)| metrics::confusion_from_classes(pred, &s.class_map(), config.data.classes))
        .collect::<cdal::Result<Vec<_>>>()?;
    let (report, per_image) = score(&config, &ids, &counts)?;
    write_report(out, &report, &per_image)?;
    println!("dice {:.4}  miou {:.4}  precision {:.4}  recall {:.4}", report.mean.dice, report.mean.iou, report.mean.precision, report.mean.recall);
    manifest::write(out, "evaluate", &config, config.inference.seed)
}

#[derive(Debug, Serialize)]
struct AblationRow {
    variant: String,
    attn_scale: usize,
    use_attention: bool,
    use_latent: bool,
    seed: u64,
    dice: f64,
    miou: f64,
    precision: f64,
    recall: f64,
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let config = resolve(&args.common, Config::default())?;
    config.validate()?;
    if config.data.folds < 2 {
        return Err(Error::config("data.folds", "ablation needs a validation split (data.folds >= 2)").into());
    }
    let out = &args.common.out;
    create_dir(out)?;
    let (train_set, val_set) = split(&config, load_samples(&config)?)?;
    let train_data = data::to_train_data::<f32>(&train_set)?;

    let mut variants: Vec<(String, usize, bool, bool)> = [16, 32, 64]
        .into_iter()
        .filter(|s| config.discriminator.tap_scales().contains(s))
        .map(|s| (format!("attn{s}"), s, true, true))
        .collect();
    variants.push(("no_attention".into(), config.train.attn_scale, false, true));
    variants.push(("no_latent".into(), config.train.attn_scale, true, false));

    let mut rows = Vec::new();
    for &seed in &args.seeds {
        for (name, scale, attention, latent) in &variants {
            let mut train_config = config.train.clone();
            train_config.attn_scale = *scale;
            train_config.use_attention = *attention;
            train_config.use_latent = *latent;
            train_config.seed = seed;
            let mut trainer = Trainer::<f32>::new(train_config, &config.model, &config.discriminator, config.diffusion.schedule()?)?;
            let run_dir = out.join(format!("{name}-seed{seed}"));
            create_dir(&run_dir)?;
            let mut log = BufWriter::new(File::create(run_dir.join("train_log.jsonl"))?);
            trainer.train(&train_data, None, Some(&mut log))?;
            log.flush()?;
            let model = TrainedGenerator {
                state: trainer.generator.clone(),
                timesteps: trainer.schedule.timesteps(),
            };
            let inference = inference_config(&config, *latent);
            let (report, _) = score_model(&model, &trainer.schedule, &inference, &val_set, config.label_channels(), &config)?;
            tracing::info!(variant = %name, seed, dice = report.mean.dice, miou = report.mean.iou, "ablation row");
            rows.push(AblationRow {
                variant: name.clone(),
                attn_scale: *scale,
                use_attention: *attention,
                use_latent: *latent,
                seed,
                dice: report.mean.dice,
                miou: report.mean.iou,
                precision: report.mean.precision,
                recall: report.mean.recall,
            });
        }
    }
    let mut csv = String::from("variant,attn_scale,use_attention,use_latent,seed,dice,miou,precision,recall\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.variant, r.attn_scale, r.use_attention, r.use_latent, r.seed, r.dice, r.miou, r.precision, r.recall
        ));
    }
    fs::write(out.join("ablation.csv"), csv)?;
    write_json(&out.join("ablation.json"), &rows)?;
    manifest::write(out, "ablate", &config, config.train.seed)
}
