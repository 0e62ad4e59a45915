use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use dermanet::augment::{balancing_plan, materialize_balanced, write_balanced_csv, BalancingPlan};
use dermanet::config::{Preset, RunConfig};
use dermanet::dataset::{
    apply_split_csv, compute_class_weights, load_manifest, stratified_split, write_split_csv, ClassCounts,
    DatasetManifest, LesionClass, Split,
};
use dermanet::evalx::{emit_report, evaluate_scores};
use dermanet::model::{
    BackboneKind, Classifier, REFERENCE_STAGE1_TRAINABLE_FRACTION, REFERENCE_TOTAL_PARAMS,
};
use dermanet::synth::{quadrant_of, write_blob_dataset, BlobSpec, DESK_COUNTS};
use dermanet::train::{load_records, predict, run_schedule, LabeledImages, RunSink};
use dermanet::xai::{export_heatmap, grad_cam, predicted_class, saliency_map, Heatmap};
use dermanet::{Error, Result};
use serde::Serialize;

use crate::{GlobalArgs, Kind};

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub dry_run: bool,
}

impl Context {
    pub fn new(args: &GlobalArgs) -> Result<Self> {
        let preset = args.preset.as_deref().map(str::parse::<Preset>).transpose()?;
        let base = preset.map(RunConfig::preset).unwrap_or_default();
        let mut cfg = match &args.config {
            Some(path) => RunConfig::load(path, &base)?,
            None => base,
        };
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if args.deterministic {
            cfg.deterministic = true;
        }
        cfg.validate()?;
        let name = args.preset.clone().unwrap_or_else(|| "default".into());
        let out = args.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
        Ok(Context {
            cfg,
            out,
            dry_run: args.dry_run,
        })
    }

    fn split_path(&self) -> PathBuf {
        self.cfg.data.split_csv.clone().unwrap_or_else(|| self.out.join("split.csv"))
    }

    fn default_checkpoint(&self) -> PathBuf {
        self.out.join("checkpoints").join("best")
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    /// Writes the fully resolved config next to the outputs.
    fn echo_config(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.cfg.to_toml_string()?).map_err(|e| Error::io(&path, e))
    }
}

/// Metadata CSV and image directory, generating the synthetic set on demand.
fn dataset_paths(ctx: &Context) -> Result<(PathBuf, PathBuf)> {
    let data = &ctx.cfg.data;
    if let Some(csv) = &data.metadata_csv {
        let images = data
            .image_dir
            .clone()
            .or_else(|| csv.parent().map(|p| p.join("images")))
            .unwrap_or_else(|| PathBuf::from("images"));
        return Ok((csv.clone(), images));
    }
    if !data.synthetic {
        return Err(Error::Config(
            "no dataset configured: set data.metadata_csv (and data.image_dir) or data.synthetic = true".into(),
        ));
    }
    let dir = ctx.out.join("data");
    let csv = dir.join("metadata.csv");
    if !csv.exists() {
        if ctx.dry_run {
            return Err(Error::invalid(
                "data",
                format!("synthetic dataset not generated yet at {}; run `synth` first", dir.display()),
            ));
        }
        let spec = BlobSpec {
            size: data.synthetic_size,
            counts: ClassCounts(DESK_COUNTS),
            seed: ctx.cfg.seed,
        };
        log::info!("generating synthetic blob dataset ({} images) in {}", spec.counts.total(), dir.display());
        write_blob_dataset(&dir, &spec)?;
    }
    Ok((csv, dir.join("images")))
}

fn print_split_table(m: &DatasetManifest) {
    let (tr, va, te) = (
        m.split_counts(Split::Train),
        m.split_counts(Split::Val),
        m.split_counts(Split::Test),
    );
    let all = m.class_counts();
    println!("{:<8} {:<30} {:>7} {:>7} {:>7} {:>7}", "class", "description", "total", "train", "val", "test");
    for c in LesionClass::ALL {
        println!(
            "{:<8} {:<30} {:>7} {:>7} {:>7} {:>7}",
            c.code(),
            c.description(),
            all[c],
            tr[c],
            va[c],
            te[c]
        );
    }
    println!(
        "{:<8} {:<30} {:>7} {:>7} {:>7} {:>7}",
        "total",
        "",
        all.total(),
        tr.total(),
        va.total(),
        te.total()
    );
}

pub fn prepare(ctx: &Context) -> Result<DatasetManifest> {
    let (csv, images) = dataset_paths(ctx)?;
    let manifest = load_manifest(&csv, &images)?;
    let split = stratified_split(manifest, &ctx.cfg.split_spec())?;
    print_split_table(&split);
    if let Ok(w) = compute_class_weights(&split, Split::Train) {
        let parts: Vec<String> = LesionClass::ALL.iter().map(|c| format!("{}={:.4}", c.code(), w[*c])).collect();
        println!("class weights (train): {}", parts.join(" "));
    }
    if ctx.dry_run {
        println!("dry run: nothing written");
        return Ok(split);
    }
    ctx.ensure_out()?;
    let path = ctx.split_path();
    write_split_csv(&split, &path)?;
    ctx.echo_config(&ctx.out)?;
    log::info!("wrote {}", path.display());
    Ok(split)
}

/// Manifest with the persisted split applied; prepares it first for `train`.
fn split_manifest(ctx: &Context, prepare_if_missing: bool) -> Result<DatasetManifest> {
    let path = ctx.split_path();
    if !path.exists() {
        if prepare_if_missing && !ctx.dry_run {
            log::info!("no split at {}; running prepare", path.display());
            return prepare(ctx);
        }
        return Err(Error::invalid(
            "split",
            format!("{} not found; run `dermanet prepare` first", path.display()),
        ));
    }
    let (csv, images) = dataset_paths(ctx)?;
    apply_split_csv(load_manifest(&csv, &images)?, &path)
}

pub fn synth(ctx: &Context, counts: Option<Vec<usize>>, size: Option<usize>) -> Result<()> {
    let counts = match counts {
        Some(v) => {
            let arr: [usize; 7] = v
                .try_into()
                .map_err(|v: Vec<usize>| Error::invalid("counts", format!("expected 7 counts, got {}", v.len())))?;
            ClassCounts(arr)
        }
        None => ClassCounts(DESK_COUNTS),
    };
    let spec = BlobSpec {
        size: size.unwrap_or(ctx.cfg.data.synthetic_size),
        counts,
        seed: ctx.cfg.seed,
    };
    let dir = ctx.out.join("data");
    if ctx.dry_run {
        println!("dry run: would write {} images of {}px to {}", counts.total(), spec.size, dir.display());
        return Ok(());
    }
    let csv = write_blob_dataset(&dir, &spec)?;
    println!("wrote {} images; metadata {}", counts.total(), csv.display());
    Ok(())
}

fn print_plan(plan: &BalancingPlan) {
    let base = plan.base_counts();
    println!("{:<8} {:>8} {:>8} {:>8}", "class", "count", "target", "added");
    for c in LesionClass::ALL {
        println!("{:<8} {:>8} {:>8} {:>8}", c.code(), base[c], plan.targets[c], plan.to_generate[c]);
    }
    println!("{:<8} {:>8} {:>8} {:>8}", "total", base.total(), plan.total(), plan.to_generate.total());
}

fn balanced_manifest(ctx: &Context, m: &DatasetManifest) -> Result<(DatasetManifest, BalancingPlan)> {
    let plan = balancing_plan(&m.split_counts(Split::Train), ctx.cfg.balance.fraction)?;
    let balanced = materialize_balanced(m, &plan, &ctx.cfg.augment, ctx.cfg.seed)?;
    Ok((balanced, plan))
}

pub fn balance(ctx: &Context, full_counts: bool) -> Result<()> {
    if full_counts {
        let (csv, images) = dataset_paths(ctx)?;
        let m = load_manifest(&csv, &images)?;
        print_plan(&balancing_plan(&m.class_counts(), ctx.cfg.balance.fraction)?);
        return Ok(());
    }
    let m = split_manifest(ctx, false)?;
    let (balanced, plan) = balanced_manifest(ctx, &m)?;
    print_plan(&plan);
    if ctx.dry_run {
        println!("dry run: nothing written");
        return Ok(());
    }
    let path = ctx.out.join("balanced.csv");
    write_balanced_csv(&balanced, &path)?;
    ctx.echo_config(&ctx.out)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn log_header(cfg: &RunConfig) {
    println!(
        "run: seed {} | batch {} | image {}x{} | balance {} (fraction {}) | mixup alpha {} p {}",
        cfg.seed,
        cfg.batch_size,
        cfg.image_size[0],
        cfg.image_size[1],
        cfg.balance.enabled,
        cfg.balance.fraction,
        cfg.mixup.alpha,
        cfg.mixup.probability
    );
    println!(
        "loss: focal gamma {} alpha {} | label smoothing {} | class weights {}",
        cfg.loss.gamma, cfg.loss.alpha, cfg.loss.smoothing, cfg.loss.use_class_weights
    );
    println!(
        "model: {:?} backbone {:?} | attention r={} | head {:?} dropout {}",
        cfg.model.backbone.kind,
        cfg.model.backbone.channels,
        cfg.model.attention.reduction_ratio,
        cfg.model.head.hidden_sizes,
        cfg.model.head.dropout
    );
    for s in &cfg.stages {
        println!(
            "stage {}: {} epochs | lr {:e} | weight decay {:e} | early stop {}",
            s.stage_id,
            s.epochs,
            s.base_lr,
            s.weight_decay,
            s.early_stop_patience.map(|p| format!("patience {p}")).unwrap_or_else(|| "off".into())
        );
    }
}

fn load_split(m: &DatasetManifest, split: Split, size: (usize, usize)) -> Result<LabeledImages> {
    load_records(m.in_split(split), size)
}

pub fn train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    log_header(cfg);
    if cfg.mixed_precision {
        log::warn!("mixed_precision is ignored; all computation is 64-bit");
    }
    if ctx.dry_run {
        Classifier::build(&cfg.model, cfg.seed)?;
        println!("dry run: config and model are valid; nothing written");
        return Ok(());
    }
    let manifest = split_manifest(ctx, true)?;
    let manifest = if cfg.balance.enabled {
        let (balanced, plan) = balanced_manifest(ctx, &manifest)?;
        print_plan(&plan);
        balanced
    } else {
        manifest
    };
    let size = cfg.target_size();
    let train = load_split(&manifest, Split::Train, size)?;
    let val = load_split(&manifest, Split::Val, size)?;
    let test = load_split(&manifest, Split::Test, size)?;
    log::info!("images: train {} | val {} | test {}", train.len(), val.len(), test.len());

    let mut opts = cfg.train_options();
    if cfg.loss.use_class_weights {
        opts.class_weights = Some(compute_class_weights(&manifest, Split::Train)?);
    }
    let mut model = Classifier::build(&cfg.model, cfg.seed)?;
    let counts = model.parameter_counts();
    log::info!("model parameters: {}", counts.total);
    if cfg.model.backbone.kind == BackboneKind::LargePretrained {
        log::info!(
            "reference build: {} parameters, {:.1}% trainable with the backbone frozen",
            REFERENCE_TOTAL_PARAMS,
            100.0 * REFERENCE_STAGE1_TRAINABLE_FRACTION
        );
    }
    ctx.ensure_out()?;
    ctx.echo_config(&ctx.out)?;
    let mut sink = RunSink::to_dir(&ctx.out, cfg.save_epoch_checkpoints)?;
    let report = run_schedule(&mut model, &train, &val, &cfg.stages, &opts, &mut sink)?;
    let report_path = ctx.out.join("training_report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&report_path, e))?;
    if let Some(b) = &report.best {
        println!("best: stage {} epoch {} val accuracy {:.4}", b.stage, b.epoch, b.val_accuracy);
    }
    let acc = evaluate_to(ctx, &model, &test, &ctx.out.join("eval"))?;
    println!("test accuracy {acc:.4} | training wall clock {:.1}s", report.wall_clock_secs);
    Ok(())
}

fn evaluate_to(ctx: &Context, model: &Classifier, data: &LabeledImages, dir: &Path) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("split", "no images to evaluate"));
    }
    let probs = predict(model, &data.images, ctx.cfg.eval_batch_size)?;
    let ev = evaluate_scores(&probs, &data.label_indices())?;
    let files = emit_report(&ev.report(), ev.roc.as_ref(), &ev.confusion, dir)?;
    ctx.echo_config(dir)?;
    let a = &ev.aggregate;
    println!(
        "accuracy {:.4} | macro F1 {:.4} | weighted F1 {:.4} | micro AUC {}",
        a.overall_accuracy,
        a.macro_avg.f1,
        a.weighted.f1,
        a.micro_auc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
    );
    log::info!("wrote {}", files.metrics_json.display());
    Ok(a.overall_accuracy)
}

fn load_checkpoint(ctx: &Context, checkpoint: Option<PathBuf>) -> Result<Classifier> {
    let path = checkpoint.unwrap_or_else(|| ctx.default_checkpoint());
    if !path.join(dermanet::model::META_FILE).exists() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", path.display())));
    }
    Ok(Classifier::load(&path)?.0)
}

pub fn eval(ctx: &Context, checkpoint: Option<PathBuf>, split: &str) -> Result<()> {
    let split: Split = split.parse()?;
    let model = load_checkpoint(ctx, checkpoint)?;
    let manifest = split_manifest(ctx, false)?;
    let data = load_split(&manifest, split, ctx.cfg.target_size())?;
    if ctx.dry_run {
        println!("dry run: would evaluate {} {} images", data.len(), split.as_str());
        return Ok(());
    }
    evaluate_to(ctx, &model, &data, &ctx.out.join("eval"))?;
    Ok(())
}

pub struct ExplainArgs {
    pub checkpoint: Option<PathBuf>,
    pub images: Vec<String>,
    pub split: Option<String>,
    pub class: Option<String>,
    pub kind: Kind,
    pub layer: Option<String>,
}

#[derive(Debug, Serialize)]
struct Localization {
    layer: String,
    explained: usize,
    correct_predictions: usize,
    in_quadrant: usize,
    rate: Option<f64>,
}

pub fn explain(ctx: &Context, args: &ExplainArgs) -> Result<()> {
    let model = load_checkpoint(ctx, args.checkpoint.clone())?;
    let manifest = split_manifest(ctx, false)?;
    let layer = args.layer.clone().unwrap_or_else(|| ctx.cfg.xai.layer.clone());
    if !model.layer_names().contains(&layer) {
        return Err(Error::invalid(
            "layer",
            format!("unknown layer {layer:?}; known: {}", model.layer_names().join(", ")),
        ));
    }
    let class: Option<usize> = args.class.as_deref().map(|c| c.parse::<LesionClass>().map(|c| c.index())).transpose()?;
    let records: Vec<_> = match &args.split {
        Some(s) => {
            let split: Split = s.parse()?;
            manifest.in_split(split).collect()
        }
        None => {
            if args.images.is_empty() {
                return Err(Error::invalid("image", "pass --image <id> or --split <name>"));
            }
            let unknown: BTreeSet<&str> =
                args.images.iter().map(String::as_str).filter(|id| manifest.get(id).is_none()).collect();
            if !unknown.is_empty() {
                return Err(Error::invalid(
                    "image",
                    format!("unknown image id(s): {}", unknown.into_iter().collect::<Vec<_>>().join(", ")),
                ));
            }
            args.images.iter().filter_map(|id| manifest.get(id)).collect()
        }
    };
    if ctx.dry_run {
        println!("dry run: would explain {} image(s) at layer {layer}", records.len());
        return Ok(());
    }
    let dir = ctx.out.join("explain");
    let data = load_records(records.iter().copied(), ctx.cfg.target_size())?;
    let mut loc = Localization {
        layer: layer.clone(),
        explained: 0,
        correct_predictions: 0,
        in_quadrant: 0,
        rate: None,
    };
    let mut has_quadrants = false;
    for (rec, img) in records.iter().zip(&data.images) {
        let predicted = predicted_class(&model, img)?;
        let target = match class {
            Some(c) => c,
            None => {
                log::info!(
                    "{}: explaining predicted class {}",
                    rec.image_id,
                    LesionClass::from_index(predicted).map(|c| c.code()).unwrap_or("?")
                );
                predicted
            }
        };
        let mut maps: Vec<Heatmap> = Vec::new();
        if args.kind != Kind::Saliency {
            maps.push(grad_cam(&model, img, target, &layer)?.0);
        }
        if args.kind != Kind::Gradcam {
            maps.push(saliency_map(&model, img, target)?);
        }
        if let (Some(q), Some(cam)) = (rec.metadata.get("quadrant"), maps.first().filter(|_| args.kind != Kind::Saliency)) {
            has_quadrants = true;
            if predicted == rec.label.index() {
                loc.correct_predictions += 1;
                let (y, x) = cam.argmax();
                if quadrant_of(y, x, img.height(), img.width()).to_string() == *q {
                    loc.in_quadrant += 1;
                }
            }
        }
        for hm in &maps {
            export_heatmap(&dir, &rec.image_id, img, hm, ctx.cfg.xai.opacity)?;
        }
        loc.explained += 1;
    }
    println!("explained {} image(s) into {}", loc.explained, dir.display());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    if has_quadrants {
        loc.rate = (loc.correct_predictions > 0).then(|| loc.in_quadrant as f64 / loc.correct_predictions as f64);
        println!(
            "grad-cam argmax in the blob quadrant: {}/{} correct predictions",
            loc.in_quadrant, loc.correct_predictions
        );
        let path = dir.join("localization.json");
        fs::write(&path, serde_json::to_string_pretty(&loc)?).map_err(|e| Error::io(&path, e))?;
    }
    ctx.echo_config(&dir)?;
    Ok(())
}
