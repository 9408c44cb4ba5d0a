use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use disentangle::image_io;
use disentangle::mesh::{self, read_obj};
use disentangle::model::checkpoint::Checkpoint;
use disentangle::model::nets::{Model, Template};
use disentangle::par;
use disentangle::pipeline::train::{checkpoint_config, restore_model, Example};
use disentangle::pipeline::{
    evaluate, fit_single, FitConfig, GtOracle, ModelPredictor, Predictor, StepRecord, Target, TrainConfig, Trainer,
    PCK_ALPHA,
};
use disentangle::synth::dataset::{self, Dataset};
use disentangle::synth::{self, ShapeBasis, SynthSpec};
use disentangle::{Error, Result};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::outdir::{to_toml, OutDir, Prepared, RUN_CONFIG};
use crate::{Command, Common, EvalArgs, FitArgs, SynthArgs, TrainArgs};

pub const MEAN_SHAPE: &str = "mean_shape.obj";
pub const MESH: &str = "mesh.obj";
pub const BEST_CAMERA: &str = "best_camera.png";
pub const TEXTURE: &str = "texture.png";
pub const CURVE: &str = "curve.jsonl";
pub const FIT_SUMMARY: &str = "fit.json";
pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const TRAIN_SUMMARY: &str = "train.json";
pub const REPORT: &str = "report.json";
pub const INSTANCES: &str = "instances.csv";

pub fn camera_render(m: usize) -> String {
    format!("camera_{m}.png")
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth_cmd(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>, parse: impl Fn(&str) -> Result<T>) -> Result<T> {
    match path {
        Some(p) => parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => Ok(T::default()),
    }
}

/// Prints the configuration when asked; otherwise prepares the output
/// directory and reports whether there is work to do.
fn start<T: Serialize>(common: &Common, name: &str, config: &T, keep_partial: bool) -> Result<Option<(OutDir, Prepared)>> {
    if common.print_config {
        print!("{}", to_toml(config)?);
        return Ok(None);
    }
    let out = OutDir::new(common.out.as_deref().expect("clap requires --out"));
    let prepared = out.prepare(common.overwrite, keep_partial)?;
    if prepared == Prepared::Complete {
        info!("{name}: {} is already complete; pass --overwrite to redo it", out.root.display());
        return Ok(None);
    }
    Ok(Some((out, prepared)))
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = load_config(a.common.config.as_deref(), SynthSpec::from_toml)?;
    if let Some(s) = a.common.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let Some((out, _)) = start(&a.common, "synth", &spec, false)? else {
        return Ok(());
    };
    out.write_toml(RUN_CONFIG, &spec)?;
    let manifest = par::with_threads(a.common.threads, || dataset::generate(&spec, &out.root))?;
    let template = Template::new(spec.mesh_level)?;
    let basis = ShapeBasis::new(&template.mesh, (*template.symmetry).clone());
    let mean = synth::gt_vertices(&template, &synth::base_shape(&spec, &basis))?;
    out.write(MEAN_SHAPE, mesh::obj_string(&mean, &template.faces))?;
    out.mark_complete("synth")?;
    let total: usize = manifest.splits.values().map(Vec::len).sum();
    for (split, ids) in &manifest.splits {
        info!("{split}: {} records", ids.len());
    }
    println!("{total} records written to {}", out.root.display());
    Ok(())
}

#[derive(Serialize)]
struct FitSummary<'a> {
    image: &'a Path,
    mask: &'a Path,
    template: Option<&'a Path>,
    iou: f64,
    best: usize,
    posterior: &'a [f64],
    cameras: Vec<[f64; 7]>,
    steps_run: usize,
}

fn read_template(path: &Path, level: u32) -> Result<disentangle::Tensor> {
    let template = Template::new(level)?;
    let m = read_obj(path)?;
    if m.num_vertices() != template.mesh.num_vertices() || m.faces != template.mesh.faces {
        return Err(Error::DataValidation(format!(
            "{}: template must be a level-{level} icosphere deformation ({} vertices)",
            path.display(),
            template.mesh.num_vertices()
        )));
    }
    let full = m.vertex_tensor();
    let free = template.symmetry.restrict(&full)?;
    let back = template.symmetry.expand(&free)?;
    let asym = full.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if asym > 1e-6 {
        return Err(Error::DataValidation(format!(
            "{}: template is not mirror symmetric (deviation {asym:e})",
            path.display()
        )));
    }
    Ok(free)
}

fn fit_cmd(a: FitArgs) -> Result<()> {
    let mut cfg: FitConfig = load_config(a.common.config.as_deref(), FitConfig::from_toml)?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if a.common.print_config {
        return start(&a.common, "fit", &cfg, false).map(|_| ());
    }
    let (image_path, mask_path) = (a.image.expect("clap requires --image"), a.mask.expect("clap requires --mask"));
    let image = image_io::read_rgb(&image_path)?;
    let mask = image_io::read_mask(&mask_path)?;
    let target = Target::new(image, mask)?;
    let (h, w) = target.size();
    cfg.render.height = h;
    cfg.render.width = w;
    if cfg.coarse_size > h {
        info!("image is smaller than the coarse size; the coarse stage runs at {h}x{w}");
        cfg.coarse_size = h;
    }
    cfg.validate()?;
    let template = a.template.as_deref().map(|p| read_template(p, cfg.mesh_level)).transpose()?;
    let Some((out, _)) = start(&a.common, "fit", &cfg, false)? else {
        return Ok(());
    };
    out.write_toml(RUN_CONFIG, &cfg)?;
    let result = par::with_threads(a.common.threads, || fit_single(&target, template.as_ref(), &cfg))?;

    out.write(MESH, mesh::obj_string(&result.vertices, &result.faces))?;
    let best = result.render(result.best_camera(), &cfg.render)?;
    image_io::write_rgb(&out.path(BEST_CAMERA), &best.image)?;
    for (m, pose) in result.multiplex.hypotheses.iter().enumerate() {
        image_io::write_rgb(&out.path(&camera_render(m)), &result.render(pose, &cfg.render)?.image)?;
    }
    image_io::write_rgb(&out.path(TEXTURE), &result.texture)?;
    let mut curve = String::new();
    for s in &result.curve {
        curve += &json_line(s)?;
    }
    out.write(CURVE, curve)?;
    out.write_json(
        FIT_SUMMARY,
        &FitSummary {
            image: &image_path,
            mask: &mask_path,
            template: a.template.as_deref(),
            iou: result.iou,
            best: result.best,
            posterior: &result.posterior,
            cameras: result.multiplex.hypotheses.iter().map(|p| p.to_seven()).collect(),
            steps_run: result.steps_run,
        },
    )?;
    out.mark_complete("fit")?;
    println!("iou {:.4} (camera {} of {}, {} steps)", result.iou, result.best, result.posterior.len(), result.steps_run);
    Ok(())
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string(value).map_err(|e| Error::Json {
        context: "metrics".into(),
        source: e,
    })?;
    s.push('\n');
    Ok(s)
}

fn load_examples(config: &TrainConfig) -> Result<Vec<Example>> {
    let root = config
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset: pass --dataset or set `dataset` in the configuration".into()))?;
    let ds = Dataset::open(root)?;
    ds.load("train")?.iter().map(Example::from_record).collect()
}

/// Keeps the first `n` lines of the metrics log.
fn truncate_lines(path: &Path, n: usize) -> Result<()> {
    let text = match File::open(path) {
        Ok(f) => BufReader::new(f)
            .lines()
            .take(n)
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(path, e))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    if text.len() < n {
        return Err(Error::Incompatible(format!(
            "{} holds {} records but the checkpoint is at step {n}",
            path.display(),
            text.len()
        )));
    }
    let body: String = text.iter().map(|l| format!("{l}\n")).collect();
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn phase_a_losses(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let rec: StepRecord = serde_json::from_str(line).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        if rec.phase == 'A' {
            out.push(rec.loss);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct TrainSummary {
    phase_a_steps: usize,
    phase_b_steps: usize,
    first_loss: Option<f64>,
    last_loss: Option<f64>,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = load_config(a.common.config.as_deref(), TrainConfig::from_toml)?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.dataset {
        cfg.dataset = Some(d);
    }
    if let Some(pe) = a.pe {
        cfg.model.pe = pe.into();
    }
    if a.no_shape_encoder {
        cfg.model.use_shape_encoder = false;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    cfg.validate()?;
    let Some((out, prepared)) = start(&a.common, "train", &cfg, a.resume)? else {
        return Ok(());
    };
    let ckpt_path = out.path(CHECKPOINT);
    let metrics_path = out.path(METRICS);
    par::with_threads(a.common.threads, || -> Result<()> {
        let mut trainer = if prepared == Prepared::Partial && ckpt_path.is_file() {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let stored = checkpoint_config(&ckpt)?;
            if stored != cfg {
                warn!("resuming with the configuration stored in the checkpoint; command-line settings are ignored");
            }
            let t = Trainer::resume(&ckpt, load_examples(&stored)?)?;
            truncate_lines(&metrics_path, t.step_a + t.step_b)?;
            info!("resuming at phase A step {}, phase B step {}", t.step_a, t.step_b);
            t
        } else {
            if prepared == Prepared::Partial {
                info!("no checkpoint to resume from; starting over");
                let _ = fs::remove_file(&metrics_path);
            }
            out.write_toml(RUN_CONFIG, &cfg)?;
            Trainer::new(cfg.clone(), load_examples(&cfg)?)?
        };
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        let mut metrics = BufWriter::new(file);
        let save = |t: &Trainer, metrics: &mut BufWriter<File>| -> Result<()> {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            out.write(CHECKPOINT, t.checkpoint().to_bytes()?)
        };
        let total_a = trainer.phase_a_total_steps();
        let total_b = trainer.phase_b_total_steps();
        let mut taken = 0;
        while !trainer.is_complete() {
            if a.stop_after == Some(taken) {
                save(&trainer, &mut metrics)?;
                println!(
                    "stopped at phase A step {}, phase B step {}; continue with --resume",
                    trainer.step_a, trainer.step_b
                );
                return Ok(());
            }
            taken += 1;
            let rec = if trainer.step_a < total_a {
                trainer.step_phase_a()?
            } else {
                trainer.step_phase_b()?
            };
            metrics
                .write_all(json_line(&rec)?.as_bytes())
                .map_err(|e| Error::io(&metrics_path, e))?;
            let done = trainer.step_a + trainer.step_b;
            if done % a.checkpoint_every.max(1) == 0 {
                save(&trainer, &mut metrics)?;
                info!("step {done}/{}: loss {:.5}", total_a + total_b, rec.loss);
            }
        }
        save(&trainer, &mut metrics)?;
        drop(metrics);
        let losses = phase_a_losses(&metrics_path)?;
        out.write_json(
            TRAIN_SUMMARY,
            &TrainSummary {
                phase_a_steps: trainer.step_a,
                phase_b_steps: trainer.step_b,
                first_loss: losses.first().copied(),
                last_loss: losses.last().copied(),
            },
        )?;
        out.mark_complete("train")?;
        println!(
            "trained {} phase-A and {} phase-B steps; checkpoint at {}",
            trainer.step_a,
            trainer.step_b,
            ckpt_path.display()
        );
        Ok(())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub split: String,
    pub gt_oracle: bool,
    pub alpha: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: None,
            split: "test".into(),
            gt_oracle: false,
            alpha: PCK_ALPHA,
        }
    }
}

impl EvalConfig {
    fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Serialize)]
struct ReportFile {
    split: String,
    predictor: &'static str,
    num_records: usize,
    accuracy: f64,
    mean_iou: f64,
    pck: Option<f64>,
    pck_alpha: f64,
    pck_count: usize,
}

fn model_predictor(path: &Path, ds: &Dataset) -> Result<ModelPredictor> {
    let ckpt = Checkpoint::load(path)?;
    let config = checkpoint_config(&ckpt)?.model;
    let spec = &ds.manifest.spec;
    let mismatch = [
        ("image size", config.image_size, spec.image_size),
        ("class count", config.num_classes, spec.num_classes),
        ("mesh level", config.mesh_level as usize, spec.mesh_level as usize),
    ]
    .into_iter()
    .find(|(_, m, d)| m != d);
    if let Some((what, m, d)) = mismatch {
        return Err(Error::Incompatible(format!("checkpoint {what} is {m}, dataset has {d}")));
    }
    let model = Model::new(config)?;
    let params = restore_model(&model, &ckpt)?;
    Ok(ModelPredictor { model, params })
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let mut cfg: EvalConfig = load_config(a.common.config.as_deref(), EvalConfig::from_toml)?;
    if a.checkpoint.is_some() {
        cfg.checkpoint = a.checkpoint;
    }
    if a.dataset.is_some() {
        cfg.dataset = a.dataset;
    }
    if let Some(s) = a.split {
        cfg.split = s;
    }
    if a.gt_oracle {
        cfg.gt_oracle = true;
    }
    if let Some(al) = a.alpha {
        cfg.alpha = al;
    }
    if a.common.seed.is_some() {
        warn!("eval is deterministic; --seed has no effect");
    }
    if !a.common.print_config {
        if cfg.dataset.is_none() {
            return Err(Error::Config("no dataset: pass --dataset".into()));
        }
        if !cfg.gt_oracle && cfg.checkpoint.is_none() {
            return Err(Error::Config("pass --checkpoint or --gt-oracle".into()));
        }
        if !(cfg.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
    }
    let Some((out, _)) = start(&a.common, "eval", &cfg, false)? else {
        return Ok(());
    };
    out.write_toml(RUN_CONFIG, &cfg)?;
    let ds = Dataset::open(cfg.dataset.as_deref().expect("checked above"))?;
    let (predictor, name): (Box<dyn Predictor>, _) = if cfg.gt_oracle {
        (Box::new(GtOracle::new(ds.manifest.spec.mesh_level)?), "gt_oracle")
    } else {
        let path = cfg.checkpoint.as_deref().expect("checked above");
        (Box::new(model_predictor(path, &ds)?), "checkpoint")
    };
    let report = par::with_threads(a.common.threads, || -> Result<_> {
        let records = ds.load(&cfg.split)?;
        evaluate(predictor.as_ref(), &records, cfg.alpha)
    })?;
    let mut csv = String::from("id,label,predicted,iou\n");
    for r in &report.rows {
        csv += &format!("{},{},{},{}\n", r.id, r.label, r.predicted, r.iou);
    }
    out.write(INSTANCES, csv)?;
    out.write_json(
        REPORT,
        &ReportFile {
            split: cfg.split.clone(),
            predictor: name,
            num_records: report.num_records,
            accuracy: report.accuracy,
            mean_iou: report.mean_iou,
            pck: report.pck,
            pck_alpha: report.pck_alpha,
            pck_count: report.pck_count,
        },
    )?;
    out.mark_complete("eval")?;
    let pck = report.pck.map_or("n/a".to_string(), |p| format!("{p:.4}"));
    println!(
        "{} records: accuracy {:.4}, mean IoU {:.4}, PCK@{} {pck}",
        report.num_records, report.accuracy, report.mean_iou, report.pck_alpha
    );
    Ok(())
}
