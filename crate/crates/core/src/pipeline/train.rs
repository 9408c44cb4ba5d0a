//! Two-phase training.
//!
//! Phase A trains every network except the camera decoder. Each instance
//! owns a multiplex of camera hypotheses, optimized jointly with the shared
//! parameters and weighted by the softmin posterior of their losses. Phase B
//! freezes everything else and regresses the camera decoder onto each
//! instance's most probable hypothesis.
//!
//! Training uses batch size 1. Instance order within an epoch is a
//! permutation derived from `(seed, epoch)`, so a run can resume from any
//! step without storing RNG state.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::{camera_terms, objective, Posterior, Target};
use crate::camera::{CameraMultiplex, CameraPose};
use crate::error::{Error, Result};
use crate::losses::{best_hypothesis, Ema, LossBreakdown};
use crate::model::checkpoint::Checkpoint;
use crate::model::nets::Model;
use crate::model::ops;
use crate::model::params::{Binding, ParamStore};
use crate::model::tape::{Tape, Var};
use crate::synth::Record;

pub const POSES: &str = "poses";
const MODEL_STORE: &str = "model";
const CHECKPOINT_KIND: &str = "train";

/// Training data for one instance.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub label: usize,
    pub target: Target,
}

impl Example {
    pub fn from_record(r: &Record) -> Result<Self> {
        Ok(Self {
            id: r.id.clone(),
            label: r.label,
            target: Target::new(r.image.clone(), r.mask.clone())?,
        })
    }
}

/// Per-instance state that persists across epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceState {
    pub id: String,
    /// Holds the `[M, 7]` multiplex under [`POSES`] with its own Adam state.
    pub poses: ParamStore,
    /// Posterior from the instance's most recent phase-A step.
    pub posterior: Vec<f64>,
}

impl InstanceState {
    pub fn multiplex(&self) -> CameraMultiplex {
        CameraMultiplex::from_tensor(self.poses.get(POSES).expect("poses")).expect("shape")
    }

    pub fn best(&self) -> CameraPose {
        self.multiplex().hypotheses[best_hypothesis(&self.posterior)]
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: char,
    pub epoch: usize,
    pub step: usize,
    pub instance: String,
    /// Phase A: the loss breakdown. Phase B: `None`.
    #[serde(flatten)]
    pub losses: Option<LossBreakdown>,
    /// Phase B regression loss, or the phase-A total.
    pub loss: f64,
}

/// Training state: parameters, per-instance multiplexes and schedule position.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub params: ParamStore,
    pub instances: Vec<InstanceState>,
    pub ema: Ema,
    /// Completed phase-A steps.
    pub step_a: usize,
    /// Completed phase-B steps.
    pub step_b: usize,
    examples: Vec<Example>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn numerical(step: usize, instance: &str, cause: Error) -> Error {
    Error::Numerical {
        step,
        instance: instance.to_string(),
        detail: cause.to_string(),
    }
}

/// Attaches the step to failures caused by non-finite values.
fn at_step(step: usize, instance: &str, e: Error) -> Error {
    match e {
        Error::NonFinite(_) | Error::NonFiniteGradient(_) => numerical(step, instance, e),
        other => other,
    }
}

fn check_finite(store: &ParamStore) -> Result<()> {
    match store.first_non_finite() {
        Some(name) => Err(Error::NonFinite(format!("parameter `{name}`"))),
        None => Ok(()),
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, examples: Vec<Example>) -> Result<Self> {
        config.validate()?;
        check_examples(&config, &examples)?;
        let model = Model::new(config.model.clone())?;
        let params = model.init_params(config.seed)?;
        let instances = examples
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let mux = CameraMultiplex::init(config.cameras, config.seed ^ (i as u64 + 1), config.rig_jitter_deg)?;
                let mut poses = ParamStore::new();
                poses.insert(POSES, mux.to_tensor())?;
                Ok(InstanceState {
                    id: e.id.clone(),
                    poses,
                    posterior: vec![1.0 / config.cameras as f64; config.cameras],
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            ema: Ema::new(config.posterior_decay),
            config,
            model,
            params,
            instances,
            step_a: 0,
            step_b: 0,
            examples,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn phase_a_total_steps(&self) -> usize {
        self.config
            .max_steps
            .unwrap_or(self.config.phase_a_epochs * self.examples.len())
    }

    pub fn phase_b_total_steps(&self) -> usize {
        self.config.phase_b_epochs * self.examples.len()
    }

    /// Instance visited at global step `step`.
    fn schedule(&self, step: usize) -> (usize, usize) {
        let n = self.examples.len();
        let epoch = step / n;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(self.config.seed, epoch as u64 + 1));
        (epoch, order[step % n])
    }

    /// Records the phase-A objective of instance `i` on a fresh tape.
    ///
    /// Every parameter accepted by `trainable` and the instance's multiplex
    /// become tape variables.
    pub fn forward_a(
        &self,
        params: &ParamStore,
        poses: &ParamStore,
        i: usize,
        posterior: &mut Posterior,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<PhaseAForward> {
        let ex = &self.examples[i];
        let m = &self.model;
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape, trainable);
        let pose_binding = poses.bind(&mut tape, |_| true);
        let image = tape.constant(ex.target.image.clone());
        let enc = m.encode(&mut tape, &binding, image)?;
        let shape = m.decode_shape(&mut tape, &binding, enc.latent)?;
        let flow = m.decode_flow(&mut tape, &binding, enc.latent)?;
        let (_, face_colors) = m.texture(&mut tape, image, flow)?;
        let pv = pose_binding.var(POSES)?;
        let rows: Vec<(Var, usize)> = (0..self.config.cameras).map(|r| (pv, r)).collect();
        let cams = camera_terms(
            &mut tape,
            &rows,
            shape.vertices,
            face_colors,
            &m.template.faces,
            &self.config.render,
            &ex.target,
        )?;
        let smooth = ops::smoothness(&mut tape, shape.vertices, &m.template.laplacian)?;
        let reg = ops::deformation_reg(&mut tape, shape.deform);
        let rec = m.recognize(&mut tape, &binding, enc.features, flow, shape.deform)?;
        let task = ops::cross_entropy(&mut tape, rec.logits, ex.label)?;
        let (total, breakdown) = objective(
            &mut tape,
            &cams,
            posterior,
            smooth,
            reg,
            Some(task),
            &self.config.weights,
        )?;
        Ok(PhaseAForward {
            tape,
            binding,
            pose_binding,
            total,
            breakdown,
        })
    }

    fn running_posterior(&self) -> Posterior {
        Posterior::Running {
            ema: self.ema,
            scale: self.config.weights.posterior_scale,
        }
    }

    /// One phase-A step on the next scheduled instance.
    pub fn step_phase_a(&mut self) -> Result<StepRecord> {
        let (epoch, i) = self.schedule(self.step_a);
        let mut posterior = self.running_posterior();
        let fwd = self.forward_a(&self.params, &self.instances[i].poses, i, &mut posterior, |n| {
            !Model::is_camera_param(n)
        })
        .map_err(|e| at_step(self.step_a, &self.examples[i].id, e))?;
        let b = fwd.breakdown;
        if !b.total.is_finite() {
            return Err(Error::Numerical {
                step: self.step_a,
                instance: self.examples[i].id.clone(),
                detail: format!("total loss is {}", b.total),
            });
        }
        let grads = fwd.tape.backward(fwd.total)?;
        self.params.accumulate(&fwd.binding, &grads);
        self.instances[i].poses.accumulate(&fwd.pose_binding, &grads);
        let fail = |e: Error| numerical(self.step_a, &self.examples[i].id, e);
        self.params.adam_step(&self.config.adam).map_err(fail)?;
        self.instances[i].poses.adam_step(&self.config.pose_adam).map_err(fail)?;
        check_finite(&self.params).map_err(fail)?;
        check_finite(&self.instances[i].poses).map_err(fail)?;
        if let Posterior::Running { ema, .. } = posterior {
            self.ema = ema;
        }
        self.instances[i].posterior = b.posterior.clone();
        let rec = StepRecord {
            phase: 'A',
            epoch,
            step: self.step_a,
            instance: self.examples[i].id.clone(),
            loss: b.total,
            losses: Some(b),
        };
        self.step_a += 1;
        Ok(rec)
    }

    /// One phase-B step: camera decoder regression for the next instance.
    pub fn step_phase_b(&mut self) -> Result<StepRecord> {
        let (epoch, i) = self.schedule(self.step_b);
        let target = self.instances[i].best();
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape, Model::is_camera_param);
        let pose = self
            .predict_pose_var(&mut tape, &binding, i)
            .map_err(|e| at_step(self.step_b, &self.examples[i].id, e))?;
        let loss = ops::pose_regression(&mut tape, pose, &target)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical {
                step: self.step_b,
                instance: self.examples[i].id.clone(),
                detail: format!("camera regression loss is {value}"),
            });
        }
        let grads = tape.backward(loss)?;
        self.params.accumulate(&binding, &grads);
        let fail = |e: Error| numerical(self.step_b, &self.examples[i].id, e);
        self.params.adam_step(&self.config.camera_adam).map_err(fail)?;
        check_finite(&self.params).map_err(fail)?;
        let rec = StepRecord {
            phase: 'B',
            epoch,
            step: self.step_b,
            instance: self.examples[i].id.clone(),
            losses: None,
            loss: value,
        };
        self.step_b += 1;
        Ok(rec)
    }

    fn predict_pose_var(&self, tape: &mut Tape, binding: &Binding, i: usize) -> Result<Var> {
        let image = tape.constant(self.examples[i].target.image.clone());
        let enc = self.model.encode(tape, binding, image)?;
        self.model.decode_camera(tape, binding, enc.latent)
    }

    /// Camera decoder prediction for training instance `i`.
    pub fn predicted_pose(&self, i: usize) -> Result<CameraPose> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape, |_| false);
        let v = self.predict_pose_var(&mut tape, &binding, i)?;
        Ok(CameraPose::from_params(tape.value(v).data()))
    }

    /// Phase-A objective of every instance at the current parameters,
    /// without updating anything. The posterior temperature comes from the
    /// current running mean, or from each instance's own mean loss before
    /// the first step.
    pub fn dataset_loss(&self) -> Result<Vec<LossBreakdown>> {
        (0..self.examples.len())
            .map(|i| {
                let mut p = self.running_posterior();
                let fwd = self.forward_a(&self.params, &self.instances[i].poses, i, &mut p, |_| false)?;
                Ok(fwd.breakdown)
            })
            .collect()
    }

    /// Runs the remaining steps of both phases, passing every record to `log`.
    pub fn run(&mut self, mut log: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        while self.step_a < self.phase_a_total_steps() {
            let r = self.step_phase_a()?;
            log(&r)?;
        }
        while self.step_b < self.phase_b_total_steps() {
            let r = self.step_phase_b()?;
            log(&r)?;
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.step_a >= self.phase_a_total_steps() && self.step_b >= self.phase_b_total_steps()
    }

    /// Snapshot sufficient to resume bit-exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "config": self.config,
            "step_a": self.step_a,
            "step_b": self.step_b,
            "ema": self.ema,
            "instances": self.instances.iter().map(|s| serde_json::json!({
                "id": s.id,
                "posterior": s.posterior,
            })).collect::<Vec<_>>(),
        });
        let mut stores = vec![(MODEL_STORE.to_string(), self.params.clone())];
        for s in &self.instances {
            stores.push((format!("{POSES}/{}", s.id), s.poses.clone()));
        }
        Checkpoint { meta, stores }
    }

    /// Restores a trainer from `ckpt` over the same examples.
    pub fn resume(ckpt: &Checkpoint, examples: Vec<Example>) -> Result<Self> {
        let meta = Meta::parse(ckpt)?;
        let mut t = Self::new(meta.config, examples)?;
        t.params = restore_model(&t.model, ckpt)?;
        if meta.instances.len() != t.instances.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} instances, dataset has {}",
                meta.instances.len(),
                t.instances.len()
            )));
        }
        for (s, m) in t.instances.iter_mut().zip(meta.instances) {
            if s.id != m.id || m.posterior.len() != t.config.cameras {
                return Err(Error::Incompatible(format!("instance {} does not match checkpoint entry {}", s.id, m.id)));
            }
            let poses = ckpt.store(&format!("{POSES}/{}", s.id))?;
            if poses.param(POSES).ok().map(|p| p.value.shape()) != s.poses.param(POSES).ok().map(|p| p.value.shape()) {
                return Err(Error::Incompatible(format!("multiplex of {} has the wrong shape", s.id)));
            }
            s.poses = poses.clone();
            s.posterior = m.posterior;
        }
        t.ema = meta.ema;
        t.step_a = meta.step_a;
        t.step_b = meta.step_b;
        Ok(t)
    }
}

/// Output of [`Trainer::forward_a`].
pub struct PhaseAForward {
    pub tape: Tape,
    pub binding: Binding,
    pub pose_binding: Binding,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

#[derive(Deserialize)]
struct InstanceMeta {
    id: String,
    posterior: Vec<f64>,
}

#[derive(Deserialize)]
struct Meta {
    kind: String,
    config: TrainConfig,
    step_a: usize,
    step_b: usize,
    ema: Ema,
    instances: Vec<InstanceMeta>,
}

impl Meta {
    fn parse(ckpt: &Checkpoint) -> Result<Self> {
        let meta: Meta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Incompatible(format!("checkpoint metadata: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Incompatible(format!("expected a training checkpoint, found `{}`", meta.kind)));
        }
        Ok(meta)
    }
}

/// Model configuration stored in a training checkpoint.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<TrainConfig> {
    Ok(Meta::parse(ckpt)?.config)
}

/// Validates the model store of `ckpt` against `model`'s parameter layout.
pub fn restore_model(model: &Model, ckpt: &Checkpoint) -> Result<ParamStore> {
    let fresh = model.init_params(0)?;
    let stored = ckpt.store(MODEL_STORE)?;
    let names: Vec<&str> = fresh.names().collect();
    let stored_names: Vec<&str> = stored.names().collect();
    if names != stored_names {
        return Err(Error::Incompatible("model parameters differ from the configured architecture".into()));
    }
    for p in fresh.iter() {
        let s = stored.param(&p.name)?;
        if s.value.shape() != p.value.shape() {
            return Err(Error::Incompatible(format!(
                "parameter {} has shape {:?}, expected {:?}",
                p.name,
                s.value.shape(),
                p.value.shape()
            )));
        }
    }
    Ok(stored.clone())
}

fn check_examples(config: &TrainConfig, examples: &[Example]) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::DataValidation("no training instances".into()));
    }
    let n = config.model.image_size;
    for e in examples {
        if e.target.size() != (n, n) {
            return Err(Error::DataValidation(format!(
                "instance {} is {:?}, the model expects {n}x{n}",
                e.id,
                e.target.size()
            )));
        }
        if e.label >= config.model.num_classes {
            return Err(Error::DataValidation(format!(
                "instance {} has label {} but the model has {} classes",
                e.id, e.label, config.model.num_classes
            )));
        }
    }
    let mut ids: Vec<&str> = examples.iter().map(|e| e.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::DataValidation("instance ids are not unique".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::renderer::RasterConfig;
    use crate::synth::dataset::{generate, Dataset};
    use crate::synth::SynthSpec;

    fn micro_examples() -> Vec<Example> {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            num_classes: 3,
            train_per_class: 1,
            test_per_class: 1,
            mesh_level: 1,
            image_size: 8,
            ..SynthSpec::default()
        };
        generate(&spec, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        ds.load("train").unwrap().iter().map(|r| Example::from_record(r).unwrap()).collect()
    }

    fn micro_config(cameras: usize) -> TrainConfig {
        TrainConfig {
            cameras,
            max_steps: Some(6),
            phase_b_epochs: 1,
            model: ModelConfig::micro(),
            render: RasterConfig::with_size(8, 8),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn divergence_reports_the_step() {
        let mut cfg = micro_config(2);
        cfg.adam.lr = 1e300;
        let mut t = Trainer::new(cfg, micro_examples()).unwrap();
        let err = t.run(|_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }), "{err}");
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn resume_is_bit_exact() {
        let ex = micro_examples();
        let mut full = Trainer::new(micro_config(2), ex.clone()).unwrap();
        let mut log_full = Vec::new();
        full.run(|r| Ok(log_full.push(r.clone()))).unwrap();
        assert!(full.is_complete());

        let mut part = Trainer::new(micro_config(2), ex.clone()).unwrap();
        let mut log = Vec::new();
        for _ in 0..4 {
            log.push(part.step_phase_a().unwrap());
        }
        let bytes = part.checkpoint().to_bytes().unwrap();
        let mut resumed = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), ex).unwrap();
        resumed.run(|r| Ok(log.push(r.clone()))).unwrap();
        assert_eq!(log, log_full);
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.instances, full.instances);
        assert_eq!(resumed.ema, full.ema);
    }

    #[test]
    fn resume_rejects_other_examples() {
        let ex = micro_examples();
        let t = Trainer::new(micro_config(2), ex.clone()).unwrap();
        let ckpt = t.checkpoint();
        assert!(matches!(Trainer::resume(&ckpt, ex[..2].to_vec()), Err(Error::Incompatible(_))));
    }

    #[test]
    fn phase_a_reaches_every_non_camera_parameter() {
        let t = Trainer::new(micro_config(2), micro_examples()).unwrap();
        let mut post = t.running_posterior();
        let fwd = t.forward_a(&t.params, &t.instances[0].poses, 0, &mut post, |n| !Model::is_camera_param(n)).unwrap();
        let grads = fwd.tape.backward(fwd.total).unwrap();
        let mut params = t.params.clone();
        params.accumulate(&fwd.binding, &grads);
        for p in params.iter() {
            assert_eq!(p.grad.is_some(), !Model::is_camera_param(&p.name), "{}", p.name);
        }
        let mut poses = t.instances[0].poses.clone();
        poses.accumulate(&fwd.pose_binding, &grads);
        assert!(poses.param(POSES).unwrap().grad.as_ref().is_some_and(|g| g.max_abs() > 0.0));
    }

    #[test]
    fn steps_touch_only_their_own_multiplex() {
        let mut t = Trainer::new(micro_config(2), micro_examples()).unwrap();
        let before = t.instances.clone();
        let rec = t.step_phase_a().unwrap();
        for (a, b) in before.iter().zip(&t.instances) {
            assert_eq!(a.poses != b.poses, a.id == rec.instance, "{}", a.id);
        }
    }

    #[test]
    fn phase_b_moves_only_the_camera_decoder() {
        let mut cfg = micro_config(2);
        cfg.max_steps = Some(0);
        let mut t = Trainer::new(cfg, micro_examples()).unwrap();
        let before = t.params.clone();
        t.step_phase_b().unwrap();
        for (a, b) in before.iter().zip(t.params.iter()) {
            assert_eq!(a.value != b.value, Model::is_camera_param(&a.name), "{}", a.name);
        }
    }

    #[test]
    fn single_camera_has_unit_posterior() {
        let mut t = Trainer::new(micro_config(1), micro_examples()).unwrap();
        let rec = t.step_phase_a().unwrap();
        assert_eq!(rec.losses.unwrap().posterior, vec![1.0]);
    }
}
