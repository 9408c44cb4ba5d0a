//! Fitting shape, texture flow and a camera multiplex to a single image.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{camera_terms, mask_iou, objective, FitConfig, Posterior, Target};
use crate::camera::{self, CameraMultiplex, CameraPose};
use crate::error::{Error, Result};
use crate::losses::{best_hypothesis, Ema};
use crate::model::nets::Template;
use crate::model::ops::{self, Activation};
use crate::model::params::ParamStore;
use crate::model::tape::Tape;
use crate::renderer::RasterConfig;
use crate::synth::oracle;
use crate::tensor::Tensor;
use crate::warp;

const DEFORM: &str = "deform";
const FLOW: &str = "flow";

fn pose_name(m: usize) -> String {
    format!("pose.{m}")
}

/// One optimization step of [`fit_single`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitStep {
    pub step: usize,
    /// Render side length used at this step.
    pub size: usize,
    pub total: f64,
    /// Over all hypotheses; pruned ones are zero.
    pub posterior: Vec<f64>,
    /// Silhouette plus pixel loss per hypothesis; `None` once pruned.
    pub camera_losses: Vec<Option<f64>>,
    /// Hard-raster IoU of the best camera, on check steps.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Free rows of the fitted deformation `[F, 3]`, relative to the template.
    pub deform: Tensor,
    /// Full vertex positions `[V, 3]`.
    pub vertices: Tensor,
    pub faces: Arc<Vec<[usize; 3]>>,
    /// Per-face colors `[F, 3]` sampled through the fitted flow.
    pub face_colors: Tensor,
    /// Appearance flow `[H, W, 2]` in `[-1, 1]`.
    pub flow: Tensor,
    /// Canonical texture `[H, W, 3]`.
    pub texture: Tensor,
    pub multiplex: CameraMultiplex,
    pub posterior: Vec<f64>,
    pub best: usize,
    /// Hard-raster IoU of the best camera at full resolution.
    pub iou: f64,
    pub steps_run: usize,
    pub curve: Vec<FitStep>,
}

impl FitResult {
    pub fn best_camera(&self) -> &CameraPose {
        &self.multiplex.hypotheses[self.best]
    }

    /// Hard-rasterized view of the fitted mesh through `pose`.
    pub fn render(&self, pose: &CameraPose, cfg: &RasterConfig) -> Result<oracle::HardRender> {
        let proj = camera::project(pose, &self.vertices)?;
        Ok(oracle::hard_rasterize(&proj, &self.faces, Some(&self.face_colors), cfg))
    }
}

fn hard_iou(pose: &CameraPose, vertices: &Tensor, faces: &[[usize; 3]], mask: &Tensor, cfg: &RasterConfig) -> Result<f64> {
    let proj = camera::project(pose, vertices)?;
    Ok(mask_iou(&oracle::hard_rasterize(&proj, faces, None, cfg).mask, mask))
}

/// Fits a symmetric deformation of `template_free` (free rows of the mean
/// shape; the scaled icosphere when `None`), a texture flow and `cfg.cameras`
/// camera hypotheses to `target`.
///
/// The first `cfg.coarse_steps` steps render at `cfg.coarse_size` with every
/// hypothesis (and, with `cfg.coarse_rigid`, the template shape); afterwards
/// only the `cfg.keep` most probable remain.
pub fn fit_single(target: &Target, template_free: Option<&Tensor>, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let (h, w) = target.size();
    if (cfg.render.height, cfg.render.width) != (h, w) {
        return Err(Error::Config(format!(
            "render size {}x{} does not match the {h}x{w} target",
            cfg.render.height, cfg.render.width
        )));
    }
    let template = Template::new(cfg.mesh_level)?;
    let base_free = match template_free {
        Some(t) => {
            t.expect_shape("fit template", &[template.num_free(), 3])?;
            t.clone()
        }
        None => template
            .symmetry
            .restrict(&template.mesh.vertex_tensor().scale(crate::mesh::TEMPLATE_SCALE))?,
    };
    let base = template.symmetry.expand(&base_free)?;

    let [ch, cw] = cfg.canonical;
    let prior = warp::identity_grid(ch, cw).scale(cfg.flow_prior);
    let raw_flow = Tensor::new(prior.shape(), prior.data().iter().map(|v| v.atanh()).collect())?;
    let mut deform_store = ParamStore::new();
    deform_store.insert(DEFORM, Tensor::zeros(&[template.num_free(), 3]))?;
    let mut flow_store = ParamStore::new();
    flow_store.insert(FLOW, raw_flow)?;
    let rig = CameraMultiplex::init(cfg.cameras, cfg.seed, cfg.rig_jitter_deg)?;
    let mut pose_store = ParamStore::new();
    for (m, p) in rig.hypotheses.iter().enumerate() {
        pose_store.insert(pose_name(m), Tensor::from_vec(p.to_params().to_vec()))?;
    }

    let coarse = if cfg.coarse_steps > 0 {
        let k = h / cfg.coarse_size;
        Some((
            target.downsample(k)?,
            RasterConfig {
                height: h / k,
                width: w / k,
                ..cfg.render.clone()
            },
        ))
    } else {
        None
    };

    let mut ema = Ema::new(cfg.posterior_decay);
    let mut active: Vec<usize> = (0..cfg.cameras).collect();
    let mut posterior = vec![1.0 / cfg.cameras as f64; cfg.cameras];
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut steps_run = 0;

    for step in 0..cfg.steps {
        let in_coarse = step < cfg.coarse_steps;
        if step == cfg.coarse_steps && step > 0 && cfg.keep > 0 && cfg.keep < active.len() {
            let mut order = active.clone();
            // Stable sort keeps the lower index first among equal posteriors.
            order.sort_by(|&a, &b| posterior[b].total_cmp(&posterior[a]));
            order.truncate(cfg.keep);
            order.sort_unstable();
            active = order;
            log::debug!("fit: keeping hypotheses {active:?}");
        }
        let (tgt, rcfg) = match (&coarse, in_coarse) {
            (Some((t, r)), true) => (t, r),
            _ => (target, &cfg.render),
        };

        let mut tape = Tape::new();
        let rigid = in_coarse && cfg.coarse_rigid;
        let db = deform_store.bind(&mut tape, |_| !rigid);
        let fb = flow_store.bind(&mut tape, |_| true);
        let pb = pose_store.bind(&mut tape, |n| active.iter().any(|&m| pose_name(m) == n));
        let free = db.var(DEFORM)?;
        let deform = ops::expand_symmetric(&mut tape, free, &template.symmetry)?;
        let mean = tape.constant(base.clone());
        let vertices = ops::add(&mut tape, mean, deform)?;
        let raw = fb.var(FLOW)?;
        let flow = ops::activation(&mut tape, raw, Activation::Tanh);
        let image = tape.constant(target.image.clone());
        let tex = ops::bilinear_sample(&mut tape, image, flow)?;
        let vc = ops::sample_vertex_colors(&mut tape, tex, &template.uv)?;
        let fc = ops::face_average(&mut tape, vc, &template.faces)?;
        let poses = active
            .iter()
            .map(|&m| Ok((pb.var(&pose_name(m))?, 0)))
            .collect::<Result<Vec<_>>>()?;
        let mut cams = camera_terms(&mut tape, &poses, vertices, fc, &template.faces, rcfg, tgt)?;
        if in_coarse && cfg.coarse_silhouette {
            let zero = tape.constant(Tensor::scalar(0.0));
            cams.iter_mut().for_each(|c| c.1 = zero);
        }
        let smooth = ops::smoothness(&mut tape, vertices, &template.laplacian)?;
        let reg = ops::deformation_reg(&mut tape, deform);
        let mut post = Posterior::Running {
            ema,
            scale: cfg.weights.posterior_scale,
        };
        let (total, b) = objective(&mut tape, &cams, &mut post, smooth, reg, None, &cfg.weights)?;
        if !b.total.is_finite() {
            return Err(Error::Numerical {
                step,
                instance: "fit".into(),
                detail: format!("total loss is {}", b.total),
            });
        }
        let grads = tape.backward(total)?;
        deform_store.accumulate(&db, &grads);
        flow_store.accumulate(&fb, &grads);
        pose_store.accumulate(&pb, &grads);
        let fail = |detail: String| Error::Numerical {
            step,
            instance: "fit".into(),
            detail,
        };
        if !rigid {
            deform_store.adam_step(&cfg.shape_adam).map_err(|e| fail(e.to_string()))?;
        }
        flow_store.adam_step(&cfg.flow_adam).map_err(|e| fail(e.to_string()))?;
        pose_store.adam_step(&cfg.pose_adam).map_err(|e| fail(e.to_string()))?;
        for store in [&deform_store, &flow_store, &pose_store] {
            if let Some(name) = store.first_non_finite() {
                return Err(fail(format!("parameter `{name}` became non-finite")));
            }
        }
        if let Posterior::Running { ema: e, .. } = post {
            ema = e;
        }
        posterior = vec![0.0; cfg.cameras];
        let mut camera_losses = vec![None; cfg.cameras];
        for ((&m, &p), l) in active.iter().zip(&b.posterior).zip(b.camera_losses()) {
            posterior[m] = p;
            camera_losses[m] = Some(l);
        }
        steps_run = step + 1;

        let last = step + 1 == cfg.steps;
        let check = cfg.check_every > 0 && (step + 1) % cfg.check_every == 0;
        let iou = if (check && !in_coarse) || last {
            let mut verts = template.symmetry.expand(deform_store.get(DEFORM)?)?;
            verts.add_assign(&base);
            let best = best_hypothesis(&posterior);
            let pose = CameraPose::from_params(pose_store.get(&pose_name(best))?.data());
            Some(hard_iou(&pose, &verts, &template.faces, &target.mask.mask, &cfg.render)?)
        } else {
            None
        };
        curve.push(FitStep {
            step,
            size: rcfg.height,
            total: b.total,
            posterior: posterior.clone(),
            camera_losses,
            iou,
        });
        if let (Some(i), Some(stop)) = (iou, cfg.stop_iou) {
            if i >= stop {
                log::debug!("fit: IoU {i:.4} reached at step {step}");
                break;
            }
        }
    }

    let deform = deform_store.get(DEFORM)?.clone();
    let mut vertices = template.symmetry.expand(&deform)?;
    vertices.add_assign(&base);
    let flow_raw = flow_store.get(FLOW)?;
    let flow = Tensor::new(flow_raw.shape(), flow_raw.data().iter().map(|v| v.tanh()).collect())?;
    let texture = warp::build_texture(&target.image, &flow)?;
    let vc = warp::sample_vertex_colors(&texture, &template.uv)?;
    let face_colors = warp::face_average(&vc, &template.faces)?;
    let multiplex = CameraMultiplex {
        hypotheses: (0..cfg.cameras)
            .map(|m| Ok(CameraPose::from_params(pose_store.get(&pose_name(m))?.data())))
            .collect::<Result<_>>()?,
    };
    let best = best_hypothesis(&posterior);
    let iou = hard_iou(&multiplex.hypotheses[best], &vertices, &template.faces, &target.mask.mask, &cfg.render)?;
    Ok(FitResult {
        deform,
        vertices,
        faces: template.faces.clone(),
        face_colors,
        flow,
        texture,
        multiplex,
        posterior,
        best,
        iou,
        steps_run,
        curve,
    })
}
