//! Training, single-image fitting and evaluation.

pub mod config;
pub mod eval;
pub mod fit;
pub mod train;

pub use config::{FitConfig, TrainConfig};
pub use eval::{evaluate, EvalReport, GtOracle, ModelPredictor, Prediction, Predictor, PCK_ALPHA};
pub use fit::{fit_single, FitResult, FitStep};
pub use train::{StepRecord, Trainer};

use crate::error::{Error, Result};
use crate::losses::{self, Ema, LossBreakdown, LossWeights, MaskTarget, MultiScaleMae};
use crate::model::ops;
use crate::model::tape::{Tape, Var};
use crate::renderer::RasterConfig;
use crate::tensor::Tensor;

/// An observed image with its mask and precomputed distance transform.
#[derive(Clone, Debug)]
pub struct Target {
    pub image: Tensor,
    pub mask: MaskTarget,
}

impl Target {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        crate::synth::dataset::check_pair(&image, &mask)?;
        Ok(Self {
            image,
            mask: MaskTarget::new(mask)?,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }

    /// Average-pools the image by `k`; the mask is pooled and binarized at
    /// one half. Pools that leave the mask empty keep the brightest cell.
    pub fn downsample(&self, k: usize) -> Result<Self> {
        if k == 1 {
            return Ok(self.clone());
        }
        let image = crate::kernels::avg_pool(&self.image, k)?;
        let (h, w) = self.size();
        let m = self.mask.mask.clone().reshape(&[h, w, 1])?;
        let pooled = crate::kernels::avg_pool(&m, k)?;
        let (ph, pw) = (pooled.shape()[0], pooled.shape()[1]);
        let mut bin: Vec<f64> = pooled.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        if bin.iter().all(|&v| v == 0.0) {
            let (i, _) = pooled
                .data()
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            bin[i] = 1.0;
        }
        Self::new(image, Tensor::new(&[ph, pw], bin)?)
    }
}

/// How the camera posterior is obtained for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Posterior {
    /// Softmin with temperature `scale · EMA(mean camera loss)`; the EMA is
    /// updated with this pass's losses.
    Running { ema: Ema, scale: f64 },
    /// A fixed distribution (used when differentiating numerically).
    Fixed(Vec<f64>),
}

impl Posterior {
    /// Posterior for `camera_losses`, updating the running state if any.
    pub fn resolve(&mut self, camera_losses: &[f64]) -> Result<Vec<f64>> {
        match self {
            Posterior::Fixed(p) => {
                if p.len() != camera_losses.len() {
                    return Err(Error::InvalidArgument(format!(
                        "fixed posterior has {} entries for {} cameras",
                        p.len(),
                        camera_losses.len()
                    )));
                }
                Ok(p.clone())
            }
            Posterior::Running { ema, scale } => {
                let mean = camera_losses.iter().sum::<f64>() / camera_losses.len() as f64;
                let sigma = (*scale * ema.update(mean)).max(1e-12);
                losses::camera_posterior(camera_losses, sigma)
            }
        }
    }
}

/// Per-camera `(mask, pixel)` loss variables for every pose in `poses`.
/// Each entry is `(pose tensor, row)`.
pub(crate) fn camera_terms(
    tape: &mut Tape,
    poses: &[(Var, usize)],
    vertices: Var,
    face_colors: Var,
    faces: &[[usize; 3]],
    cfg: &RasterConfig,
    target: &Target,
) -> Result<Vec<(Var, Var)>> {
    let dist = MultiScaleMae::default();
    poses
        .iter()
        .map(|&(pose, row)| {
            let proj = ops::project(tape, pose, row, vertices)?;
            let render = ops::render(tape, proj, face_colors, faces, cfg)?;
            let mask = ops::mask_loss(tape, render, &target.mask)?;
            let pixel = ops::pixel_loss(tape, render, &target.image, &target.mask.mask, &dist)?;
            Ok((mask, pixel))
        })
        .collect()
}

/// Assembles the weighted objective. The posterior enters as constant
/// coefficients.
pub(crate) fn objective(
    tape: &mut Tape,
    cams: &[(Var, Var)],
    posterior: &mut Posterior,
    smooth: Var,
    reg: Var,
    task: Option<Var>,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let per_camera: Vec<(f64, f64)> = cams
        .iter()
        .map(|&(m, p)| (tape.value(m).item(), tape.value(p).item()))
        .collect();
    let l: Vec<f64> = per_camera.iter().map(|(m, p)| m + p).collect();
    let p = posterior.resolve(&l)?;
    let mut terms = Vec::with_capacity(2 * cams.len() + 3);
    for (&(m, px), &pm) in cams.iter().zip(&p) {
        terms.push((m, w.render * pm));
        terms.push((px, w.render * pm));
    }
    terms.push((smooth, w.smooth));
    terms.push((reg, w.reg));
    if let Some(t) = task {
        terms.push((t, w.task));
    }
    let total = ops::weighted_sum(tape, &terms)?;
    let task_value = task.map_or(0.0, |t| tape.value(t).item());
    let mut b = LossBreakdown::combine(
        per_camera,
        p,
        tape.value(smooth).item(),
        tape.value(reg).item(),
        task_value,
        w,
    )?;
    // Report the value actually differentiated.
    b.total = tape.value(total).item();
    Ok((total, b))
}

/// Intersection over union of two binary masks; two empty masks give 1.
pub fn mask_iou(a: &Tensor, b: &Tensor) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += (x && y) as u8 as f64;
        union += (x || y) as u8 as f64;
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}
