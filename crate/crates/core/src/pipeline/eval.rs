//! Classification accuracy, mask IoU and keypoint-transfer PCK.

use serde::{Deserialize, Serialize};

use super::mask_iou;
use crate::camera::{self, CameraPose};
use crate::error::{Error, Result};
use crate::model::nets::{Model, Template};
use crate::model::params::ParamStore;
use crate::model::tape::Tape;
use crate::par;
use crate::renderer::RasterConfig;
use crate::synth::{self, ndc_to_pixel, oracle, Record};
use crate::tensor::Tensor;

/// What a model says about one record.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub label: usize,
    pub vertices: Tensor,
    pub camera: CameraPose,
}

pub trait Predictor: Sync {
    fn faces(&self) -> &[[usize; 3]];
    fn predict(&self, record: &Record) -> Result<Prediction>;
}

/// Trained networks; the camera comes from the camera decoder.
pub struct ModelPredictor {
    pub model: Model,
    pub params: ParamStore,
}

impl Predictor for ModelPredictor {
    fn faces(&self) -> &[[usize; 3]] {
        &self.model.template.faces
    }

    fn predict(&self, record: &Record) -> Result<Prediction> {
        let m = &self.model;
        m.check_image(&record.image)
            .map_err(|e| Error::DataValidation(format!("{}: {e}", record.id)))?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, |_| false);
        let x = tape.constant(record.image.clone());
        let enc = m.encode(&mut tape, &b, x)?;
        let shape = m.decode_shape(&mut tape, &b, enc.latent)?;
        let flow = m.decode_flow(&mut tape, &b, enc.latent)?;
        let rec = m.recognize(&mut tape, &b, enc.features, flow, shape.deform)?;
        let pose = m.decode_camera(&mut tape, &b, enc.latent)?;
        let logits = tape.value(rec.logits).data();
        let label = crate::losses::best_hypothesis(logits);
        Ok(Prediction {
            label,
            vertices: tape.value(shape.vertices).clone(),
            camera: CameraPose::from_params(tape.value(pose).data()),
        })
    }
}

/// Answers with the ground truth stored in each record.
pub struct GtOracle {
    template: Template,
}

impl GtOracle {
    pub fn new(mesh_level: u32) -> Result<Self> {
        Ok(Self {
            template: Template::new(mesh_level)?,
        })
    }
}

impl Predictor for GtOracle {
    fn faces(&self) -> &[[usize; 3]] {
        &self.template.faces
    }

    fn predict(&self, record: &Record) -> Result<Prediction> {
        Ok(Prediction {
            label: record.label,
            vertices: synth::gt_vertices(&self.template, &record.deform)?,
            camera: record.camera,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_records: usize,
    pub accuracy: f64,
    pub mean_iou: f64,
    /// `None` when keypoints are unavailable.
    pub pck: Option<f64>,
    pub pck_alpha: f64,
    /// Keypoint transfers scored for PCK.
    pub pck_count: usize,
    pub rows: Vec<InstanceRow>,
}

/// Default PCK threshold as a fraction of the image diagonal.
pub const PCK_ALPHA: f64 = 0.1;

/// Per-record projection in pixel coordinates plus vertex visibility.
struct Projected {
    pixels: Vec<[f64; 2]>,
    visible: Vec<bool>,
    mask: Tensor,
}

fn project_prediction(pred: &Prediction, faces: &[[usize; 3]], h: usize, w: usize) -> Result<Projected> {
    let proj = camera::project(&pred.camera, &pred.vertices)?;
    let hr = oracle::hard_rasterize(&proj, faces, None, &RasterConfig::with_size(h, w));
    let visible = synth::vertex_visibility(&proj, &hr);
    let pixels = proj.data().chunks_exact(3).map(|p| ndc_to_pixel(p[0], p[1], h, w)).collect();
    Ok(Projected {
        pixels,
        visible,
        mask: hr.mask,
    })
}

/// Transfers a source keypoint through the nearest visible source vertex
/// (ties go to the lowest index) to that vertex's target position.
pub fn transfer_keypoint(
    src_pixels: &[[f64; 2]],
    src_visible: &[bool],
    tgt_pixels: &[[f64; 2]],
    kp: [f64; 2],
) -> Option<[f64; 2]> {
    let mut best: Option<(f64, usize)> = None;
    for (i, (p, &vis)) in src_pixels.iter().zip(src_visible).enumerate() {
        if !vis {
            continue;
        }
        let d = (p[0] - kp[0]).powi(2) + (p[1] - kp[1]).powi(2);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| tgt_pixels[i])
}

/// Evaluates `predictor` on `records`. PCK is computed over all ordered
/// pairs of distinct records, for keypoints visible in both.
pub fn evaluate(predictor: &dyn Predictor, records: &[Record], alpha: f64) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::DataValidation("nothing to evaluate".into()));
    }
    let (h, w) = (records[0].mask.shape()[0], records[0].mask.shape()[1]);
    let projected: Vec<(Prediction, Projected)> = par::map_slice(records, |r| -> Result<_> {
        if r.mask.shape() != [h, w] {
            return Err(Error::DataValidation(format!("{}: inconsistent mask size", r.id)));
        }
        let pred = predictor.predict(r)?;
        let proj = project_prediction(&pred, predictor.faces(), h, w)?;
        Ok((pred, proj))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let rows: Vec<InstanceRow> = records
        .iter()
        .zip(&projected)
        .map(|(r, (pred, proj))| InstanceRow {
            id: r.id.clone(),
            label: r.label,
            predicted: pred.label,
            iou: mask_iou(&proj.mask, &r.mask),
        })
        .collect();
    let n = records.len() as f64;
    let accuracy = rows.iter().filter(|r| r.label == r.predicted).count() as f64 / n;
    let mean_iou = rows.iter().map(|r| r.iou).sum::<f64>() / n;

    let has_keypoints = records.iter().all(|r| !r.keypoints.is_empty());
    let (pck, pck_count) = if !has_keypoints {
        log::warn!("records without keypoint annotations; skipping PCK");
        (None, 0)
    } else {
        let thresh = alpha * ((h * h + w * w) as f64).sqrt();
        let per_source: Vec<(usize, usize)> = par::map_range(records.len(), |s| {
            let (mut hit, mut count) = (0, 0);
            for t in 0..records.len() {
                if s == t {
                    continue;
                }
                for (ks, kt) in records[s].keypoints.iter().zip(&records[t].keypoints) {
                    if !(ks.visible && kt.visible) {
                        continue;
                    }
                    count += 1;
                    let (ps, pt) = (&projected[s].1, &projected[t].1);
                    if let Some(p) = transfer_keypoint(&ps.pixels, &ps.visible, &pt.pixels, [ks.x, ks.y]) {
                        if ((p[0] - kt.x).powi(2) + (p[1] - kt.y).powi(2)).sqrt() <= thresh {
                            hit += 1;
                        }
                    }
                }
            }
            (hit, count)
        });
        let (hit, count) = per_source.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        if count == 0 {
            log::warn!("no keypoint is visible in any pair; skipping PCK");
            (None, 0)
        } else {
            (Some(hit as f64 / count as f64), count)
        }
    };
    Ok(EvalReport {
        num_records: records.len(),
        accuracy,
        mean_iou,
        pck,
        pck_alpha: alpha,
        pck_count,
        rows,
    })
}
