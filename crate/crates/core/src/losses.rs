//! Training objectives and their gradients.

use serde::{Deserialize, Serialize};

use crate::camera::{normalize_quaternion, normalize_quaternion_vjp, CameraPose, POSE_DIM};
use crate::error::{Error, Result};
use crate::kernels;
use crate::mesh::Laplacian;
use crate::tensor::Tensor;

fn hw(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(Error::shape(op, &[0, 0], t.shape())),
    }
}

const DT_INF: f64 = 1e20;

/// 1D squared-distance transform of a sampled function (lower envelope of
/// parabolas rooted at each sample).
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |i: usize| (i * i) as f64;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * q as f64 - 2.0 * p as f64);
            // z[0] is -inf, so this never underflows k.
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance (in pixels) from every pixel to the nearest
/// foreground pixel (`> 0.5`). An all-background mask yields `H + W`.
pub fn distance_transform(mask: &Tensor) -> Result<Tensor> {
    let (h, w) = hw("distance_transform", mask)?;
    if !mask.data().iter().any(|&m| m > 0.5) {
        return Ok(Tensor::filled(&[h, w], (h + w) as f64));
    }
    let n = h.max(w);
    let mut grid: Vec<f64> = mask.data().iter().map(|&m| if m > 0.5 { 0.0 } else { DT_INF }).collect();
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        dt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        dt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    Tensor::new(&[h, w], grid.into_iter().map(f64::sqrt).collect())
}

/// Ground-truth mask with its distance transform, computed once per instance.
#[derive(Clone, Debug)]
pub struct MaskTarget {
    pub mask: Tensor,
    pub dt: Tensor,
}

impl MaskTarget {
    pub fn new(mask: Tensor) -> Result<Self> {
        let dt = distance_transform(&mask)?;
        Ok(Self { mask, dt })
    }
}

/// `mean((S - S̃)²) + mean(dt(S)·S̃)` and its gradient w.r.t. `S̃`.
pub fn mask_loss(target: &MaskTarget, rendered: &Tensor) -> Result<(f64, Tensor)> {
    let (h, w) = hw("mask_loss", &target.mask)?;
    rendered.expect_shape("mask_loss rendered", &[h, w])?;
    let inv = 1.0 / (h * w) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(h * w);
    for ((&s, &r), &d) in target.mask.data().iter().zip(rendered.data()).zip(target.dt.data()) {
        loss += (s - r) * (s - r) + d * r;
        grad.push((2.0 * (r - s) + d) * inv);
    }
    Ok((loss * inv, Tensor::new(&[h, w], grad)?))
}

/// A distance between a rendered and a real image restricted to a mask.
pub trait ImageDistance: Send + Sync {
    /// Value and gradient w.r.t. `rendered` (`[H, W, 3]`); `mask` is `[H, W]`.
    fn eval(&self, rendered: &Tensor, target: &Tensor, mask: &Tensor) -> Result<(f64, Tensor)>;
}

/// Masked mean absolute error averaged over an image pyramid of
/// `scales` levels (factors 1, 2, 4, ...). Each level is normalized by the
/// pooled mask mass so a constant offset `c` on the foreground costs `c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiScaleMae {
    pub scales: usize,
}

impl Default for MultiScaleMae {
    fn default() -> Self {
        Self { scales: 3 }
    }
}

fn masked(img: &Tensor, mask: &Tensor) -> Tensor {
    let k = img.shape()[2];
    let data = img
        .data()
        .chunks_exact(k)
        .zip(mask.data())
        .flat_map(|(px, &m)| px.iter().map(move |v| v * m))
        .collect();
    Tensor::new(img.shape(), data).expect("shape")
}

impl ImageDistance for MultiScaleMae {
    fn eval(&self, rendered: &Tensor, target: &Tensor, mask: &Tensor) -> Result<(f64, Tensor)> {
        let (h, w) = hw("pixel_loss mask", mask)?;
        rendered.expect_shape("pixel_loss rendered", &[h, w, 3])?;
        target.expect_shape("pixel_loss target", &[h, w, 3])?;
        let mut grad = Tensor::zeros(&[h, w, 3]);
        let mask3 = mask.clone().reshape(&[h, w, 1])?;
        let levels: Vec<usize> = (0..self.scales.max(1))
            .map(|s| 1usize << s)
            .filter(|&f| f <= h && f <= w)
            .collect();
        let r = masked(rendered, mask);
        let t = masked(target, mask);
        let mut loss = 0.0;
        for &f in &levels {
            let (rp, tp, mp) = if f == 1 {
                (r.clone(), t.clone(), mask3.clone())
            } else {
                (kernels::avg_pool(&r, f)?, kernels::avg_pool(&t, f)?, kernels::avg_pool(&mask3, f)?)
            };
            let mass = mp.sum();
            if mass <= 0.0 {
                continue;
            }
            let norm = 1.0 / (3.0 * mass * levels.len() as f64);
            let mut g = Tensor::zeros(rp.shape());
            for ((gv, a), b) in g.data_mut().iter_mut().zip(rp.data()).zip(tp.data()) {
                let d = a - b;
                loss += d.abs() * norm;
                *gv = if d > 0.0 {
                    norm
                } else if d < 0.0 {
                    -norm
                } else {
                    0.0
                };
            }
            let g = if f == 1 { g } else { kernels::avg_pool_backward(&[h, w, 3], f, &g) };
            grad.add_assign(&g);
        }
        Ok((loss, masked(&grad, mask)))
    }
}

/// `mean_i ‖(L V)_i‖²` and its gradient w.r.t. `V`.
pub fn smoothness(lap: &Laplacian, vertices: &Tensor) -> Result<(f64, Tensor)> {
    let lv = lap.apply(vertices)?;
    let n = vertices.shape()[0] as f64;
    let loss = lv.data().iter().map(|v| v * v).sum::<f64>() / n;
    let grad = lap.apply_transpose(&lv)?.scale(2.0 / n);
    Ok((loss, grad))
}

/// Mean of squared deformation entries and its gradient.
pub fn deformation_reg(deform: &Tensor) -> (f64, Tensor) {
    let n = deform.len().max(1) as f64;
    let loss = deform.data().iter().map(|v| v * v).sum::<f64>() / n;
    (loss, deform.clone().scale(2.0 / n))
}

/// Softmin posterior `p_m ∝ exp(-L_m / sigma)`.
pub fn camera_posterior(losses: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("camera posterior needs at least one loss".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("posterior temperature {sigma} must be positive")));
    }
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = losses.iter().map(|l| (-(l - min) / sigma).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Index of the most probable hypothesis; ties go to the lowest index.
pub fn best_hypothesis(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Exponential moving average used to set the posterior temperature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    pub value: Option<f64>,
    pub decay: f64,
}

impl Ema {
    pub fn new(decay: f64) -> Self {
        Self { value: None, decay }
    }

    pub fn update(&mut self, x: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * x,
        };
        self.value = Some(v);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub render: f64,
    pub smooth: f64,
    pub reg: f64,
    pub task: f64,
    /// Posterior temperature as a multiple of the running mean camera loss.
    pub posterior_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            render: 1.0,
            smooth: 0.1,
            reg: 0.05,
            task: 1.0,
            posterior_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `(mask, pixel)` per camera hypothesis.
    pub per_camera: Vec<(f64, f64)>,
    pub posterior: Vec<f64>,
    pub smooth: f64,
    pub reg: f64,
    pub task: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `Σ p_m L_m λ_render + λ_s smooth + λ_r reg + λ_t task`.
    pub fn combine(
        per_camera: Vec<(f64, f64)>,
        posterior: Vec<f64>,
        smooth: f64,
        reg: f64,
        task: f64,
        w: &LossWeights,
    ) -> Result<Self> {
        if per_camera.len() != posterior.len() {
            return Err(Error::InvalidArgument(format!(
                "{} camera losses but {} posterior entries",
                per_camera.len(),
                posterior.len()
            )));
        }
        let render: f64 = per_camera.iter().zip(&posterior).map(|((m, p), q)| q * (m + p)).sum();
        let total = w.render * render + w.smooth * smooth + w.reg * reg + w.task * task;
        Ok(Self {
            per_camera,
            posterior,
            smooth,
            reg,
            task,
            total,
        })
    }

    pub fn camera_losses(&self) -> Vec<f64> {
        self.per_camera.iter().map(|(m, p)| m + p).collect()
    }
}

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + z.ln();
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

/// `max(0, ‖a-p‖ - ‖a-n‖ + margin)` with gradients for `(a, p, n)`.
pub fn triplet(anchor: &[f64], pos: &[f64], neg: &[f64], margin: f64) -> Result<(f64, [Vec<f64>; 3])> {
    if anchor.len() != pos.len() || anchor.len() != neg.len() {
        return Err(Error::InvalidArgument("triplet inputs differ in length".into()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let (dp, dn) = (dist(anchor, pos), dist(anchor, neg));
    let loss = (dp - dn + margin).max(0.0);
    let n = anchor.len();
    let mut g = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    if loss > 0.0 {
        for i in 0..n {
            let up = if dp > 0.0 { (anchor[i] - pos[i]) / dp } else { 0.0 };
            let un = if dn > 0.0 { (anchor[i] - neg[i]) / dn } else { 0.0 };
            g[0][i] = up - un;
            g[1][i] = -up;
            g[2][i] = un;
        }
    }
    Ok((loss, g))
}

/// Camera regression loss `|log s - log s*| + ‖t - t*‖² + (1 - |⟨q̂, q̂*⟩|)`
/// on raw pose parameters `[log s, tx, ty, qw, qx, qy, qz]`, with its gradient.
pub fn pose_regression(pred: &[f64], target: &CameraPose) -> Result<(f64, [f64; POSE_DIM])> {
    if pred.len() != POSE_DIM {
        return Err(Error::InvalidArgument(format!("pose needs {POSE_DIM} numbers, got {}", pred.len())));
    }
    let q = [pred[3], pred[4], pred[5], pred[6]];
    let qh = normalize_quaternion(q)?;
    let qt = target.unit_rotation()?;
    let dot: f64 = (0..4).map(|i| qh[i] * qt[i]).sum();
    let ds = pred[0] - target.log_scale;
    let dt = [pred[1] - target.translation[0], pred[2] - target.translation[1]];
    let loss = ds.abs() + dt[0] * dt[0] + dt[1] * dt[1] + 1.0 - dot.abs();
    let sd = if dot > 0.0 {
        1.0
    } else if dot < 0.0 {
        -1.0
    } else {
        0.0
    };
    let gq = normalize_quaternion_vjp(q, [-sd * qt[0], -sd * qt[1], -sd * qt[2], -sd * qt[3]])?;
    let gs = if ds > 0.0 {
        1.0
    } else if ds < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok((loss, [gs, 2.0 * dt[0], 2.0 * dt[1], gq[0], gq[1], gq[2], gq[3]]))
}
