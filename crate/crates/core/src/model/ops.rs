//! Differentiable operations recorded on a [`Tape`].

use std::sync::Arc;

use crate::camera::{self, CameraPose, POSE_DIM};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::losses::{self, ImageDistance, MaskTarget};
use crate::mesh::{Laplacian, SymmetryMap};
use crate::renderer::{self, RasterConfig, RenderOutput};
use crate::tensor::Tensor;
use crate::warp;

use super::tape::{Primitive, Tape, Var};

type Grads = Result<Vec<Option<Tensor>>>;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).expect("shape")
}

struct Add;

impl Primitive for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Grads {
        Ok(needs.iter().map(|&n| n.then(|| g.clone())).collect())
    }
}

/// Elementwise `a + b` (same shape).
pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (x, y) = (tape.value(a), tape.value(b));
    same_shape("add", x, y)?;
    let out = zip_map(x, y, |p, q| p + q);
    Ok(tape.push(Add, &[a, b], out))
}

struct WeightedSum(Vec<f64>);

impl Primitive for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Grads {
        Ok(inputs
            .iter()
            .zip(&self.0)
            .zip(needs)
            .map(|((x, &w), &n)| n.then(|| Tensor::filled(x.shape(), w * g.item())))
            .collect())
    }
}

/// `Σ w_i x_i` over scalars; the weights are constants.
pub fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Result<Var> {
    let mut total = 0.0;
    for &(v, w) in terms {
        let t = tape.value(v);
        if t.len() != 1 {
            return Err(Error::shape("weighted_sum", &[1], t.shape()));
        }
        total += w * t.item();
    }
    let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
    Ok(tape.push(WeightedSum(terms.iter().map(|t| t.1).collect()), &vars, Tensor::scalar(total)))
}

struct Scale(f64);

impl Primitive for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Grads {
        Ok(vec![Some(g.clone().scale(self.0))])
    }
}

pub fn scale(tape: &mut Tape, x: Var, k: f64) -> Var {
    let out = tape.value(x).clone().scale(k);
    tape.push(Scale(k), &[x], out)
}

struct Reshape;

impl Primitive for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Grads {
        Ok(vec![Some(g.clone().reshape(inputs[0].shape())?)])
    }
}

pub fn reshape(tape: &mut Tape, x: Var, shape: &[usize]) -> Result<Var> {
    let out = tape.value(x).clone().reshape(shape)?;
    Ok(tape.push(Reshape, &[x], out))
}

/// Pointwise activation.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

struct Act(Activation);

impl Primitive for Act {
    fn name(&self) -> &'static str {
        match self.0 {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::LeakyRelu(_) => "leaky_relu",
            Activation::Tanh => "tanh",
        }
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor, _: &[bool]) -> Grads {
        let x = inputs[0];
        let gx = match self.0 {
            Activation::Identity => g.clone(),
            Activation::Relu => zip_map(x, g, |x, g| if x > 0.0 { g } else { 0.0 }),
            Activation::LeakyRelu(s) => zip_map(x, g, |x, g| if x > 0.0 { g } else { s * g }),
            Activation::Tanh => zip_map(out, g, |y, g| (1.0 - y * y) * g),
        };
        Ok(vec![Some(gx)])
    }
}

pub fn activation(tape: &mut Tape, x: Var, act: Activation) -> Var {
    if act == Activation::Identity {
        return x;
    }
    let out = match act {
        Activation::Identity => unreachable!(),
        Activation::Relu => map(tape.value(x), |v| v.max(0.0)),
        Activation::LeakyRelu(s) => map(tape.value(x), |v| if v > 0.0 { v } else { s * v }),
        Activation::Tanh => map(tape.value(x), f64::tanh),
    };
    tape.push(Act(act), &[x], out)
}

struct Linear;

impl Primitive for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Grads {
        let (gx, gw, gb) = kernels::linear_backward(inputs[0], inputs[1], g, needs[0])?;
        Ok(vec![gx, needs[1].then_some(gw), needs[2].then_some(gb)])
    }
}

/// `W x + b` on a flattened input.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let out = kernels::linear(tape.value(x), tape.value(w), tape.value(b))?;
    Ok(tape.push(Linear, &[x, w, b], out))
}

struct Conv(ConvGeom);

impl Primitive for Conv {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Grads {
        let (gx, gw, gb) = kernels::conv2d_backward(inputs[0], inputs[1], self.0, g, needs[0])?;
        Ok(vec![gx, needs[1].then_some(gw), needs[2].then_some(gb)])
    }
}

pub fn conv2d(tape: &mut Tape, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
    let out = kernels::conv2d(tape.value(x), tape.value(w), tape.value(b), geom)?;
    Ok(tape.push(Conv(geom), &[x, w, b], out))
}

struct Upsample(usize);

impl Primitive for Upsample {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Grads {
        Ok(vec![Some(kernels::upsample_nearest_backward(inputs[0].shape(), self.0, g))])
    }
}

pub fn upsample_nearest(tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
    let out = kernels::upsample_nearest(tape.value(x), k)?;
    Ok(tape.push(Upsample(k), &[x], out))
}

struct AvgPool(usize);

impl Primitive for AvgPool {
    fn name(&self) -> &'static str {
        "avg_pool"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Grads {
        Ok(vec![Some(kernels::avg_pool_backward(inputs[0].shape(), self.0, g))])
    }
}

pub fn avg_pool(tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
    let out = kernels::avg_pool(tape.value(x), k)?;
    Ok(tape.push(AvgPool(k), &[x], out))
}

struct GlobalAvgPool;

impl Primitive for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Grads {
        Ok(vec![Some(kernels::global_avg_pool_backward(inputs[0].shape(), g))])
    }
}

pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let out = kernels::global_avg_pool(tape.value(x))?;
    Ok(tape.push(GlobalAvgPool, &[x], out))
}

struct ConcatChannels(usize);

impl Primitive for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Grads {
        let (ga, gb) = kernels::split_channels(g, self.0);
        Ok(vec![needs[0].then_some(ga), needs[1].then_some(gb)])
    }
}

pub fn concat_channels(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let ca = tape.value(a).shape().get(2).copied().unwrap_or(0);
    let out = kernels::concat_channels(tape.value(a), tape.value(b))?;
    Ok(tape.push(ConcatChannels(ca), &[a, b], out))
}

struct Concat;

impl Primitive for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Grads {
        let mut off = 0;
        Ok(inputs
            .iter()
            .zip(needs)
            .map(|(x, &n)| {
                let part = &g.data()[off..off + x.len()];
                off += x.len();
                n.then(|| Tensor::new(x.shape(), part.to_vec()).expect("shape"))
            })
            .collect())
    }
}

/// Flat concatenation into a 1D vector.
pub fn concat(tape: &mut Tape, parts: &[Var]) -> Var {
    let data: Vec<f64> = parts.iter().flat_map(|&v| tape.value(v).data().iter().copied()).collect();
    tape.push(Concat, parts, Tensor::from_vec(data))
}

struct Sample;

impl Primitive for Sample {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Grads {
        let (gs, gg) = warp::bilinear_sample_backward(inputs[0], inputs[1], g, needs[0], needs[1])?;
        Ok(vec![gs, gg])
    }
}

/// Bilinear resampling of `src: [H, W, K]` at `grid: [Hg, Wg, 2]`.
pub fn bilinear_sample(tape: &mut Tape, src: Var, grid: Var) -> Result<Var> {
    let out = warp::bilinear_sample(tape.value(src), tape.value(grid))?;
    Ok(tape.push(Sample, &[src, grid], out))
}

/// Per-vertex lookup into a texture at fixed chart coordinates `uv: [N, 2]`.
pub fn sample_vertex_colors(tape: &mut Tape, texture: Var, uv: &Tensor) -> Result<Var> {
    let n = uv.shape()[0];
    let k = tape.value(texture).shape()[2];
    let grid = tape.constant(uv.clone().reshape(&[n, 1, 2])?);
    let s = bilinear_sample(tape, texture, grid)?;
    reshape(tape, s, &[n, k])
}

struct FaceAverage(Arc<Vec<[usize; 3]>>);

impl Primitive for FaceAverage {
    fn name(&self) -> &'static str {
        "face_average"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Grads {
        Ok(vec![Some(warp::face_average_backward(inputs[0].shape()[0], &self.0, g))])
    }
}

pub fn face_average(tape: &mut Tape, vertex_colors: Var, faces: &Arc<Vec<[usize; 3]>>) -> Result<Var> {
    let out = warp::face_average(tape.value(vertex_colors), faces)?;
    Ok(tape.push(FaceAverage(faces.clone()), &[vertex_colors], out))
}

struct Expand(Arc<SymmetryMap>);

impl Primitive for Expand {
    fn name(&self) -> &'static str {
        "expand_symmetric"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Grads {
        Ok(vec![Some(self.0.expand_adjoint(g)?)])
    }
}

/// Mirror-symmetric expansion of free rows.
pub fn expand_symmetric(tape: &mut Tape, free: Var, map: &Arc<SymmetryMap>) -> Result<Var> {
    let out = map.expand(tape.value(free))?;
    Ok(tape.push(Expand(map.clone()), &[free], out))
}

struct Project {
    row: usize,
}

fn pose_row(poses: &Tensor, row: usize) -> Result<CameraPose> {
    let m = poses.len() / POSE_DIM;
    if poses.len() % POSE_DIM != 0 || row >= m {
        return Err(Error::InvalidArgument(format!(
            "pose row {row} out of range for tensor of shape {:?}",
            poses.shape()
        )));
    }
    Ok(CameraPose::from_params(&poses.data()[row * POSE_DIM..(row + 1) * POSE_DIM]))
}

impl Primitive for Project {
    fn name(&self) -> &'static str {
        "project"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Grads {
        let pose = pose_row(inputs[0], self.row)?;
        let (gp, gv) = camera::project_backward(&pose, inputs[1], g)?;
        let gposes = needs[0].then(|| {
            let mut t = Tensor::zeros(inputs[0].shape());
            t.data_mut()[self.row * POSE_DIM..(self.row + 1) * POSE_DIM].copy_from_slice(&gp);
            t
        });
        Ok(vec![gposes, needs[1].then_some(gv)])
    }
}

/// Weak-perspective projection of `vertices: [N, 3]` through row `row` of a
/// `[M, 7]` (or `[7]`) pose tensor; output rows are `(u, v, depth)`.
pub fn project(tape: &mut Tape, poses: Var, row: usize, vertices: Var) -> Result<Var> {
    let pose = pose_row(tape.value(poses), row)?;
    let out = camera::project(&pose, tape.value(vertices))?;
    Ok(tape.push(Project { row }, &[poses, vertices], out))
}

struct Render(RenderOutput);

impl Primitive for Render {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Grads {
        let (h, w) = (g.shape()[0], g.shape()[1]);
        let mut gc = Vec::with_capacity(h * w * 3);
        let mut gs = Vec::with_capacity(h * w);
        for px in g.data().chunks_exact(4) {
            gc.extend_from_slice(&px[..3]);
            gs.push(px[3]);
        }
        let gc = Tensor::new(&[h, w, 3], gc)?;
        let gs = Tensor::new(&[h, w], gs)?;
        let r = self.0.backward(Some(&gs), Some(&gc))?;
        Ok(vec![needs[0].then_some(r.proj), if needs[1] { r.face_colors } else { None }])
    }
}

/// Soft render of projected vertices with flat face colors. The output is
/// `[H, W, 4]`: color in channels 0..3 and the silhouette in channel 3.
pub fn render(tape: &mut Tape, proj: Var, face_colors: Var, faces: &[[usize; 3]], cfg: &RasterConfig) -> Result<Var> {
    let out = renderer::rasterize(tape.value(proj), faces, Some(tape.value(face_colors)), cfg)?;
    let color = out.color.as_ref().expect("color requested");
    let value = Tensor::new(
        &[cfg.height, cfg.width, 4],
        color
            .data()
            .chunks_exact(3)
            .zip(out.silhouette.data())
            .flat_map(|(c, &s)| [c[0], c[1], c[2], s])
            .collect(),
    )?;
    Ok(tape.push(Render(out), &[proj, face_colors], value))
}

/// Splits a `[H, W, 4]` render into `([H, W, 3] color, [H, W] silhouette)`.
pub fn split_render(render: &Tensor) -> (Tensor, Tensor) {
    let (h, w) = (render.shape()[0], render.shape()[1]);
    let (c, s) = kernels::split_channels(render, 3);
    (c, s.reshape(&[h, w]).expect("shape"))
}

fn join_render(gc: Option<&Tensor>, gs: Option<&Tensor>, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(&[h, w, 4]);
    for (i, px) in out.data_mut().chunks_exact_mut(4).enumerate() {
        if let Some(gc) = gc {
            px[..3].copy_from_slice(&gc.data()[i * 3..i * 3 + 3]);
        }
        if let Some(gs) = gs {
            px[3] = gs.data()[i];
        }
    }
    out
}

struct MaskLoss(Tensor);

impl Primitive for MaskLoss {
    fn name(&self) -> &'static str {
        "mask_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Grads {
        let (h, w) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        Ok(vec![Some(join_render(None, Some(&self.0.clone().scale(g.item())), h, w))])
    }
}

/// Silhouette loss against `target` on a `[H, W, 4]` render.
pub fn mask_loss(tape: &mut Tape, render: Var, target: &MaskTarget) -> Result<Var> {
    let (_, sil) = split_render(tape.value(render));
    let (l, g) = losses::mask_loss(target, &sil)?;
    Ok(tape.push(MaskLoss(g), &[render], Tensor::scalar(l)))
}

struct PixelLoss(Tensor);

impl Primitive for PixelLoss {
    fn name(&self) -> &'static str {
        "pixel_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Grads {
        let (h, w) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        Ok(vec![Some(join_render(Some(&self.0.clone().scale(g.item())), None, h, w))])
    }
}

/// Masked image distance between the color channels of a render and `image`.
pub fn pixel_loss(tape: &mut Tape, render: Var, image: &Tensor, mask: &Tensor, dist: &dyn ImageDistance) -> Result<Var> {
    let (color, _) = split_render(tape.value(render));
    let (l, g) = dist.eval(&color, image, mask)?;
    Ok(tape.push(PixelLoss(g), &[render], Tensor::scalar(l)))
}

/// Scalar loss whose gradient w.r.t. its single input was computed eagerly.
struct Precomputed(&'static str, Tensor);

impl Primitive for Precomputed {
    fn name(&self) -> &'static str {
        self.0
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Grads {
        Ok(vec![Some(self.1.clone().scale(g.item()))])
    }
}

pub fn smoothness(tape: &mut Tape, vertices: Var, lap: &Laplacian) -> Result<Var> {
    let (l, g) = losses::smoothness(lap, tape.value(vertices))?;
    Ok(tape.push(Precomputed("smoothness", g), &[vertices], Tensor::scalar(l)))
}

pub fn deformation_reg(tape: &mut Tape, deform: Var) -> Var {
    let (l, g) = losses::deformation_reg(tape.value(deform));
    tape.push(Precomputed("deformation_reg", g), &[deform], Tensor::scalar(l))
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let x = tape.value(logits);
    let (l, g) = losses::cross_entropy(x.data(), label)?;
    let g = Tensor::new(x.shape(), g)?;
    Ok(tape.push(Precomputed("cross_entropy", g), &[logits], Tensor::scalar(l)))
}

struct Triplet([Tensor; 3]);

impl Primitive for Triplet {
    fn name(&self) -> &'static str {
        "triplet"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Grads {
        Ok(self
            .0
            .iter()
            .zip(needs)
            .map(|(t, &n)| n.then(|| t.clone().scale(g.item())))
            .collect())
    }
}

pub fn triplet(tape: &mut Tape, anchor: Var, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let (a, p, n) = (tape.value(anchor), tape.value(pos), tape.value(neg));
    let (l, [ga, gp, gn]) = losses::triplet(a.data(), p.data(), n.data(), margin)?;
    let grads = [
        Tensor::new(a.shape(), ga)?,
        Tensor::new(p.shape(), gp)?,
        Tensor::new(n.shape(), gn)?,
    ];
    Ok(tape.push(Triplet(grads), &[anchor, pos, neg], Tensor::scalar(l)))
}

pub fn pose_regression(tape: &mut Tape, pose: Var, target: &CameraPose) -> Result<Var> {
    let p = tape.value(pose);
    let (l, g) = losses::pose_regression(p.data(), target)?;
    let g = Tensor::new(p.shape(), g.to_vec())?;
    Ok(tape.push(Precomputed("pose_regression", g), &[pose], Tensor::scalar(l)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;
    use crate::synth::oracle::{finite_difference, relative_error};
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Checks the tape gradient of `f` against central differences for each input.
    fn check(inputs: &[Tensor], h: f64, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        for (k, x) in inputs.iter().enumerate() {
            let fd = finite_difference(
                |d| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, v)| {
                            t.constant(if j == k { Tensor::new(v.shape(), d.to_vec()).unwrap() } else { v.clone() })
                        })
                        .collect();
                    let o = f(&mut t, &vs);
                    t.value(o).item()
                },
                x.data(),
                h,
            )
            .unwrap();
            let g = grads.get(vars[k]).expect("gradient");
            for (i, (a, n)) in g.data().iter().zip(&fd).enumerate() {
                assert!(relative_error(*a, *n) <= 1e-3, "input {k} entry {i}: {a} vs {n}");
            }
        }
    }

    fn dot(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let w = random(tape.value(x).shape(), -1.0, 1.0, seed);
        let n = w.len();
        let wv = tape.constant(w.reshape(&[1, n]).unwrap());
        let flat = reshape(tape, x, &[n]).unwrap();
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = linear(tape, flat, wv, b).unwrap();
        reshape(tape, y, &[1]).unwrap()
    }

    #[test]
    fn dense_layers() {
        let x = random(&[5, 4, 3], -1.0, 1.0, 1);
        let w = random(&[2, 3, 3, 3], -0.5, 0.5, 2);
        let b = random(&[2], -0.1, 0.1, 3);
        check(&[x, w, b], 1e-4, |t, v| {
            let c = conv2d(t, v[0], v[1], v[2], ConvGeom::same3(2)).unwrap();
            let a = activation(t, c, Activation::LeakyRelu(0.1));
            let u = upsample_nearest(t, a, 2).unwrap();
            let p = avg_pool(t, u, 2).unwrap();
            let th = activation(t, p, Activation::Tanh);
            let g = global_avg_pool(t, th).unwrap();
            dot(t, g, 9)
        });
        let x = random(&[6], -1.0, 1.0, 4);
        let w = random(&[3, 6], -1.0, 1.0, 5);
        let b = random(&[3], -1.0, 1.0, 6);
        check(&[x, w, b], 1e-4, |t, v| {
            let y = linear(t, v[0], v[1], v[2]).unwrap();
            let r = activation(t, y, Activation::Relu);
            let s = scale(t, r, 0.3);
            let c = concat(t, &[s, v[2]]);
            cross_entropy(t, c, 2).unwrap()
        });
    }

    #[test]
    fn sampling_and_channels() {
        let src = random(&[5, 6, 2], 0.0, 1.0, 7);
        let grid = random(&[3, 4, 2], -0.9, 0.9, 8);
        let extra = random(&[3, 4, 1], -1.0, 1.0, 9);
        check(&[src, grid, extra], 1e-5, |t, v| {
            let s = bilinear_sample(t, v[0], v[1]).unwrap();
            let c = concat_channels(t, s, v[2]).unwrap();
            dot(t, c, 10)
        });
    }

    #[test]
    fn geometry_chain() {
        let mesh = icosphere(0).unwrap();
        let map = Arc::new(SymmetryMap::build(&mesh).unwrap());
        let faces = Arc::new(mesh.faces.clone());
        let lap = Laplacian::build(&mesh).unwrap();
        let free = random(&[map.num_free(), 3], -0.1, 0.1, 11);
        let poses = Tensor::new(&[2, 7], vec![-0.2, 0.05, 0.0, 0.9, 0.1, 0.3, 0.0, -0.1, 0.0, 0.1, 0.7, -0.2, 0.5, 0.1]).unwrap();
        let colors = random(&[12, 3], 0.1, 0.9, 12);
        let base = mesh.vertex_tensor().scale(0.7);
        let cfg = RasterConfig {
            sigma: 0.02,
            gamma: 0.1,
            ..RasterConfig::with_size(6, 6)
        };
        let img = random(&[6, 6, 3], 0.0, 1.0, 13);
        let gt = Tensor::new(&[6, 6], (0..36).map(|i| if (i / 6 + i % 6) % 5 < 3 { 1.0 } else { 0.0 }).collect()).unwrap();
        let target = MaskTarget::new(gt.clone()).unwrap();
        let dist = losses::MultiScaleMae::default();
        check(&[free, poses, colors], 1e-5, |t, v| {
            let d = expand_symmetric(t, v[0], &map).unwrap();
            let b = t.constant(base.clone());
            let verts = add(t, b, d).unwrap();
            let fc = face_average(t, v[2], &faces).unwrap();
            let mut terms = Vec::new();
            for m in 0..2 {
                let p = project(t, v[1], m, verts).unwrap();
                let r = render(t, p, fc, &faces, &cfg).unwrap();
                terms.push((mask_loss(t, r, &target).unwrap(), 0.6 - 0.2 * m as f64));
                terms.push((pixel_loss(t, r, &img, &gt, &dist).unwrap(), 0.5));
            }
            terms.push((smoothness(t, verts, &lap).unwrap(), 0.1));
            terms.push((deformation_reg(t, d), 0.05));
            weighted_sum(t, &terms).unwrap()
        });
    }

    #[test]
    fn triplet_and_pose() {
        let a = random(&[4], -1.0, 1.0, 20);
        let p = random(&[4], -1.0, 1.0, 21);
        let n = random(&[4], -1.0, 1.0, 22);
        check(&[a, p, n], 1e-5, |t, v| triplet(t, v[0], v[1], v[2], 2.0).unwrap());
        let target = CameraPose::from_view(1.0, 0.3, 0.8, [0.1, 0.0]).unwrap();
        let pose = Tensor::from_vec(vec![-0.1, 0.2, -0.3, 0.6, -0.2, 0.5, 0.1]);
        check(&[pose], 1e-5, |t, v| pose_regression(t, v[0], &target).unwrap());
    }
}
