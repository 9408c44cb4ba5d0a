//! Flow-field resampling into the canonical chart, canonical positional
//! encodings and per-vertex texture lookup.
//!
//! Grid coordinates are normalized to `[-1, 1]` with `-1` at the center of the
//! first row/column and `+1` at the center of the last (corner-aligned).
//! Channel 0 is the horizontal coordinate, channel 1 the vertical one; `-1`
//! vertically is the top row of the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::mesh::Mesh;
use crate::tensor::Tensor;

fn check_grid(grid: &Tensor) -> Result<(usize, usize)> {
    match *grid.shape() {
        [h, w, 2] => {
            if !grid.is_finite() {
                return Err(Error::NonFinite("flow".into()));
            }
            Ok((h, w))
        }
        _ => Err(Error::shape("flow", &[0, 0, 2], grid.shape())),
    }
}

fn check_src(src: &Tensor) -> Result<(usize, usize, usize)> {
    match *src.shape() {
        [h, w, k] => Ok((h, w, k)),
        _ => Err(Error::shape("bilinear_sample src", &[0, 0, 0], src.shape())),
    }
}

#[inline]
fn to_pixel(g: f64, size: usize) -> f64 {
    (g + 1.0) * 0.5 * (size as f64 - 1.0)
}

/// Corner indices and weights of one bilinear lookup. Out-of-range corners
/// are `None` (zero padding).
struct Tap {
    x0: isize,
    y0: isize,
    wx: f64,
    wy: f64,
}

impl Tap {
    fn new(gx: f64, gy: f64, h: usize, w: usize) -> Self {
        let (px, py) = (to_pixel(gx, w), to_pixel(gy, h));
        let (fx, fy) = (px.floor(), py.floor());
        Self {
            x0: fx as isize,
            y0: fy as isize,
            wx: px - fx,
            wy: py - fy,
        }
    }

    fn corners(&self, h: usize, w: usize) -> [(Option<usize>, f64); 4] {
        let at = |x: isize, y: isize| {
            (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then(|| y as usize * w + x as usize)
        };
        [
            (at(self.x0, self.y0), (1.0 - self.wx) * (1.0 - self.wy)),
            (at(self.x0 + 1, self.y0), self.wx * (1.0 - self.wy)),
            (at(self.x0, self.y0 + 1), (1.0 - self.wx) * self.wy),
            (at(self.x0 + 1, self.y0 + 1), self.wx * self.wy),
        ]
    }
}

/// Bilinear resampling of `src: [H, W, K]` at the source coordinates stored in
/// `grid: [Hg, Wg, 2]`, with zero padding outside the source.
pub fn bilinear_sample(src: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let (h, w, k) = check_src(src)?;
    let (hg, wg) = check_grid(grid)?;
    let sd = src.data();
    let mut out = vec![0.0; hg * wg * k];
    for (i, g) in grid.data().chunks_exact(2).enumerate() {
        let tap = Tap::new(g[0], g[1], h, w);
        let o = &mut out[i * k..(i + 1) * k];
        for (idx, wt) in tap.corners(h, w) {
            if let Some(idx) = idx {
                for (ov, sv) in o.iter_mut().zip(&sd[idx * k..(idx + 1) * k]) {
                    *ov += wt * sv;
                }
            }
        }
    }
    Tensor::new(&[hg, wg, k], out)
}

/// Gradients of [`bilinear_sample`] w.r.t. the source and the grid.
pub fn bilinear_sample_backward(
    src: &Tensor,
    grid: &Tensor,
    grad: &Tensor,
    need_src: bool,
    need_grid: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (h, w, k) = check_src(src)?;
    let (hg, wg) = check_grid(grid)?;
    grad.expect_shape("bilinear_sample grad", &[hg, wg, k])?;
    let sd = src.data();
    let gd = grad.data();
    let mut gsrc = need_src.then(|| vec![0.0; h * w * k]);
    let mut ggrid = need_grid.then(|| vec![0.0; hg * wg * 2]);
    let sx = 0.5 * (w as f64 - 1.0);
    let sy = 0.5 * (h as f64 - 1.0);
    for (i, g) in grid.data().chunks_exact(2).enumerate() {
        let tap = Tap::new(g[0], g[1], h, w);
        let go = &gd[i * k..(i + 1) * k];
        let corners = tap.corners(h, w);
        if let Some(gs) = gsrc.as_mut() {
            for (idx, wt) in corners {
                if let Some(idx) = idx {
                    for (gv, u) in gs[idx * k..(idx + 1) * k].iter_mut().zip(go) {
                        *gv += wt * u;
                    }
                }
            }
        }
        if let Some(gg) = ggrid.as_mut() {
            // Source values at the four corners projected on the upstream gradient.
            let val = |c: usize| -> f64 {
                corners[c]
                    .0
                    .map_or(0.0, |idx| sd[idx * k..(idx + 1) * k].iter().zip(go).map(|(s, u)| s * u).sum())
            };
            let (v00, v10, v01, v11) = (val(0), val(1), val(2), val(3));
            let dpx = (1.0 - tap.wy) * (v10 - v00) + tap.wy * (v11 - v01);
            let dpy = (1.0 - tap.wx) * (v01 - v00) + tap.wx * (v11 - v10);
            gg[i * 2] += dpx * sx;
            gg[i * 2 + 1] += dpy * sy;
        }
    }
    Ok((
        gsrc.map(|d| Tensor::new(&[h, w, k], d).expect("shape")),
        ggrid.map(|d| Tensor::new(&[hg, wg, 2], d).expect("shape")),
    ))
}

/// Grid whose every cell points at its own location: sampling with it is the
/// identity when source and grid sizes agree.
pub fn identity_grid(h: usize, w: usize) -> Tensor {
    let lin = |i: usize, n: usize| if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
    let data = (0..h)
        .flat_map(|r| (0..w).flat_map(move |c| [lin(c, w), lin(r, h)]))
        .collect();
    Tensor::new(&[h, w, 2], data).expect("shape")
}

/// Positional encoding of the canonical chart.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMode {
    /// `(cos πu, sin πu, cos πv, sin πv)`.
    #[default]
    Pe4,
    /// Raw `(u, v)`.
    Pe2,
    None,
}

impl PeMode {
    pub fn channels(self) -> usize {
        match self {
            PeMode::Pe4 => 4,
            PeMode::Pe2 => 2,
            PeMode::None => 0,
        }
    }
}

impl std::str::FromStr for PeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pe4" => Ok(PeMode::Pe4),
            "pe2" => Ok(PeMode::Pe2),
            "none" => Ok(PeMode::None),
            other => Err(Error::Config(format!("unknown positional encoding {other:?} (pe4, pe2, none)"))),
        }
    }
}

/// `[H, W, channels]` encoding of linearly spaced `u` (columns) and `v`
/// (rows) on `[-1, 1]` inclusive.
pub fn positional_encoding(h: usize, w: usize, mode: PeMode) -> Result<Tensor> {
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!("positional encoding needs at least 2x2, got {h}x{w}")));
    }
    let grid = identity_grid(h, w);
    let pi = std::f64::consts::PI;
    let data = grid
        .data()
        .chunks_exact(2)
        .flat_map(|uv| {
            let (u, v) = (uv[0], uv[1]);
            match mode {
                PeMode::Pe4 => vec![(pi * u).cos(), (pi * u).sin(), (pi * v).cos(), (pi * v).sin()],
                PeMode::Pe2 => vec![u, v],
                PeMode::None => vec![],
            }
        })
        .collect();
    Tensor::new(&[h, w, mode.channels()], data)
}

/// Canonical texture `I^w`: the input image resampled by the flow.
pub fn build_texture(image: &Tensor, flow: &Tensor) -> Result<Tensor> {
    bilinear_sample(image, flow)
}

/// Average-pools a flow field by `factor` for warping coarse feature maps.
pub fn downsample_flow(flow: &Tensor, factor: usize) -> Result<Tensor> {
    kernels::avg_pool(flow, factor)
}

/// Equirectangular chart coordinates of template vertices:
/// `u = atan2(x, z) / π`, `v = -2·asin(y) / π` (north pole at `v = -1`, the
/// top row of the chart). Mirror partners get mirrored `u`.
pub fn template_uv(mesh: &Mesh) -> Tensor {
    let pi = std::f64::consts::PI;
    let data = mesh
        .vertices
        .iter()
        .flat_map(|p| {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(1e-300);
            // Treat on-plane vertices as `+0` so the seam maps to a single side.
            let x = if p[0] == 0.0 { 0.0 } else { p[0] };
            [x.atan2(p[2]) / pi, -2.0 * (p[1] / n).clamp(-1.0, 1.0).asin() / pi]
        })
        .collect();
    Tensor::new(&[mesh.vertices.len(), 2], data).expect("shape")
}

/// Bilinear lookup of `texture: [Hw, Ww, 3]` at each vertex's chart
/// coordinate; returns `[N, 3]`.
pub fn sample_vertex_colors(texture: &Tensor, uv: &Tensor) -> Result<Tensor> {
    let n = uv.shape()[0];
    let grid = uv.clone().reshape(&[n, 1, 2])?;
    bilinear_sample(texture, &grid)?.reshape(&[n, texture.shape()[2]])
}

/// Gradient of [`sample_vertex_colors`] w.r.t. the texture.
pub fn sample_vertex_colors_backward(texture: &Tensor, uv: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let n = uv.shape()[0];
    let grid = uv.clone().reshape(&[n, 1, 2])?;
    let g = grad.clone().reshape(&[n, 1, texture.shape()[2]])?;
    let (gt, _) = bilinear_sample_backward(texture, &grid, &g, true, false)?;
    Ok(gt.expect("requested"))
}

/// Flat per-face colors: the mean of the three vertex colors.
pub fn face_average(vertex_colors: &Tensor, faces: &[[usize; 3]]) -> Result<Tensor> {
    let k = vertex_colors.shape()[1];
    let vd = vertex_colors.data();
    let mut out = Vec::with_capacity(faces.len() * k);
    for f in faces {
        for ch in 0..k {
            out.push((vd[f[0] * k + ch] + vd[f[1] * k + ch] + vd[f[2] * k + ch]) / 3.0);
        }
    }
    Tensor::new(&[faces.len(), k], out)
}

pub fn face_average_backward(num_vertices: usize, faces: &[[usize; 3]], grad: &Tensor) -> Tensor {
    let k = grad.shape()[1];
    let mut out = Tensor::zeros(&[num_vertices, k]);
    let od = out.data_mut();
    for (f, g) in faces.iter().zip(grad.data().chunks_exact(k)) {
        for &v in f {
            for ch in 0..k {
                od[v * k + ch] += g[ch] / 3.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{icosphere, SymmetryMap};
    use crate::synth::oracle::{finite_difference, relative_error};
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn identity_flow_reproduces_input() {
        let src = random(&[5, 7, 3], 0.0, 1.0, 1);
        let out = bilinear_sample(&src, &identity_grid(5, 7)).unwrap();
        for (a, b) in out.data().iter().zip(src.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_pixel_shift() {
        let (h, w) = (6, 9);
        let src = random(&[h, w, 2], 0.0, 1.0, 2);
        let mut grid = identity_grid(h, w);
        let step = 2.0 / (w - 1) as f64;
        grid.data_mut().chunks_exact_mut(2).for_each(|g| g[0] += step);
        let out = bilinear_sample(&src, &grid).unwrap();
        for r in 0..h {
            for c in 0..w - 1 {
                for k in 0..2 {
                    let a = out.data()[(r * w + c) * 2 + k];
                    let b = src.data()[(r * w + c + 1) * 2 + k];
                    assert!((a - b).abs() < 1e-9);
                }
            }
            assert!(out.data()[(r * w + w - 1) * 2].abs() < 1e-9, "zero padding");
        }
    }

    #[test]
    fn sample_gradients_match_fd() {
        let src = random(&[6, 5, 2], 0.0, 1.0, 3);
        let grid = random(&[3, 4, 2], -0.9, 0.9, 4);
        let up = random(&[3, 4, 2], -1.0, 1.0, 5);
        let f = |s: &Tensor, g: &Tensor| -> f64 {
            bilinear_sample(s, g).unwrap().data().iter().zip(up.data()).map(|(a, u)| a * u).sum()
        };
        let (gs, gg) = bilinear_sample_backward(&src, &grid, &up, true, true).unwrap();
        let fds = finite_difference(|d| f(&Tensor::new(src.shape(), d.to_vec()).unwrap(), &grid), src.data(), 1e-4).unwrap();
        let fdg = finite_difference(|d| f(&src, &Tensor::new(grid.shape(), d.to_vec()).unwrap()), grid.data(), 1e-5).unwrap();
        for (a, n) in gs.unwrap().data().iter().zip(&fds) {
            assert!(relative_error(*a, *n) <= 1e-3);
        }
        for (a, n) in gg.unwrap().data().iter().zip(&fdg) {
            assert!(relative_error(*a, *n) <= 1e-3, "{a} vs {n}");
        }
    }

    #[test]
    fn encoding_examples() {
        let pe = positional_encoding(3, 5, PeMode::Pe4).unwrap();
        // Center cell is (u, v) = (0, 0).
        let c = &pe.data()[(5 + 2) * 4..(5 + 2) * 4 + 4];
        assert!((c[0] - 1.0).abs() < 1e-15 && c[1].abs() < 1e-15 && (c[2] - 1.0).abs() < 1e-15 && c[3].abs() < 1e-15);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        for r in 0..3 {
            let left = &pe.data()[r * 5 * 4..r * 5 * 4 + 2];
            let right = &pe.data()[(r * 5 + 4) * 4..(r * 5 + 4) * 4 + 2];
            assert!((left[0] - right[0]).abs() < 1e-15 && (left[1] + right[1]).abs() < 1e-15);
            assert!(left[1].abs() < 1e-15);
        }
        assert_eq!(positional_encoding(2, 2, PeMode::None).unwrap().shape(), &[2, 2, 0]);
        assert!(positional_encoding(1, 4, PeMode::Pe4).is_err());
    }

    #[test]
    fn vertex_colors() {
        let mesh = icosphere(2).unwrap();
        let uv = template_uv(&mesh);
        let constant = Tensor::filled(&[8, 16, 3], 0.25);
        let colors = sample_vertex_colors(&constant, &uv).unwrap();
        assert!(colors.data().iter().all(|&c| (c - 0.25).abs() < 1e-12));
        // Left/right mirrored texture gives identical colors on mirror pairs.
        let (h, w) = (8, 16);
        let base = random(&[h, w, 3], 0.0, 1.0, 9);
        let mut sym = base.clone();
        for r in 0..h {
            for c in 0..w {
                for k in 0..3 {
                    sym.data_mut()[(r * w + c) * 3 + k] = base.data()[(r * w + c) * 3 + k] + base.data()[(r * w + (w - 1 - c)) * 3 + k];
                }
            }
        }
        let colors = sample_vertex_colors(&sym, &uv).unwrap();
        let map = SymmetryMap::build(&mesh).unwrap();
        for &(a, b) in &map.pairs {
            for k in 0..3 {
                assert!((colors.data()[a * 3 + k] - colors.data()[b * 3 + k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pixel_center_lookup() {
        let tex = random(&[4, 6, 3], 0.0, 1.0, 11);
        let grid = identity_grid(4, 6);
        let uv = Tensor::new(&[1, 2], grid.data()[(2 * 6 + 3) * 2..(2 * 6 + 3) * 2 + 2].to_vec()).unwrap();
        let c = sample_vertex_colors(&tex, &uv).unwrap();
        for k in 0..3 {
            assert!((c.data()[k] - tex.data()[(2 * 6 + 3) * 3 + k]).abs() < 1e-12);
        }
    }

    #[test]
    fn face_average_adjoint() {
        let mesh = icosphere(1).unwrap();
        let vc = random(&[mesh.num_vertices(), 3], 0.0, 1.0, 12);
        let g = random(&[mesh.num_faces(), 3], -1.0, 1.0, 13);
        let fa = face_average(&vc, &mesh.faces).unwrap();
        let lhs: f64 = fa.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let back = face_average_backward(mesh.num_vertices(), &mesh.faces, &g);
        let rhs: f64 = vc.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
