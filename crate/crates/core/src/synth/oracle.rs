//! Independent reference implementations used to verify the differentiable
//! code paths: central finite differences, a brute-force distance transform
//! and a hard z-buffered rasterizer.

use crate::error::{Error, Result};
use crate::renderer::RasterConfig;
use crate::tensor::Tensor;

/// Central differences `(f(x + h·eᵢ) - f(x - h·eᵢ)) / 2h` for every coordinate.
pub fn finite_difference<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        grad.push(central_difference(&mut f, &mut probe, i, h)?);
    }
    Ok(grad)
}

/// Central difference along a single coordinate; `probe` is restored afterwards.
pub fn central_difference<F>(f: &mut F, probe: &mut [f64], i: usize, h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let x0 = probe[i];
    probe[i] = x0 + h;
    let fp = f(probe);
    probe[i] = x0 - h;
    let fm = f(probe);
    probe[i] = x0;
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "function is not finite around coordinate {i}"
        )));
    }
    Ok((fp - fm) / (2.0 * h))
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

/// Gradients below this magnitude are compared in absolute terms.
pub const GRADIENT_FLOOR: f64 = 1e-5;

/// Exact Euclidean distance to the nearest foreground pixel by exhaustive
/// scan. Empty masks give `H + W` everywhere.
pub fn brute_force_dt(mask: &Tensor) -> Tensor {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let fg: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| mask.data()[r * w + c] > 0.5)
        .collect();
    let cap = (h + w) as f64;
    let data = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            fg.iter()
                .map(|&(fr, fc)| ((fr as f64 - r).powi(2) + (fc as f64 - c).powi(2)).sqrt())
                .fold(cap, f64::min)
        })
        .collect();
    Tensor::new(&[h, w], data).expect("shape")
}

/// Output of [`hard_rasterize`].
#[derive(Clone, Debug)]
pub struct HardRender {
    /// `[H, W, 3]`.
    pub image: Tensor,
    /// `[H, W]` in `{0, 1}`.
    pub mask: Tensor,
    /// `[H, W]` depth of the visible surface, `z_far` where empty.
    pub depth: Tensor,
    /// Visible face per pixel.
    pub face_index: Vec<Option<usize>>,
}

/// Point-in-triangle coverage at pixel centers with a z-buffer (larger depth
/// wins, first face wins ties). Edges are inclusive; degenerate faces never
/// cover anything.
pub fn hard_rasterize(
    proj: &Tensor,
    faces: &[[usize; 3]],
    face_colors: Option<&Tensor>,
    cfg: &RasterConfig,
) -> HardRender {
    let (h, w) = (cfg.height, cfg.width);
    let p = proj.data();
    let mut mask = Tensor::zeros(&[h, w]);
    let mut depth = Tensor::filled(&[h, w], cfg.z_far);
    let mut face_index = vec![None; h * w];
    for (fi, f) in faces.iter().enumerate() {
        let v = f.map(|i| [p[i * 3], p[i * 3 + 1], p[i * 3 + 2]]);
        let area2 = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[1][1] - v[0][1]) * (v[2][0] - v[0][0]);
        if area2.abs() * 0.5 <= crate::renderer::DEGENERATE_AREA {
            continue;
        }
        // Pixel (r, c) is centered at x = (2c + 1)/w - 1, y = 1 - (2r + 1)/h.
        let lo = |a: f64, n: usize| (((a + 1.0) * n as f64 - 1.0) / 2.0).floor().max(0.0) as usize;
        let hi = |a: f64, n: usize| ((((a + 1.0) * n as f64 - 1.0) / 2.0).ceil().max(-1.0) + 1.0).min(n as f64) as usize;
        let (xmin, xmax) = (v.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min), v.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max));
        let (ymin, ymax) = (v.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min), v.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max));
        let (c0, c1) = (lo(xmin, w), hi(xmax, w));
        let (r0, r1) = (lo(-ymax, h), hi(-ymin, h));
        for r in r0..r1 {
            for c in c0..c1 {
                let px = cfg.pixel_center(r, c);
                let edge = |a: [f64; 3], b: [f64; 3]| (b[0] - a[0]) * (px[1] - a[1]) - (b[1] - a[1]) * (px[0] - a[0]);
                let l = [edge(v[1], v[2]), edge(v[2], v[0]), edge(v[0], v[1])];
                if l.iter().any(|&e| e * area2.signum() < 0.0) {
                    continue;
                }
                let z = (l[0] * v[0][2] + l[1] * v[1][2] + l[2] * v[2][2]) / area2;
                let i = r * w + c;
                if face_index[i].is_none() || z > depth.data()[i] {
                    mask.data_mut()[i] = 1.0;
                    depth.data_mut()[i] = z;
                    face_index[i] = Some(fi);
                }
            }
        }
    }
    let mut image = Tensor::zeros(&[h, w, 3]);
    for (i, px) in image.data_mut().chunks_exact_mut(3).enumerate() {
        let col = match face_index[i] {
            Some(fi) => face_colors.map_or([1.0; 3], |fc| {
                let d = &fc.data()[fi * 3..fi * 3 + 3];
                [d[0], d[1], d[2]]
            }),
            None => cfg.background,
        };
        px.copy_from_slice(&col);
    }
    HardRender {
        image,
        mask,
        depth,
        face_index,
    }
}
