//! Soft rasterization of silhouettes and flat-colored meshes.
//!
//! Each face contributes an occupancy `D = sigmoid(sign · d² / sigma)` at a
//! pixel, where `d` is the distance from the pixel center to the projected
//! triangle boundary and `sign` is `+1` inside. The silhouette is the
//! probabilistic union `1 - Π(1 - D)`; color is a softmax over depth with
//! weights `D · exp(z / gamma)` plus a far-plane background weight.
//!
//! NDC covers `[-1, 1]²` with `y` up; pixel `(row, col)` has its center at
//! `(-1 + (2col+1)/W, 1 - (2row+1)/H)`, so row 0 is the top of the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Fragments with `sign · d² / sigma` below `-OCCUPANCY_CUTOFF` are dropped
/// (their occupancy is below 1e-13).
pub const OCCUPANCY_CUTOFF: f64 = 30.0;

/// Triangles with area at or below this (NDC²) have zero occupancy.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub height: usize,
    pub width: usize,
    /// Occupancy sharpness in NDC².
    pub sigma: f64,
    /// Depth-aggregation temperature.
    pub gamma: f64,
    pub background: [f64; 3],
    /// Depth of the background plane.
    pub z_far: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            sigma: 1e-4,
            gamma: 1e-4,
            background: [0.0; 3],
            z_far: -10.0,
        }
    }
}

impl RasterConfig {
    pub fn with_size(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("raster size must be positive".into()));
        }
        if !(self.sigma > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma ({}) and gamma ({}) must be positive",
                self.sigma, self.gamma
            )));
        }
        Ok(())
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            -1.0 + (2 * col + 1) as f64 / self.width as f64,
            1.0 - (2 * row + 1) as f64 / self.height as f64,
        ]
    }

    fn margin(&self) -> f64 {
        (OCCUPANCY_CUTOFF * self.sigma).sqrt()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn cross(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Squared distance from `p` to the triangle boundary, the index of the
/// nearest edge (`k` joins vertex `k` and `k+1`), and the clamped position
/// `t` of the closest point along it.
#[inline]
fn boundary_distance(p: [f64; 2], tri: &[[f64; 2]; 3]) -> (f64, usize, f64) {
    let mut best = (f64::INFINITY, 0, 0.0);
    for k in 0..3 {
        let a = tri[k];
        let b = tri[(k + 1) % 3];
        let e = [b[0] - a[0], b[1] - a[1]];
        let len2 = e[0] * e[0] + e[1] * e[1];
        let t = if len2 > 0.0 {
            (((p[0] - a[0]) * e[0] + (p[1] - a[1]) * e[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let c = [a[0] + t * e[0], a[1] + t * e[1]];
        let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        if d2 < best.0 {
            best = (d2, k, t);
        }
    }
    best
}

/// Edge functions `E_k = cross(v_{k+1}, v_{k+2}, p)`; `E_k / ΣE` are the
/// barycentric coordinates of `p`.
#[inline]
fn edge_functions(p: [f64; 2], tri: &[[f64; 2]; 3]) -> [f64; 3] {
    [
        cross(tri[1], tri[2], p),
        cross(tri[2], tri[0], p),
        cross(tri[0], tri[1], p),
    ]
}

/// Signed distance from `pixel` to the triangle boundary: positive inside,
/// negative outside, zero on an edge. Degenerate triangles report the
/// unsigned (negative) distance, i.e. they never contain a point.
pub fn signed_face_distance(pixel: [f64; 2], tri: [[f64; 2]; 3]) -> f64 {
    let (d2, _, _) = boundary_distance(pixel, &tri);
    let area2 = cross(tri[0], tri[1], tri[2]);
    if area2.abs() * 0.5 <= DEGENERATE_AREA {
        return -d2.sqrt();
    }
    let e = edge_functions(pixel, &tri);
    let inside = e.iter().all(|&v| v * area2.signum() >= 0.0);
    if inside {
        d2.sqrt()
    } else {
        -d2.sqrt()
    }
}

#[derive(Clone, Copy, Debug)]
struct FaceGeom {
    verts: [[f64; 2]; 3],
    depth: [f64; 3],
    area2: f64,
    cols: (usize, usize),
    degenerate: bool,
}

#[derive(Clone, Copy, Debug, Default)]
struct Fragment {
    face: u32,
    edge: u8,
    sign: f64,
    t: f64,
    occ: f64,
    comp: f64,
    // Depth aggregation state, only filled when rendering color.
    bary: [f64; 3],
    clamped_sum: f64,
    bary_clamped: [f64; 3],
    zbar: f64,
    expz: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct PixelAgg {
    total_weight: f64,
    color: [f64; 3],
}

struct RowResult {
    frags: Vec<Fragment>,
    counts: Vec<u32>,
    sil: Vec<f64>,
    agg: Vec<PixelAgg>,
}

/// Forward render plus everything retained for the backward pass.
#[derive(Debug)]
pub struct RenderOutput {
    cfg: RasterConfig,
    proj: Tensor,
    faces: Vec<[u32; 3]>,
    face_colors: Option<Tensor>,
    frags: Vec<Fragment>,
    offsets: Vec<usize>,
    agg: Vec<PixelAgg>,
    /// `[H, W]` soft silhouette in `[0, 1]`.
    pub silhouette: Tensor,
    /// `[H, W, 3]` aggregated color, when face colors were given.
    pub color: Option<Tensor>,
}

/// Gradients of a render w.r.t. its inputs.
#[derive(Clone, Debug)]
pub struct RenderGrads {
    /// `[N, 3]` gradient on `(u, v, depth)`.
    pub proj: Tensor,
    /// `[F, 3]` gradient on face colors.
    pub face_colors: Option<Tensor>,
}

fn check_proj(proj: &Tensor, faces: &[[usize; 3]]) -> Result<()> {
    if proj.shape().len() != 2 || proj.shape()[1] != 3 {
        return Err(Error::shape("rasterize", &[0, 3], proj.shape()));
    }
    if !proj.is_finite() {
        return Err(Error::NonFinite("projected vertices".into()));
    }
    let n = proj.shape()[0];
    if faces.iter().flatten().any(|&v| v >= n) {
        return Err(Error::InvalidGeometry("face index out of range".into()));
    }
    Ok(())
}

/// Soft render of projected vertices `(u, v, depth)` into a silhouette and,
/// when `face_colors` (`[F, 3]` in `[0, 1]`) is given, a color image.
pub fn rasterize(
    proj: &Tensor,
    faces: &[[usize; 3]],
    face_colors: Option<&Tensor>,
    cfg: &RasterConfig,
) -> Result<RenderOutput> {
    cfg.validate()?;
    check_proj(proj, faces)?;
    if let Some(c) = face_colors {
        c.expect_shape("rasterize colors", &[faces.len(), 3])?;
        if c.data().iter().any(|v| !(-1e-9..=1.0 + 1e-9).contains(v)) {
            return Err(Error::InvalidArgument("face colors must lie in [0, 1]".into()));
        }
    }
    let (h, w) = (cfg.height, cfg.width);
    let margin = cfg.margin();
    let p = proj.data();

    let geoms: Vec<FaceGeom> = faces
        .iter()
        .map(|f| {
            let verts = f.map(|i| [p[i * 3], p[i * 3 + 1]]);
            let depth = f.map(|i| p[i * 3 + 2]);
            let area2 = cross(verts[0], verts[1], verts[2]);
            let xmin = verts.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min) - margin;
            let xmax = verts.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max) + margin;
            FaceGeom {
                verts,
                depth,
                area2,
                cols: pixel_span(xmin + 1.0, xmax + 1.0, w),
                degenerate: area2.abs() * 0.5 <= DEGENERATE_AREA,
            }
        })
        .collect();

    // Bucket faces by the rows their expanded bounds touch.
    let mut row_faces: Vec<Vec<u32>> = vec![Vec::new(); h];
    for (fi, g) in geoms.iter().enumerate() {
        if g.degenerate || g.cols.0 > g.cols.1 {
            continue;
        }
        let ymin = g.verts.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min) - margin;
        let ymax = g.verts.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max) + margin;
        let (r0, r1) = pixel_span(1.0 - ymax, 1.0 - ymin, h);
        for bucket in row_faces.iter_mut().take(r1.saturating_add(1).min(h)).skip(r0) {
            bucket.push(fi as u32);
        }
    }

    let colors = face_colors.map(|c| c.data());
    let rows: Vec<RowResult> = par::map_range(h, |r| {
        let mut out = RowResult {
            frags: Vec::new(),
            counts: Vec::with_capacity(w),
            sil: Vec::with_capacity(w),
            agg: Vec::with_capacity(if colors.is_some() { w } else { 0 }),
        };
        for c in 0..w {
            let px = cfg.pixel_center(r, c);
            let start = out.frags.len();
            for &fi in &row_faces[r] {
                let g = &geoms[fi as usize];
                if c < g.cols.0 || c > g.cols.1 {
                    continue;
                }
                if let Some(frag) = fragment(px, fi, g, cfg, colors.is_some()) {
                    out.frags.push(frag);
                }
            }
            let frags = &mut out.frags[start..];
            let prod: f64 = frags.iter().map(|f| f.comp).product();
            out.sil.push(1.0 - prod);
            out.counts.push(frags.len() as u32);
            if let Some(colors) = colors {
                out.agg.push(aggregate(frags, colors, cfg));
            }
        }
        out
    });

    let mut frags = Vec::with_capacity(rows.iter().map(|r| r.frags.len()).sum());
    let mut offsets = Vec::with_capacity(h * w + 1);
    let mut sil = Vec::with_capacity(h * w);
    let mut agg = Vec::new();
    offsets.push(0);
    for row in rows {
        let mut base = frags.len();
        for &n in &row.counts {
            base += n as usize;
            offsets.push(base);
        }
        frags.extend_from_slice(&row.frags);
        sil.extend_from_slice(&row.sil);
        agg.extend_from_slice(&row.agg);
    }
    let color = colors.map(|_| {
        let data = agg.iter().flat_map(|a| a.color).collect();
        Tensor::new(&[h, w, 3], data).expect("shape")
    });
    Ok(RenderOutput {
        cfg: cfg.clone(),
        proj: proj.clone(),
        faces: faces.iter().map(|f| f.map(|i| i as u32)).collect(),
        face_colors: face_colors.cloned(),
        frags,
        offsets,
        agg,
        silhouette: Tensor::new(&[h, w], sil)?,
        color,
    })
}

/// Inclusive range of pixel indices whose centers fall in `[lo, hi]`, where
/// coordinates are measured from the image edge in NDC units (`0..2`).
fn pixel_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    // center of pixel i sits at (2i+1)/n
    let first = ((lo * n as f64 - 1.0) / 2.0).ceil().max(0.0);
    let last = ((hi * n as f64 - 1.0) / 2.0).floor().min(n as f64 - 1.0);
    if !(first <= last) {
        return (1, 0);
    }
    (first as usize, last as usize)
}

#[inline]
fn fragment(px: [f64; 2], fi: u32, g: &FaceGeom, cfg: &RasterConfig, with_depth: bool) -> Option<Fragment> {
    let (d2, edge, t) = boundary_distance(px, &g.verts);
    let e = edge_functions(px, &g.verts);
    let s = g.area2.signum();
    let inside = e.iter().all(|&v| v * s >= 0.0);
    let sign = if inside { 1.0 } else { -1.0 };
    let a = sign * d2 / cfg.sigma;
    if a < -OCCUPANCY_CUTOFF {
        return None;
    }
    let mut frag = Fragment {
        face: fi,
        edge: edge as u8,
        sign,
        t,
        occ: sigmoid(a),
        comp: sigmoid(-a),
        ..Default::default()
    };
    if with_depth {
        let bary = e.map(|v| v / g.area2);
        let clamped = bary.map(|v| v.clamp(0.0, 1.0));
        let sum: f64 = clamped.iter().sum();
        let bc = clamped.map(|v| v / sum);
        frag.bary = bary;
        frag.clamped_sum = sum;
        frag.bary_clamped = bc;
        frag.zbar = bc[0] * g.depth[0] + bc[1] * g.depth[1] + bc[2] * g.depth[2];
    }
    Some(frag)
}

fn aggregate(frags: &mut [Fragment], colors: &[f64], cfg: &RasterConfig) -> PixelAgg {
    let zmax = frags.iter().map(|f| f.zbar).fold(cfg.z_far, f64::max);
    let wb = ((cfg.z_far - zmax) / cfg.gamma).exp();
    let mut total = wb;
    let mut acc = cfg.background.map(|b| b * wb);
    for f in frags.iter_mut() {
        f.expz = ((f.zbar - zmax) / cfg.gamma).exp();
        let wj = f.occ * f.expz;
        total += wj;
        let c = &colors[f.face as usize * 3..f.face as usize * 3 + 3];
        for k in 0..3 {
            acc[k] += wj * c[k];
        }
    }
    PixelAgg {
        total_weight: total,
        color: acc.map(|v| v / total),
    }
}

impl RenderOutput {
    pub fn config(&self) -> &RasterConfig {
        &self.cfg
    }

    /// Number of retained (pixel, face) fragments.
    pub fn fragment_count(&self) -> usize {
        self.frags.len()
    }

    /// Sum of aggregation weights per pixel, normalized: always 1 when color is rendered.
    pub fn weight_sums(&self) -> Option<Vec<f64>> {
        self.color.as_ref()?;
        Some(
            (0..self.cfg.height * self.cfg.width)
                .map(|px| {
                    let a = &self.agg[px];
                    let frags = &self.frags[self.offsets[px]..self.offsets[px + 1]];
                    let zmax = frags.iter().map(|f| f.zbar).fold(self.cfg.z_far, f64::max);
                    let wb = ((self.cfg.z_far - zmax) / self.cfg.gamma).exp();
                    (wb + frags.iter().map(|f| f.occ * f.expz).sum::<f64>()) / a.total_weight
                })
                .collect(),
        )
    }

    /// Exact gradients of the forward formulas given upstream gradients on
    /// the silhouette (`[H, W]`) and/or color (`[H, W, 3]`).
    pub fn backward(&self, g_sil: Option<&Tensor>, g_color: Option<&Tensor>) -> Result<RenderGrads> {
        let (h, w) = (self.cfg.height, self.cfg.width);
        if let Some(g) = g_sil {
            g.expect_shape("render backward silhouette", &[h, w])?;
        }
        if let Some(g) = g_color {
            g.expect_shape("render backward color", &[h, w, 3])?;
            if self.color.is_none() {
                return Err(Error::InvalidArgument(
                    "color gradient given for a silhouette-only render".into(),
                ));
            }
        }
        let p = self.proj.data();
        let colors = self.face_colors.as_ref().map(|c| c.data());
        let color_out = self.color.as_ref().map(|c| c.data());
        let inv_sigma = 1.0 / self.cfg.sigma;
        let inv_gamma = 1.0 / self.cfg.gamma;

        // Per-row lists of (face, [du,dv,dz] x 3 vertices, dcolor x 3).
        let rows: Vec<Vec<(u32, [f64; 12])>> = par::map_range(h, |r| {
            let mut out = Vec::new();
            let mut suffix = Vec::new();
            for c in 0..w {
                let px_index = r * w + c;
                let frags = &self.frags[self.offsets[px_index]..self.offsets[px_index + 1]];
                if frags.is_empty() {
                    continue;
                }
                let gs = g_sil.map_or(0.0, |g| g.data()[px_index]);
                let gc = g_color.map(|g| {
                    let d = &g.data()[px_index * 3..px_index * 3 + 3];
                    [d[0], d[1], d[2]]
                });
                if gs == 0.0 && gc.is_none_or(|g| g == [0.0; 3]) {
                    continue;
                }
                // Π_{k≠j} comp_k via prefix/suffix products.
                suffix.clear();
                suffix.resize(frags.len() + 1, 1.0);
                for j in (0..frags.len()).rev() {
                    suffix[j] = suffix[j + 1] * frags[j].comp;
                }
                let px = self.cfg.pixel_center(r, c);
                let mut prefix = 1.0;
                for (j, f) in frags.iter().enumerate() {
                    let others = prefix * suffix[j + 1];
                    prefix *= f.comp;
                    let dsig = f.occ * f.comp;
                    let mut g_a = gs * dsig * others;
                    let mut rec = [0.0; 12];
                    let fi = f.face as usize;
                    let face = self.faces[fi];
                    let verts = face.map(|i| [p[i as usize * 3], p[i as usize * 3 + 1]]);
                    if let (Some(gc), Some(colors), Some(cout)) = (gc, colors, color_out) {
                        let agg = &self.agg[px_index];
                        let col = &colors[fi * 3..fi * 3 + 3];
                        let cpix = &cout[px_index * 3..px_index * 3 + 3];
                        let wj = f.occ * f.expz;
                        let mut g_w = 0.0;
                        for k in 0..3 {
                            g_w += gc[k] * (col[k] - cpix[k]);
                            rec[9 + k] = gc[k] * wj / agg.total_weight;
                        }
                        g_w /= agg.total_weight;
                        g_a += g_w * f.expz * dsig;
                        let g_zbar = g_w * wj * inv_gamma;
                        if g_zbar != 0.0 {
                            let depth = face.map(|i| p[i as usize * 3 + 2]);
                            for k in 0..3 {
                                rec[k * 3 + 2] += g_zbar * f.bary_clamped[k];
                            }
                            barycentric_backward(px, &verts, &depth, f, g_zbar, &mut rec);
                        }
                    }
                    if g_a != 0.0 {
                        // a = sign · d² / sigma, d² to the nearest edge.
                        let g_d2 = g_a * f.sign * inv_sigma;
                        let k0 = f.edge as usize;
                        let k1 = (k0 + 1) % 3;
                        let (va, vb) = (verts[k0], verts[k1]);
                        let cpt = [va[0] + f.t * (vb[0] - va[0]), va[1] + f.t * (vb[1] - va[1])];
                        let diff = [px[0] - cpt[0], px[1] - cpt[1]];
                        for d in 0..2 {
                            rec[k0 * 3 + d] += g_d2 * -2.0 * (1.0 - f.t) * diff[d];
                            rec[k1 * 3 + d] += g_d2 * -2.0 * f.t * diff[d];
                        }
                    }
                    out.push((f.face, rec));
                }
            }
            out
        });

        let n = self.proj.shape()[0];
        let mut g_proj = vec![0.0; n * 3];
        let mut g_col = colors.map(|_| vec![0.0; self.faces.len() * 3]);
        for row in rows {
            for (fi, rec) in row {
                let face = self.faces[fi as usize];
                for k in 0..3 {
                    let v = face[k] as usize;
                    for d in 0..3 {
                        g_proj[v * 3 + d] += rec[k * 3 + d];
                    }
                }
                if let Some(gc) = g_col.as_mut() {
                    for k in 0..3 {
                        gc[fi as usize * 3 + k] += rec[9 + k];
                    }
                }
            }
        }
        Ok(RenderGrads {
            proj: Tensor::new(&[n, 3], g_proj)?,
            face_colors: match g_col {
                Some(g) => Some(Tensor::new(&[self.faces.len(), 3], g)?),
                None => None,
            },
        })
    }
}

/// Chain rule through `zbar = Σ l'_k z_k` with `l' = clamp(l, 0, 1) / Σ clamp`
/// and `l_k = E_k / ΣE`, into the 2D vertex positions.
fn barycentric_backward(
    px: [f64; 2],
    verts: &[[f64; 2]; 3],
    depth: &[f64; 3],
    f: &Fragment,
    g_zbar: f64,
    rec: &mut [f64; 12],
) {
    let g_lp = depth.map(|z| g_zbar * z);
    let dot: f64 = (0..3).map(|k| g_lp[k] * f.bary_clamped[k]).sum();
    let mut g_l = [0.0; 3];
    for k in 0..3 {
        let g_c = (g_lp[k] - dot) / f.clamped_sum;
        if f.bary[k] > 0.0 && f.bary[k] < 1.0 {
            g_l[k] = g_c;
        }
    }
    if g_l == [0.0; 3] {
        return;
    }
    let area2 = cross(verts[0], verts[1], verts[2]);
    // l_k = E_k / A with A = ΣE; dl_k/dE_m = δ_km / A - E_k / A².
    let e = f.bary.map(|l| l * area2);
    let g_area: f64 = -(0..3).map(|k| g_l[k] * e[k]).sum::<f64>() / (area2 * area2);
    let g_e = g_l.map(|g| g / area2 + g_area);
    for k in 0..3 {
        // E_k = cross(a, b, p) with a = v_{k+1}, b = v_{k+2}.
        let ia = (k + 1) % 3;
        let ib = (k + 2) % 3;
        let (a, b) = (verts[ia], verts[ib]);
        rec[ia * 3] += g_e[k] * (b[1] - px[1]);
        rec[ia * 3 + 1] += g_e[k] * (px[0] - b[0]);
        rec[ib * 3] += g_e[k] * (px[1] - a[1]);
        rec[ib * 3 + 1] += g_e[k] * (a[0] - px[0]);
    }
}

/// Silhouette of 2D vertices `[N, 2]`.
pub fn rasterize_silhouette(uv: &Tensor, faces: &[[usize; 3]], cfg: &RasterConfig) -> Result<RenderOutput> {
    let proj = with_depth(uv, None)?;
    rasterize(&proj, faces, None, cfg)
}

/// Color render of `uv: [N, 2]`, `depth: [N]`, `face_colors: [F, 3]`.
pub fn rasterize_textured(
    uv: &Tensor,
    depth: &Tensor,
    faces: &[[usize; 3]],
    face_colors: &Tensor,
    cfg: &RasterConfig,
) -> Result<RenderOutput> {
    let proj = with_depth(uv, Some(depth))?;
    rasterize(&proj, faces, Some(face_colors), cfg)
}

fn with_depth(uv: &Tensor, depth: Option<&Tensor>) -> Result<Tensor> {
    if uv.shape().len() != 2 || uv.shape()[1] != 2 {
        return Err(Error::shape("uv", &[0, 2], uv.shape()));
    }
    let n = uv.shape()[0];
    if let Some(d) = depth {
        if d.len() != n {
            return Err(Error::shape("depth", &[n], d.shape()));
        }
    }
    let data = (0..n)
        .flat_map(|i| {
            [
                uv.data()[i * 2],
                uv.data()[i * 2 + 1],
                depth.map_or(0.0, |d| d.data()[i]),
            ]
        })
        .collect();
    Tensor::new(&[n, 3], data)
}
