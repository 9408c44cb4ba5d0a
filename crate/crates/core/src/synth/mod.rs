//! Synthetic datasets with exact ground truth.
//!
//! Every instance is the template sphere displaced by a shared base shape, a
//! class archetype and a little per-instance noise, all built from the same
//! small basis of smooth, mirror-symmetric displacement fields. Images are
//! produced by the hard rasterizer so masks are exact.

pub mod dataset;
pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{self, CameraPose};
use crate::error::{Error, Result};
use crate::mesh::{Mesh, SymmetryMap, TEMPLATE_SCALE};
use crate::model::nets::Template;
use crate::renderer::RasterConfig;
use crate::tensor::Tensor;
use crate::warp;

pub use dataset::{Dataset, Keypoint, Manifest, Record};

/// Whether a property varies between classes or is shared by all of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variation {
    Shared,
    PerClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRange {
    pub azimuth_deg: [f64; 2],
    pub elevation_deg: [f64; 2],
    pub scale: [f64; 2],
    /// Translations are drawn from `[-translation, translation]²`.
    pub translation: f64,
}

impl Default for CameraRange {
    fn default() -> Self {
        Self {
            azimuth_deg: [0.0, 360.0],
            elevation_deg: [-15.0, 15.0],
            scale: [0.75, 0.9],
            translation: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub mesh_level: u32,
    pub image_size: usize,
    pub shapes: Variation,
    pub textures: Variation,
    /// Largest vertex displacement of a class archetype.
    pub archetype_magnitude: f64,
    /// Largest vertex displacement of the shape shared by every class.
    pub base_magnitude: f64,
    /// Largest vertex displacement of the per-instance perturbation.
    pub noise: f64,
    /// Archetypes closer than this (RMS over vertices) are rejected.
    pub min_archetype_distance: f64,
    pub camera: CameraRange,
    pub num_keypoints: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 4,
            train_per_class: 32,
            test_per_class: 8,
            mesh_level: 3,
            image_size: 64,
            shapes: Variation::PerClass,
            textures: Variation::Shared,
            archetype_magnitude: 0.3,
            base_magnitude: 0.6,
            noise: 0.02,
            min_archetype_distance: 0.01,
            camera: CameraRange::default(),
            num_keypoints: 12,
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.train_per_class + self.test_per_class == 0 {
            return bad("no instances requested".into());
        }
        if self.num_classes > 1 && self.shapes == Variation::Shared && self.textures == Variation::Shared {
            return bad("classes must differ in shape or texture".into());
        }
        if self.image_size < 4 {
            return bad(format!("image_size {} is too small", self.image_size));
        }
        if self.mesh_level > crate::mesh::MAX_ICOSPHERE_LEVEL {
            return bad(format!("mesh_level {} is too large", self.mesh_level));
        }
        for (name, v) in [
            ("archetype_magnitude", self.archetype_magnitude),
            ("base_magnitude", self.base_magnitude),
            ("noise", self.noise),
            ("min_archetype_distance", self.min_archetype_distance),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        let c = &self.camera;
        if !(c.scale[0] > 0.0 && c.scale[0] <= c.scale[1])
            || c.azimuth_deg[0] > c.azimuth_deg[1]
            || c.elevation_deg[0] > c.elevation_deg[1]
            || !(c.translation >= 0.0)
        {
            return bad("camera ranges must be ordered with positive scale".into());
        }
        Ok(())
    }
}

/// Smooth displacement fields on the unit sphere, each mirror-symmetric
/// across `x = 0`. Displacements are returned in template units.
#[derive(Clone, Copy, Debug)]
enum Feature {
    /// Radial Gaussian bump around `center` (mirrored if off-plane).
    Bump { center: [f64; 3], width: f64 },
    /// Stretch along one coordinate axis.
    Stretch { axis: usize },
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn basis() -> [Feature; 8] {
    [
        // Beak.
        Feature::Bump { center: unit([0.0, 0.2, 1.0]), width: 0.35 },
        // Tail.
        Feature::Bump { center: unit([0.0, 0.1, -1.0]), width: 0.45 },
        // Crest.
        Feature::Bump { center: [0.0, 1.0, 0.0], width: 0.5 },
        // Belly.
        Feature::Bump { center: [0.0, -1.0, 0.0], width: 0.6 },
        // Wings.
        Feature::Bump { center: unit([1.0, 0.1, -0.2]), width: 0.45 },
        Feature::Stretch { axis: 2 },
        Feature::Stretch { axis: 0 },
        Feature::Stretch { axis: 1 },
    ]
}

const BASE_AMPLITUDES: [f64; 8] = [1.0, 0.5, 0.4, -0.3, 0.0, 0.8, -0.4, -0.2];

impl Feature {
    fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        match *self {
            Feature::Bump { center, width } => {
                let bump = |c: [f64; 3]| {
                    let d = p[0] * c[0] + p[1] * c[1] + p[2] * c[2];
                    (-(1.0 - d) / (width * width)).exp()
                };
                let mut a = bump(center);
                if center[0] != 0.0 {
                    a += bump([-center[0], center[1], center[2]]);
                }
                [a * p[0], a * p[1], a * p[2]]
            }
            Feature::Stretch { axis } => {
                let mut d = [0.0; 3];
                d[axis] = p[axis];
                d
            }
        }
    }
}

/// Precomputed basis fields on a template, for combining archetypes.
#[derive(Clone, Debug)]
pub struct ShapeBasis {
    fields: Vec<Tensor>,
    symmetry: SymmetryMap,
}

impl ShapeBasis {
    pub fn new(mesh: &Mesh, symmetry: SymmetryMap) -> Self {
        let fields = basis()
            .iter()
            .map(|f| {
                let data = mesh
                    .vertices
                    .iter()
                    .flat_map(|&p| f.displacement(unit(p)).map(|v| v * TEMPLATE_SCALE))
                    .collect();
                Tensor::new(&[mesh.num_vertices(), 3], data).expect("shape")
            })
            .collect();
        Self { fields, symmetry }
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// `Σ aᵢ fieldᵢ` rescaled so the largest vertex displacement equals
    /// `magnitude`; returned as free rows of the symmetry map.
    pub fn combine(&self, amplitudes: &[f64], magnitude: f64) -> Tensor {
        let n = self.fields[0].len();
        let mut full = vec![0.0; n];
        for (a, f) in amplitudes.iter().zip(&self.fields) {
            for (o, v) in full.iter_mut().zip(f.data()) {
                *o += a * v;
            }
        }
        let max = full
            .chunks_exact(3)
            .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
            .fold(0.0, f64::max);
        let k = if max > 0.0 { magnitude / max } else { 0.0 };
        let full = Tensor::new(self.fields[0].shape(), full.into_iter().map(|v| v * k).collect()).expect("shape");
        self.symmetry.restrict(&full).expect("template shape")
    }
}

/// Root-mean-square vertex distance between two free deformations.
pub fn deformation_distance(symmetry: &SymmetryMap, a: &Tensor, b: &Tensor) -> Result<f64> {
    let (fa, fb) = (symmetry.expand(a)?, symmetry.expand(b)?);
    let sq: f64 = fa
        .data()
        .chunks_exact(3)
        .zip(fb.data().chunks_exact(3))
        .map(|(x, y)| (0..3).map(|i| (x[i] - y[i]).powi(2)).sum::<f64>())
        .sum();
    Ok((sq / symmetry.num_vertices() as f64).sqrt())
}

/// Ground-truth vertices: the scaled template plus a free deformation.
pub fn gt_vertices(template: &Template, free: &Tensor) -> Result<Tensor> {
    let mut v = template.symmetry.expand(free)?;
    v.add_assign(&template.mesh.vertex_tensor().scale(TEMPLATE_SCALE));
    Ok(v)
}

const PALETTE: [[f64; 3]; 2] = [[0.85, 0.6, 0.25], [0.2, 0.35, 0.8]];

/// Procedural two-color pattern evaluated at a chart coordinate.
///
/// The shared pattern is a belly band plus a patch on the upper front, which
/// makes the front distinguishable from the back. The per-class patterns are
/// latitude bands whose position depends on the class, so they stay visible
/// from every azimuth.
pub fn texture_color(textures: Variation, num_classes: usize, label: usize, uv: [f64; 2]) -> [f64; 3] {
    let [u, v] = uv;
    let second = match textures {
        Variation::Shared => v > 0.35 || (u.abs() < 0.25 && v < 0.0),
        Variation::PerClass => {
            let center = if num_classes == 1 {
                0.0
            } else {
                -0.6 + 1.2 * label as f64 / (num_classes - 1) as f64
            };
            (v - center).abs() < 0.15
        }
    };
    PALETTE[second as usize]
}

/// Farthest-point sampling of `k` vertices, starting from vertex 0.
pub fn farthest_point_sample(vertices: &[[f64; 3]], k: usize) -> Vec<usize> {
    if vertices.is_empty() || k == 0 {
        return Vec::new();
    }
    let dist = |a: [f64; 3], b: [f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let mut chosen = vec![0];
    let mut nearest: Vec<f64> = vertices.iter().map(|&v| dist(v, vertices[0])).collect();
    while chosen.len() < k.min(vertices.len()) {
        let mut best = 0;
        for (i, &d) in nearest.iter().enumerate() {
            if d > nearest[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, n) in nearest.iter_mut().enumerate() {
            *n = n.min(dist(vertices[i], vertices[best]));
        }
    }
    chosen
}

/// Class archetypes (free rows) for a validated spec.
pub fn archetypes(spec: &SynthSpec, basis: &ShapeBasis) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = basis.combine(&BASE_AMPLITUDES, spec.base_magnitude);
    let mut out = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let amps: Vec<f64> = (0..basis.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = base.clone();
        if spec.shapes == Variation::PerClass {
            a.add_assign(&basis.combine(&amps, spec.archetype_magnitude));
        }
        out.push(a);
    }
    if spec.shapes == Variation::PerClass {
        for i in 0..out.len() {
            for j in i + 1..out.len() {
                let d = deformation_distance(&basis.symmetry, &out[i], &out[j])?;
                if d <= spec.min_archetype_distance {
                    return Err(Error::Config(format!(
                        "archetypes of classes {i} and {j} collide (distance {d:.4})"
                    )));
                }
            }
        }
    }
    Ok(out)
}

/// The shape shared by every class, without archetype or noise.
pub fn base_shape(spec: &SynthSpec, basis: &ShapeBasis) -> Tensor {
    basis.combine(&BASE_AMPLITUDES, spec.base_magnitude)
}

/// Everything needed to render one instance.
#[derive(Clone, Debug)]
pub struct Instance {
    pub label: usize,
    pub camera: CameraPose,
    pub deform: Tensor,
}

/// Draws instance `index` (a global record counter) from its own RNG stream.
pub fn sample_instance(
    spec: &SynthSpec,
    basis: &ShapeBasis,
    archetypes: &[Tensor],
    label: usize,
    index: u64,
) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index + 1);
    let c = &spec.camera;
    let draw = |rng: &mut ChaCha8Rng, r: [f64; 2]| if r[0] < r[1] { rng.gen_range(r[0]..r[1]) } else { r[0] };
    let az = draw(&mut rng, c.azimuth_deg).to_radians();
    let el = draw(&mut rng, c.elevation_deg).to_radians();
    let s = draw(&mut rng, c.scale);
    let t = [
        draw(&mut rng, [-c.translation, c.translation]),
        draw(&mut rng, [-c.translation, c.translation]),
    ];
    let camera = CameraPose::from_view(az, el, s, t)?;
    let amps: Vec<f64> = (0..basis.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut deform = archetypes[label].clone();
    deform.add_assign(&basis.combine(&amps, spec.noise));
    Ok(Instance { label, camera, deform })
}

/// Rendered instance.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Tensor,
    pub mask: Tensor,
    pub keypoints: Vec<Keypoint>,
}

/// Per-vertex colors of the procedural texture.
pub fn vertex_colors(spec: &SynthSpec, template: &Template, label: usize) -> Tensor {
    let data = template
        .uv
        .data()
        .chunks_exact(2)
        .flat_map(|uv| texture_color(spec.textures, spec.num_classes, label, [uv[0], uv[1]]))
        .collect();
    Tensor::new(&[template.mesh.num_vertices(), 3], data).expect("shape")
}

/// Keypoints closer to the camera than the visible surface by at most this
/// much (in depth units) count as visible.
pub const KEYPOINT_DEPTH_TOL: f64 = 0.05;

/// Hard-renders an instance and projects its keypoint vertices.
pub fn render_instance(spec: &SynthSpec, template: &Template, inst: &Instance, keypoints: &[usize]) -> Result<Rendered> {
    let cfg = RasterConfig::with_size(spec.image_size, spec.image_size);
    let verts = gt_vertices(template, &inst.deform)?;
    let proj = camera::project(&inst.camera, &verts)?;
    let colors = warp::face_average(&vertex_colors(spec, template, inst.label), &template.faces)?;
    let hr = oracle::hard_rasterize(&proj, &template.faces, Some(&colors), &cfg);
    let visible = vertex_visibility(&proj, &hr);
    let n = spec.image_size;
    let kps = keypoints
        .iter()
        .map(|&vi| {
            let p = proj.row(vi);
            let [x, y] = ndc_to_pixel(p[0], p[1], n, n);
            Keypoint {
                vertex: vi,
                x,
                y,
                visible: visible[vi],
            }
        })
        .collect();
    Ok(Rendered {
        image: hr.image,
        mask: hr.mask,
        keypoints: kps,
    })
}

/// A projected vertex is visible when its nearest pixel is covered and the
/// vertex is not behind the visible surface there by more than
/// [`KEYPOINT_DEPTH_TOL`].
pub fn vertex_visibility(proj: &Tensor, hr: &oracle::HardRender) -> Vec<bool> {
    let (h, w) = (hr.mask.shape()[0], hr.mask.shape()[1]);
    proj.data()
        .chunks_exact(3)
        .map(|p| {
            let [x, y] = ndc_to_pixel(p[0], p[1], h, w);
            let (r, c) = (y.round(), x.round());
            if !(r >= 0.0 && c >= 0.0 && r < h as f64 && c < w as f64) {
                return false;
            }
            let i = r as usize * w + c as usize;
            hr.mask.data()[i] > 0.0 && p[2] >= hr.depth.data()[i] - KEYPOINT_DEPTH_TOL
        })
        .collect()
}

/// Continuous pixel coordinates `(x, y)` of an NDC point; pixel `(r, c)` has
/// its center at `(c, r)`.
pub fn ndc_to_pixel(u: f64, v: f64, height: usize, width: usize) -> [f64; 2] {
    [(u + 1.0) * width as f64 / 2.0 - 0.5, (1.0 - v) * height as f64 / 2.0 - 0.5]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(spec: &SynthSpec) -> (Template, ShapeBasis) {
        let t = Template::new(spec.mesh_level).unwrap();
        let b = ShapeBasis::new(&t.mesh, (*t.symmetry).clone());
        (t, b)
    }

    #[test]
    fn combine_hits_magnitude_and_is_symmetric() {
        let spec = SynthSpec {
            mesh_level: 2,
            ..SynthSpec::default()
        };
        let (t, b) = setup(&spec);
        let free = b.combine(&[0.3, -1.0, 0.2, 0.0, 0.7, 0.1, -0.4, 0.0], 0.3);
        let full = t.symmetry.expand(&free).unwrap();
        let max = full
            .data()
            .chunks_exact(3)
            .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
            .fold(0.0, f64::max);
        assert!((max - 0.3).abs() < 1e-12);
        // The basis fields are symmetric, so restricting loses nothing.
        let direct: Vec<f64> = {
            let mut acc = vec![0.0; full.len()];
            for (a, f) in [0.3, -1.0, 0.2, 0.0, 0.7, 0.1, -0.4, 0.0].iter().zip(&b.fields) {
                acc.iter_mut().zip(f.data()).for_each(|(o, v)| *o += a * v);
            }
            acc.into_iter().map(|v| v * 0.3 / max_norm(&b, &[0.3, -1.0, 0.2, 0.0, 0.7, 0.1, -0.4, 0.0])).collect()
        };
        for (x, y) in full.data().iter().zip(&direct) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    fn max_norm(b: &ShapeBasis, amps: &[f64]) -> f64 {
        let mut acc = vec![0.0; b.fields[0].len()];
        for (a, f) in amps.iter().zip(&b.fields) {
            acc.iter_mut().zip(f.data()).for_each(|(o, v)| *o += a * v);
        }
        acc.chunks_exact(3)
            .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
            .fold(0.0, f64::max)
    }

    #[test]
    fn archetypes_are_distinct_and_centroid_separable() {
        let spec = SynthSpec::default();
        let (t, b) = setup(&spec);
        let arch = archetypes(&spec, &b).unwrap();
        assert_eq!(arch.len(), 4);
        let mut idx = 0;
        for rep in 0..10 {
            for label in 0..4 {
                let inst = sample_instance(&spec, &b, &arch, label, idx).unwrap();
                idx += 1;
                let nearest = (0..4)
                    .min_by(|&i, &j| {
                        let di = deformation_distance(&t.symmetry, &inst.deform, &arch[i]).unwrap();
                        let dj = deformation_distance(&t.symmetry, &inst.deform, &arch[j]).unwrap();
                        di.total_cmp(&dj)
                    })
                    .unwrap();
                assert_eq!(nearest, label, "rep {rep}");
            }
        }
    }

    #[test]
    fn collision_is_rejected() {
        let spec = SynthSpec {
            mesh_level: 1,
            archetype_magnitude: 0.0,
            ..SynthSpec::default()
        };
        let (_, b) = setup(&spec);
        assert!(matches!(archetypes(&spec, &b), Err(Error::Config(_))));
    }

    #[test]
    fn zero_noise_shares_class_deformation() {
        let spec = SynthSpec {
            mesh_level: 1,
            noise: 0.0,
            ..SynthSpec::default()
        };
        let (_, b) = setup(&spec);
        let arch = archetypes(&spec, &b).unwrap();
        let a = sample_instance(&spec, &b, &arch, 2, 5).unwrap();
        let c = sample_instance(&spec, &b, &arch, 2, 9).unwrap();
        assert_eq!(a.deform, c.deform);
        assert_ne!(a.camera, c.camera);
    }

    #[test]
    fn fps_is_spread_and_unique() {
        let t = Template::new(3).unwrap();
        let k = farthest_point_sample(&t.mesh.vertices, 12);
        assert_eq!(k.len(), 12);
        let mut s = k.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 12);
        // Twelve optimally spread unit vectors are about 1.05 apart.
        for i in 0..12 {
            for j in i + 1..12 {
                let (a, b) = (t.mesh.vertices[k[i]], t.mesh.vertices[k[j]]);
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                assert!(d > 0.8, "{d}");
            }
        }
    }

    #[test]
    fn keypoints_land_on_their_vertices() {
        let spec = SynthSpec {
            mesh_level: 2,
            ..SynthSpec::default()
        };
        let (t, b) = setup(&spec);
        let arch = archetypes(&spec, &b).unwrap();
        let inst = sample_instance(&spec, &b, &arch, 1, 3).unwrap();
        let kp = farthest_point_sample(&t.mesh.vertices, 12);
        let r = render_instance(&spec, &t, &inst, &kp).unwrap();
        let proj = camera::project(&inst.camera, &gt_vertices(&t, &inst.deform).unwrap()).unwrap();
        let mut visible = 0;
        for k in &r.keypoints {
            let p = proj.row(k.vertex);
            let [x, y] = ndc_to_pixel(p[0], p[1], 64, 64);
            assert_eq!((x, y), (k.x, k.y));
            if k.visible {
                visible += 1;
                assert_eq!(r.mask.data()[k.y.round() as usize * 64 + k.x.round() as usize], 1.0);
            }
        }
        assert!(visible >= 3 && visible < 12, "{visible}");
    }

    #[test]
    fn ndc_pixel_centers() {
        let cfg = RasterConfig::with_size(8, 6);
        for (r, c) in [(0, 0), (7, 5), (3, 2)] {
            let [u, v] = cfg.pixel_center(r, c);
            let [x, y] = ndc_to_pixel(u, v, 8, 6);
            assert!((x - c as f64).abs() < 1e-12 && (y - r as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = SynthSpec {
            textures: Variation::PerClass,
            shapes: Variation::Shared,
            ..SynthSpec::default()
        };
        let text = toml::to_string(&spec).unwrap();
        assert_eq!(SynthSpec::from_toml(&text).unwrap(), spec);
        assert!(SynthSpec::from_toml("bogus = 1").is_err());
        assert!(SynthSpec::from_toml("num_classes = 0").is_err());
    }
}
