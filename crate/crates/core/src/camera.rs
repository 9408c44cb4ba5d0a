//! Weak-perspective cameras with quaternion rotation.
//!
//! Quaternions are `(w, x, y, z)`, right-handed, acting on column vectors.
//! The camera looks down `-z` after rotation, so larger depth is nearer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Quat = [f64; 4];

/// Number of trainable scalars per pose: `log s, tx, ty, qw, qx, qy, qz`.
pub const POSE_DIM: usize = 7;

pub const DEFAULT_MULTIPLEX_SCALE: f64 = 0.9;
pub const DEFAULT_RIG_ELEVATION_DEG: f64 = 20.0;

const MIN_QUAT_NORM: f64 = 1e-12;

/// Weak-perspective pose. Scale is stored as `log s` so it stays positive
/// under unconstrained updates; the rotation may be stored unnormalized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub log_scale: f64,
    pub translation: [f64; 2],
    pub rotation: Quat,
}

impl CameraPose {
    pub fn new(scale: f64, translation: [f64; 2], rotation: Quat) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument(format!("camera scale {scale} must be positive")));
        }
        Ok(Self {
            log_scale: scale.ln(),
            translation,
            rotation,
        })
    }

    pub fn identity() -> Self {
        Self {
            log_scale: 0.0,
            translation: [0.0, 0.0],
            rotation: [1.0, 0.0, 0.0, 0.0],
        }
    }

    /// Rotation by `azimuth` about `y` followed by `elevation` about `x` (radians).
    pub fn from_view(azimuth: f64, elevation: f64, scale: f64, translation: [f64; 2]) -> Result<Self> {
        let qa = [(azimuth / 2.0).cos(), 0.0, (azimuth / 2.0).sin(), 0.0];
        let qe = [(elevation / 2.0).cos(), (elevation / 2.0).sin(), 0.0, 0.0];
        Self::new(scale, translation, quat_mul(qe, qa))
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    /// Internal parameter vector `[log s, tx, ty, w, x, y, z]`.
    pub fn to_params(&self) -> [f64; POSE_DIM] {
        let [w, x, y, z] = self.rotation;
        [self.log_scale, self.translation[0], self.translation[1], w, x, y, z]
    }

    pub fn from_params(p: &[f64]) -> Self {
        Self {
            log_scale: p[0],
            translation: [p[1], p[2]],
            rotation: [p[3], p[4], p[5], p[6]],
        }
    }

    /// Serialized form `(s, tx, ty, w, x, y, z)`.
    pub fn to_seven(&self) -> [f64; 7] {
        let mut p = self.to_params();
        p[0] = self.scale();
        p
    }

    pub fn from_seven(v: &[f64]) -> Result<Self> {
        if v.len() != 7 {
            return Err(Error::InvalidArgument(format!("pose needs 7 numbers, got {}", v.len())));
        }
        Self::new(v[0], [v[1], v[2]], [v[3], v[4], v[5], v[6]])
    }

    pub fn unit_rotation(&self) -> Result<Quat> {
        normalize_quaternion(self.rotation)
    }
}

/// Unit quaternion in the direction of `q`.
pub fn normalize_quaternion(q: Quat) -> Result<Quat> {
    let n = quat_norm(q);
    if !(n > MIN_QUAT_NORM) {
        return Err(Error::DegenerateRotation(n));
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Vector-Jacobian product of normalization: `(I - q̂q̂ᵀ) g / ‖q‖`.
pub fn normalize_quaternion_vjp(q: Quat, g: Quat) -> Result<Quat> {
    let n = quat_norm(q);
    let u = normalize_quaternion(q)?;
    let d: f64 = (0..4).map(|i| u[i] * g[i]).sum();
    Ok([
        (g[0] - u[0] * d) / n,
        (g[1] - u[1] * d) / n,
        (g[2] - u[2] * d) / n,
        (g[3] - u[3] * d) / n,
    ])
}

pub fn quat_norm(q: Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Hamilton product `a ⊗ b` (apply `b` first, then `a`).
pub fn quat_mul(a: Quat, b: Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Geodesic angle between two rotations, `2·acos(|⟨q1, q2⟩|)`; `q` and `-q` coincide.
pub fn geodesic_angle(a: Quat, b: Quat) -> Result<f64> {
    let (a, b) = (normalize_quaternion(a)?, normalize_quaternion(b)?);
    let d: f64 = (0..4).map(|i| a[i] * b[i]).sum();
    Ok(2.0 * d.abs().min(1.0).acos())
}

pub fn rotation_matrix(q: Quat) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Pulls a gradient on the rotation matrix back to the (unit) quaternion.
fn rotation_matrix_vjp(q: Quat, g: &[[f64; 3]; 3]) -> Quat {
    let [w, x, y, z] = q;
    let dw = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let dx = [[0.0, y, z], [y, -2.0 * x, -w], [z, w, -2.0 * x]];
    let dy = [[-2.0 * y, x, w], [x, 0.0, z], [-w, z, -2.0 * y]];
    let dz = [[-2.0 * z, -w, x], [w, -2.0 * z, y], [x, y, 0.0]];
    let contract = |d: [[f64; 3]; 3]| -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += g[i][j] * d[i][j];
            }
        }
        2.0 * s
    };
    [contract(dw), contract(dx), contract(dy), contract(dz)]
}

/// Rotates `[N, 3]` points by a unit quaternion.
pub fn rotate(q: Quat, points: &Tensor) -> Result<Tensor> {
    check_points(points)?;
    let r = rotation_matrix(q);
    let data = points
        .data()
        .chunks_exact(3)
        .flat_map(|p| {
            [
                r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
                r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
                r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
            ]
        })
        .collect();
    Tensor::new(points.shape(), data)
}

fn check_points(points: &Tensor) -> Result<()> {
    if points.shape().len() != 2 || points.shape()[1] != 3 {
        return Err(Error::shape("points", &[0, 3], points.shape()));
    }
    Ok(())
}

/// Projects `[N, 3]` vertices to `[N, 3]` rows of `(u, v, depth)`.
///
/// `p' = R(r̂) p`, `(u, v) = s·(p'_x, p'_y) + t`, `depth = p'_z`.
pub fn project(pose: &CameraPose, vertices: &Tensor) -> Result<Tensor> {
    check_points(vertices)?;
    let q = pose.unit_rotation()?;
    let r = rotation_matrix(q);
    let s = pose.scale();
    let t = pose.translation;
    let data = vertices
        .data()
        .chunks_exact(3)
        .flat_map(|p| {
            let x = r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2];
            let y = r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2];
            let z = r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2];
            [s * x + t[0], s * y + t[1], z]
        })
        .collect();
    Tensor::new(vertices.shape(), data)
}

/// Splits a projection into `uv: [N, 2]` and `depth: [N]`.
pub fn split_projection(proj: &Tensor) -> (Tensor, Tensor) {
    let n = proj.shape()[0];
    let mut uv = Vec::with_capacity(2 * n);
    let mut depth = Vec::with_capacity(n);
    for r in proj.data().chunks_exact(3) {
        uv.extend_from_slice(&r[..2]);
        depth.push(r[2]);
    }
    (
        Tensor::new(&[n, 2], uv).expect("shape"),
        Tensor::new(&[n], depth).expect("shape"),
    )
}

/// Gradients of [`project`] w.r.t. the 7 pose parameters and the vertices.
pub fn project_backward(
    pose: &CameraPose,
    vertices: &Tensor,
    grad: &Tensor,
) -> Result<([f64; POSE_DIM], Tensor)> {
    check_points(vertices)?;
    grad.expect_shape("project_backward", vertices.shape())?;
    let q = pose.unit_rotation()?;
    let r = rotation_matrix(q);
    let s = pose.scale();
    let mut g_pose = [0.0; POSE_DIM];
    let mut g_r = [[0.0; 3]; 3];
    let mut g_v = Vec::with_capacity(vertices.len());
    for (p, g) in vertices.data().chunks_exact(3).zip(grad.data().chunks_exact(3)) {
        let x = r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2];
        let y = r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2];
        g_pose[0] += s * (g[0] * x + g[1] * y);
        g_pose[1] += g[0];
        g_pose[2] += g[1];
        // Gradient on the rotated point.
        let gp = [s * g[0], s * g[1], g[2]];
        for i in 0..3 {
            for j in 0..3 {
                g_r[i][j] += gp[i] * p[j];
            }
        }
        for j in 0..3 {
            g_v.push(r[0][j] * gp[0] + r[1][j] * gp[1] + r[2][j] * gp[2]);
        }
    }
    let g_unit = rotation_matrix_vjp(q, &g_r);
    let g_q = normalize_quaternion_vjp(pose.rotation, g_unit)?;
    g_pose[3..].copy_from_slice(&g_q);
    Ok((g_pose, Tensor::new(vertices.shape(), g_v)?))
}

/// Per-instance set of camera hypotheses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraMultiplex {
    pub hypotheses: Vec<CameraPose>,
}

impl CameraMultiplex {
    /// Rig of `m` cameras with evenly spaced azimuths starting at 0 and
    /// elevations alternating `+20°`, `-20°`. `jitter_deg` perturbs
    /// azimuths uniformly within `±jitter_deg` using `seed`.
    pub fn init(m: usize, seed: u64, jitter_deg: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("multiplex needs at least one camera".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hypotheses = (0..m)
            .map(|i| {
                let jitter = if jitter_deg > 0.0 {
                    rng.gen_range(-jitter_deg..jitter_deg)
                } else {
                    0.0
                };
                let az = (360.0 * i as f64 / m as f64 + jitter).to_radians();
                let el = if i % 2 == 0 {
                    DEFAULT_RIG_ELEVATION_DEG
                } else {
                    -DEFAULT_RIG_ELEVATION_DEG
                }
                .to_radians();
                CameraPose::from_view(az, el, DEFAULT_MULTIPLEX_SCALE, [0.0, 0.0])
            })
            .collect::<Result<_>>()?;
        Ok(Self { hypotheses })
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    /// Packs all hypotheses into an `[M, 7]` parameter tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.hypotheses.iter().flat_map(|h| h.to_params()).collect();
        Tensor::new(&[self.len(), POSE_DIM], data).expect("shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[1] != POSE_DIM || t.shape()[0] == 0 {
            return Err(Error::shape("multiplex", &[1, POSE_DIM], t.shape()));
        }
        Ok(Self {
            hypotheses: t.data().chunks_exact(POSE_DIM).map(CameraPose::from_params).collect(),
        })
    }
}
