//! Template mesh topology, mirror symmetry and the graph Laplacian.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_ICOSPHERE_LEVEL: u32 = 6;

/// Scale applied to the unit icosphere to form the initial template.
pub const TEMPLATE_SCALE: f64 = 0.8;

/// Triangle mesh with fixed connectivity.
///
/// Faces are counter-clockwise when seen from outside.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Self { vertices, faces };
        for (fi, f) in mesh.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= mesh.vertices.len()) {
                return Err(Error::DegenerateMesh(format!(
                    "face {fi} references a vertex out of range"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::DegenerateMesh(format!("face {fi} repeats a vertex")));
            }
        }
        Ok(mesh)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Unique undirected edges, each as `(lo, hi)`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                set.insert((a.min(b), a.max(b)));
            }
        }
        set.into_iter().collect()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.num_vertices() as i64 - self.edges().len() as i64 + self.num_faces() as i64
    }

    /// True when every edge is shared by exactly two faces.
    pub fn is_closed_manifold(&self) -> bool {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().all(|&c| c == 2)
    }

    /// Vertex neighbor lists in ascending index order.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_vertices()];
        for (a, b) in self.edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        for n in &mut adj {
            n.sort_unstable();
        }
        adj
    }

    pub fn vertex_tensor(&self) -> Tensor {
        let data = self.vertices.iter().flat_map(|v| v.iter().copied()).collect();
        Tensor::new(&[self.num_vertices(), 3], data).expect("consistent shape")
    }

    pub fn with_vertices(&self, vertices: &Tensor) -> Result<Mesh> {
        vertices.expect_shape("with_vertices", &[self.num_vertices(), 3])?;
        let vertices = vertices
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok(Mesh {
            vertices,
            faces: self.faces.clone(),
        })
    }

    pub fn scaled(&self, k: f64) -> Mesh {
        Mesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| [v[0] * k, v[1] * k, v[2] * k])
                .collect(),
            faces: self.faces.clone(),
        }
    }
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn icosahedron() -> Mesh {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut raw = Vec::with_capacity(12);
    for &a in &[-1.0, 1.0] {
        for &b in &[-phi, phi] {
            raw.push([0.0, a, b]);
            raw.push([a, b, 0.0]);
            raw.push([b, 0.0, a]);
        }
    }
    // Adjacent vertices of this icosahedron are exactly distance 2 apart.
    let adjacent = |i: usize, j: usize| {
        let d: f64 = (0..3).map(|k| (raw[i][k] - raw[j][k]).powi(2)).sum();
        (d - 4.0).abs() < 1e-9
    };
    let mut faces = Vec::with_capacity(20);
    for i in 0..12 {
        for j in i + 1..12 {
            for k in j + 1..12 {
                if adjacent(i, j) && adjacent(j, k) && adjacent(i, k) {
                    let (a, b, c) = (raw[i], raw[j], raw[k]);
                    let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                    let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
                    let n = [
                        e1[1] * e2[2] - e1[2] * e2[1],
                        e1[2] * e2[0] - e1[0] * e2[2],
                        e1[0] * e2[1] - e1[1] * e2[0],
                    ];
                    let outward = n[0] * (a[0] + b[0] + c[0])
                        + n[1] * (a[1] + b[1] + c[1])
                        + n[2] * (a[2] + b[2] + c[2])
                        > 0.0;
                    faces.push(if outward { [i, j, k] } else { [i, k, j] });
                }
            }
        }
    }
    Mesh {
        vertices: raw.into_iter().map(normalize3).collect(),
        faces,
    }
}

/// Unit icosphere obtained by `level` rounds of 4-to-1 subdivision.
///
/// The base icosahedron uses the cyclic permutations of `(0, ±1, ±φ)`, so the
/// vertex set is exactly invariant under `x → -x` at every level.
pub fn icosphere(level: u32) -> Result<Mesh> {
    if level > MAX_ICOSPHERE_LEVEL {
        return Err(Error::InvalidArgument(format!(
            "icosphere level {level} outside 0..={MAX_ICOSPHERE_LEVEL}"
        )));
    }
    let mut mesh = icosahedron();
    for _ in 0..level {
        mesh = subdivide(&mesh);
    }
    Ok(mesh)
}

fn subdivide(mesh: &Mesh) -> Mesh {
    let mut vertices = mesh.vertices.clone();
    let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
    let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<[f64; 3]>| -> usize {
        let key = (a.min(b), a.max(b));
        *cache.entry(key).or_insert_with(|| {
            let (p, q) = (vertices[key.0], vertices[key.1]);
            vertices.push(normalize3([
                (p[0] + q[0]) * 0.5,
                (p[1] + q[1]) * 0.5,
                (p[2] + q[2]) * 0.5,
            ]));
            vertices.len() - 1
        })
    };
    let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
    for &[a, b, c] in &mesh.faces {
        let ab = midpoint(a, b, &mut vertices);
        let bc = midpoint(b, c, &mut vertices);
        let ca = midpoint(c, a, &mut vertices);
        faces.push([a, ab, ca]);
        faces.push([b, bc, ab]);
        faces.push([c, ca, bc]);
        faces.push([ab, bc, ca]);
    }
    Mesh { vertices, faces }
}

/// Mirror pairing of template vertices across the `x = 0` plane.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetryMap {
    /// `(primary, mirror)` with `primary < mirror`, ordered by `primary`.
    pub pairs: Vec<(usize, usize)>,
    /// Vertices lying on the plane, ascending.
    pub fixed: Vec<usize>,
    num_vertices: usize,
}

const SYMMETRY_TOL: f64 = 1e-6;

impl SymmetryMap {
    /// Matches every vertex with its reflection across `x = 0`.
    pub fn build(mesh: &Mesh) -> Result<Self> {
        let cell = |v: f64| (v / SYMMETRY_TOL / 10.0).round() as i64;
        let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, v) in mesh.vertices.iter().enumerate() {
            grid.entry((cell(v[0]), cell(v[1]), cell(v[2])))
                .or_default()
                .push(i);
        }
        let mut partner = vec![usize::MAX; mesh.num_vertices()];
        for (i, v) in mesh.vertices.iter().enumerate() {
            let r = [-v[0], v[1], v[2]];
            let key = (cell(r[0]), cell(r[1]), cell(r[2]));
            let mut best: Option<(f64, usize)> = None;
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(list) = grid.get(&(key.0 + dx, key.1 + dy, key.2 + dz)) else {
                            continue;
                        };
                        for &j in list {
                            let w = mesh.vertices[j];
                            let d = ((w[0] - r[0]).powi(2)
                                + (w[1] - r[1]).powi(2)
                                + (w[2] - r[2]).powi(2))
                            .sqrt();
                            if d <= SYMMETRY_TOL && best.is_none_or(|(bd, _)| d < bd) {
                                best = Some((d, j));
                            }
                        }
                    }
                }
            }
            partner[i] = best.ok_or(Error::SymmetryViolation { vertex: i })?.1;
        }
        let mut pairs = Vec::new();
        let mut fixed = Vec::new();
        for (i, &j) in partner.iter().enumerate() {
            if partner[j] != i {
                return Err(Error::SymmetryViolation { vertex: i });
            }
            match i.cmp(&j) {
                std::cmp::Ordering::Equal => fixed.push(i),
                std::cmp::Ordering::Less => pairs.push((i, j)),
                std::cmp::Ordering::Greater => {}
            }
        }
        Ok(Self {
            pairs,
            fixed,
            num_vertices: mesh.num_vertices(),
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    /// Number of free deformation rows: one per pair plus one per fixed vertex.
    pub fn num_free(&self) -> usize {
        self.pairs.len() + self.fixed.len()
    }

    /// Mirror partner of every vertex (fixed vertices map to themselves).
    pub fn partner(&self) -> Vec<usize> {
        let mut p: Vec<usize> = (0..self.num_vertices).collect();
        for &(a, b) in &self.pairs {
            p[a] = b;
            p[b] = a;
        }
        p
    }

    /// Expands free rows `[num_free, 3]` to a mirror-symmetric `[V, 3]` field.
    pub fn expand(&self, free: &Tensor) -> Result<Tensor> {
        if free.shape() != [self.num_free(), 3] {
            return Err(Error::InvalidArgument(format!(
                "free deformation has shape {:?}, expected [{}, 3]",
                free.shape(),
                self.num_free()
            )));
        }
        let f = free.data();
        let mut out = vec![0.0; self.num_vertices * 3];
        for (k, &(a, b)) in self.pairs.iter().enumerate() {
            let r = &f[k * 3..k * 3 + 3];
            out[a * 3..a * 3 + 3].copy_from_slice(r);
            out[b * 3] = -r[0];
            out[b * 3 + 1] = r[1];
            out[b * 3 + 2] = r[2];
        }
        let base = self.pairs.len();
        for (k, &v) in self.fixed.iter().enumerate() {
            let r = &f[(base + k) * 3..(base + k) * 3 + 3];
            out[v * 3 + 1] = r[1];
            out[v * 3 + 2] = r[2];
        }
        Tensor::new(&[self.num_vertices, 3], out)
    }

    /// Adjoint of [`expand`](Self::expand): maps a `[V, 3]` gradient back to free rows.
    pub fn expand_adjoint(&self, grad_full: &Tensor) -> Result<Tensor> {
        grad_full.expect_shape("expand_adjoint", &[self.num_vertices, 3])?;
        let g = grad_full.data();
        let mut out = vec![0.0; self.num_free() * 3];
        for (k, &(a, b)) in self.pairs.iter().enumerate() {
            out[k * 3] = g[a * 3] - g[b * 3];
            out[k * 3 + 1] = g[a * 3 + 1] + g[b * 3 + 1];
            out[k * 3 + 2] = g[a * 3 + 2] + g[b * 3 + 2];
        }
        let base = self.pairs.len();
        for (k, &v) in self.fixed.iter().enumerate() {
            out[(base + k) * 3 + 1] = g[v * 3 + 1];
            out[(base + k) * 3 + 2] = g[v * 3 + 2];
        }
        Tensor::new(&[self.num_free(), 3], out)
    }

    /// Extracts free rows from a full field (inverse of `expand` on symmetric fields).
    pub fn restrict(&self, full: &Tensor) -> Result<Tensor> {
        full.expect_shape("restrict", &[self.num_vertices, 3])?;
        let g = full.data();
        let mut out = Vec::with_capacity(self.num_free() * 3);
        for &(a, _) in &self.pairs {
            out.extend_from_slice(&g[a * 3..a * 3 + 3]);
        }
        for &v in &self.fixed {
            out.extend_from_slice(&[0.0, g[v * 3 + 1], g[v * 3 + 2]]);
        }
        Tensor::new(&[self.num_free(), 3], out)
    }
}

/// Uniform graph Laplacian in CSR form: row `i` is `1` on the diagonal and
/// `-1/deg(i)` on each neighbor.
#[derive(Clone, Debug, PartialEq)]
pub struct Laplacian {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Laplacian {
    pub fn build(mesh: &Mesh) -> Result<Self> {
        let adj = mesh.adjacency();
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for (i, nbrs) in adj.iter().enumerate() {
            if nbrs.is_empty() {
                return Err(Error::DegenerateMesh(format!("vertex {i} is isolated")));
            }
            let w = -1.0 / nbrs.len() as f64;
            // Column order ascending, diagonal in place.
            let mut entries: Vec<(usize, f64)> = nbrs.iter().map(|&j| (j, w)).collect();
            entries.push((i, 1.0));
            entries.sort_by_key(|e| e.0);
            for (j, v) in entries {
                cols.push(j);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            n: mesh.num_vertices(),
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// `(column, value)` entries of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()]
            .iter()
            .copied()
            .zip(self.vals[r].iter().copied())
    }

    /// `L · X` for `X` of shape `[n, k]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[0] != self.n {
            return Err(Error::shape("laplacian", &[self.n, 3], x.shape()));
        }
        let k = x.shape()[1];
        let xd = x.data();
        let mut out = vec![0.0; self.n * k];
        for i in 0..self.n {
            for (j, w) in self.row(i) {
                for c in 0..k {
                    out[i * k + c] += w * xd[j * k + c];
                }
            }
        }
        Tensor::new(&[self.n, k], out)
    }

    /// `Lᵀ · X`.
    pub fn apply_transpose(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[0] != self.n {
            return Err(Error::shape("laplacian_t", &[self.n, 3], x.shape()));
        }
        let k = x.shape()[1];
        let xd = x.data();
        let mut out = vec![0.0; self.n * k];
        for i in 0..self.n {
            for (j, w) in self.row(i) {
                for c in 0..k {
                    out[j * k + c] += w * xd[i * k + c];
                }
            }
        }
        Tensor::new(&[self.n, k], out)
    }
}

/// Template plus free symmetric deformation.
#[derive(Clone, Debug)]
pub struct ShapeState {
    pub template: Tensor,
    pub free_deform: Tensor,
}

impl ShapeState {
    pub fn full_deform(&self, sym: &SymmetryMap) -> Result<Tensor> {
        sym.expand(&self.free_deform)
    }

    /// `V = V̄ + ΔV`.
    pub fn compose(&self, sym: &SymmetryMap) -> Result<Tensor> {
        let mut v = self.full_deform(sym)?;
        if v.shape() != self.template.shape() {
            return Err(Error::shape("compose", self.template.shape(), v.shape()));
        }
        v.add_assign(&self.template);
        Ok(v)
    }
}

/// Writes vertices and 1-based faces as ASCII OBJ.
pub fn obj_string(vertices: &Tensor, faces: &[[usize; 3]]) -> String {
    let mut s = String::new();
    for v in vertices.data().chunks_exact(3) {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn write_obj(path: &Path, vertices: &Tensor, faces: &[[usize; 3]]) -> Result<()> {
    std::fs::write(path, obj_string(vertices, faces)).map_err(|e| Error::io(path, e))
}

/// Reads `v`/`f` records of an OBJ file; other records are ignored.
pub fn read_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::InvalidArgument(format!("{}:{line}: malformed OBJ record", path.display()));
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.map(|t| t.parse().map_err(|_| bad(ln + 1))).collect::<Result<_>>()?;
                if c.len() < 3 {
                    return Err(bad(ln + 1));
                }
                vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| {
                        t.split('/')
                            .next()
                            .and_then(|s| s.parse::<usize>().ok())
                            .filter(|&i| i > 0)
                            .map(|i| i - 1)
                            .ok_or_else(|| bad(ln + 1))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(bad(ln + 1));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    Mesh::new(vertices, faces)
}
