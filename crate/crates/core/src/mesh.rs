//! Fixed-connectivity triangle meshes, OBJ I/O and edge weights.
//!
//! Vertex data is always flattened vertex-major: vertex `i` occupies slots
//! `3i..3i+3` of a [`VertexField`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::{Add, Index, Mul, Sub};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::sparse::CsrMatrix;

/// Flat per-vertex 3D vector field of length `3n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VertexField(Vec<f64>);

impl VertexField {
    pub fn zeros(n_vertices: usize) -> Self {
        Self(vec![0.0; 3 * n_vertices])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        assert!(
            values.len().is_multiple_of(3),
            "field length {} is not a multiple of 3",
            values.len()
        );
        Self(values)
    }

    pub fn from_points(points: &[Vector3<f64>]) -> Self {
        Self(points.iter().flat_map(|p| [p.x, p.y, p.z]).collect())
    }

    pub fn from_fn(n_vertices: usize, mut f: impl FnMut(usize) -> Vector3<f64>) -> Self {
        Self(
            (0..n_vertices)
                .flat_map(|i| {
                    let p = f(i);
                    [p.x, p.y, p.z]
                })
                .collect(),
        )
    }

    pub fn n_vertices(&self) -> usize {
        self.0.len() / 3
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn vertex(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.0[3 * i], self.0[3 * i + 1], self.0[3 * i + 2])
    }

    pub fn set_vertex(&mut self, i: usize, v: Vector3<f64>) {
        self.0[3 * i..3 * i + 3].copy_from_slice(v.as_slice());
    }

    pub fn add_to_vertex(&mut self, i: usize, v: Vector3<f64>) {
        self.0[3 * i] += v.x;
        self.0[3 * i + 1] += v.y;
        self.0[3 * i + 2] += v.z;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub fn points(&self) -> Vec<Vector3<f64>> {
        (0..self.n_vertices()).map(|i| self.vertex(i)).collect()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.iter().map(|v| v * s).collect())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }
}

impl From<DVector<f64>> for VertexField {
    fn from(v: DVector<f64>) -> Self {
        Self::from_vec(v.as_slice().to_vec())
    }
}

impl Index<usize> for VertexField {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Add for &VertexField {
    type Output = VertexField;
    fn add(self, rhs: Self) -> VertexField {
        VertexField(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &VertexField {
    type Output = VertexField;
    fn sub(self, rhs: Self) -> VertexField {
        VertexField(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

impl Mul<f64> for &VertexField {
    type Output = VertexField;
    fn mul(self, s: f64) -> VertexField {
        self.scale(s)
    }
}

/// Connectivity and weights shared between meshes of one family.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n_vertices: usize,
    faces: Vec<[usize; 3]>,
    edges: Vec<(usize, usize)>,
    weights: Vec<f64>,
    /// `(neighbor, edge index)` per vertex, sorted by neighbor.
    neighbors: Vec<Vec<(usize, usize)>>,
}

impl Topology {
    fn build(n_vertices: usize, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mut edge_set = BTreeMap::new();
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= n_vertices {
                    return Err(Error::Topology(format!(
                        "face {fi} references vertex {v} but the mesh has {n_vertices}"
                    )));
                }
            }
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                if a != b {
                    edge_set.insert((a.min(b), a.max(b)), ());
                }
            }
        }
        let edges: Vec<_> = edge_set.into_keys().collect();
        let mut neighbors = vec![Vec::new(); n_vertices];
        for (e, &(i, j)) in edges.iter().enumerate() {
            neighbors[i].push((j, e));
            neighbors[j].push((i, e));
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let topo = Self {
            n_vertices,
            faces,
            weights: vec![1.0; edges.len()],
            edges,
            neighbors,
        };
        topo.check_connected()?;
        Ok(topo)
    }

    fn check_connected(&self) -> Result<()> {
        if self.n_vertices == 0 {
            return Err(Error::Topology("mesh has no vertices".into()));
        }
        let mut seen = vec![false; self.n_vertices];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &(u, _) in &self.neighbors[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
        if count != self.n_vertices {
            return Err(Error::Topology(format!(
                "edge graph is disconnected: {count} of {} vertices reachable from vertex 0",
                self.n_vertices
            )));
        }
        Ok(())
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Directed one-ring of `i` as `(neighbor, weight)` pairs.
    pub fn ring(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.neighbors[i].iter().map(|&(j, e)| (j, self.weights[e]))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Weighted graph Laplacian: `L_ii = Σ_k w_ik`, `L_ij = −w_ij`.
    pub fn laplacian(&self) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(self.n_vertices + 2 * self.edges.len());
        for i in 0..self.n_vertices {
            let diag: f64 = self.ring(i).map(|(_, w)| w).sum();
            triplets.push((i, i, diag));
        }
        for (&(i, j), &w) in self.edges.iter().zip(&self.weights) {
            triplets.push((i, j, -w));
            triplets.push((j, i, -w));
        }
        CsrMatrix::from_triplets(self.n_vertices, self.n_vertices, &triplets)
    }
}

/// Triangle mesh with positions and shared, immutable connectivity.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vector3<f64>>,
    topology: Arc<Topology>,
}

impl Mesh {
    /// Builds a mesh with uniform unit weights. Rejects out-of-range face
    /// indices and disconnected edge graphs.
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let topology = Topology::build(vertices.len(), faces)?;
        Ok(Self {
            vertices,
            topology: Arc::new(topology),
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        self.topology.faces()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        self.topology.edges()
    }

    pub fn weights(&self) -> &[f64] {
        self.topology.weights()
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn positions(&self) -> VertexField {
        VertexField::from_points(&self.vertices)
    }

    /// Same connectivity, new positions.
    pub fn with_positions(&self, g: &VertexField) -> Result<Self> {
        check_len("vertex positions", 3 * self.n_vertices(), g.len())?;
        Ok(Self {
            vertices: g.points(),
            topology: Arc::clone(&self.topology),
        })
    }

    pub fn shares_connectivity(&self, other: &Mesh) -> bool {
        Arc::ptr_eq(&self.topology, &other.topology)
            || (self.n_vertices() == other.n_vertices() && self.faces() == other.faces())
    }

    /// Replaces per-edge weights. Weights must be finite and non-negative.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        check_len("edge weights", self.edges().len(), weights.len())?;
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Invalid(format!("edge weight {w} must be finite and >= 0")));
        }
        let mut topo = (*self.topology).clone();
        topo.weights = weights;
        Ok(Self {
            vertices: self.vertices.clone(),
            topology: Arc::new(topo),
        })
    }

    pub fn graph_laplacian(&self) -> CsrMatrix {
        self.topology.laplacian()
    }

    /// Copy of the mesh carrying clamped cotangent weights
    /// `w_ij = max(0, ½ Σ cot)` over the triangles adjacent to each edge.
    pub fn cotangent_weights(&self) -> Result<Self> {
        let mut acc = vec![0.0; self.edges().len()];
        let index: BTreeMap<(usize, usize), usize> = self.edges().iter().enumerate().map(|(e, &ij)| (ij, e)).collect();
        for (fi, f) in self.faces().iter().enumerate() {
            let p = [self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]];
            let doubled_area = (p[1] - p[0]).cross(&(p[2] - p[0])).norm();
            let scale = (p[1] - p[0]).norm_squared().max((p[2] - p[0]).norm_squared());
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] || doubled_area <= 1e-14 * scale {
                return Err(Error::DegenerateFace { face: fi });
            }
            for corner in 0..3 {
                let (a, b) = (f[(corner + 1) % 3], f[(corner + 2) % 3]);
                let u = self.vertices[a] - self.vertices[f[corner]];
                let v = self.vertices[b] - self.vertices[f[corner]];
                let cot = u.dot(&v) / u.cross(&v).norm();
                acc[index[&(a.min(b), a.max(b))]] += 0.5 * cot;
            }
        }
        self.with_weights(acc.into_iter().map(|w: f64| w.max(0.0)).collect())
    }

    pub fn load_obj(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        parse_obj(&text, path)
    }

    /// Writes `v`/`f` records with 17 significant digits.
    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_obj_string())?;
        Ok(())
    }

    pub fn to_obj_string(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {:.16e} {:.16e} {:.16e}", v.x, v.y, v.z);
        }
        for f in self.faces() {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        out
    }
}

fn parse_obj(text: &str, path: &Path) -> Result<Mesh> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut vertices = Vec::new();
    let mut raw_faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        let Some(tag) = tokens.next() else { continue };
        match tag {
            "v" => {
                let coords: Vec<f64> = tokens
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|e| err(lineno, format!("bad coordinate {t:?}: {e}")))
                    })
                    .collect::<Result<_>>()?;
                // a 4th homogeneous weight is legal OBJ but unused here
                if coords.len() != 3 && coords.len() != 4 {
                    return Err(err(lineno, format!("vertex has {} coordinates", coords.len())));
                }
                if coords.iter().any(|c| !c.is_finite()) {
                    return Err(err(lineno, "non-finite coordinate".into()));
                }
                vertices.push(Vector3::new(coords[0], coords[1], coords[2]));
            }
            "f" => {
                let idx: Vec<usize> = tokens
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        match head.parse::<usize>() {
                            Ok(0) => Err(err(lineno, "face index 0 (OBJ indices are 1-based)".into())),
                            Ok(i) => Ok(i - 1),
                            Err(e) => Err(err(lineno, format!("bad face index {t:?}: {e}"))),
                        }
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(err(lineno, format!("face has {} vertices, expected 3", idx.len())));
                }
                raw_faces.push((lineno, [idx[0], idx[1], idx[2]]));
            }
            other => log::warn!("{}:{lineno}: ignoring OBJ record {other:?}", path.display()),
        }
    }
    for &(lineno, f) in &raw_faces {
        if let Some(&bad) = f.iter().find(|&&i| i >= vertices.len()) {
            return Err(err(
                lineno,
                format!("face index {} out of range (1..={})", bad + 1, vertices.len()),
            ));
        }
    }
    Mesh::new(vertices, raw_faces.into_iter().map(|(_, f)| f).collect())
}

/// Regular tetrahedron centered at the origin.
pub fn tetrahedron() -> Mesh {
    let v = vec![
        Vector3::new(1.0, 1.0, 1.0),
        Vector3::new(1.0, -1.0, -1.0),
        Vector3::new(-1.0, 1.0, -1.0),
        Vector3::new(-1.0, -1.0, 1.0),
    ];
    Mesh::new(v, vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]).expect("valid tetrahedron")
}

/// Open cylinder with `rings` circles of `per_ring` vertices.
pub fn cylinder(rings: usize, per_ring: usize, radius: f64, height: f64) -> Mesh {
    assert!(rings >= 2 && per_ring >= 3);
    let mut v = Vec::with_capacity(rings * per_ring);
    for r in 0..rings {
        let y = height * (r as f64 / (rings - 1) as f64 - 0.5);
        for k in 0..per_ring {
            let phi = std::f64::consts::TAU * k as f64 / per_ring as f64;
            v.push(Vector3::new(radius * phi.cos(), y, radius * phi.sin()));
        }
    }
    Mesh::new(v, tube_faces(rings, per_ring)).expect("valid cylinder")
}

/// Faces of a tube grid with ring-major vertex numbering.
pub fn tube_faces(rings: usize, per_ring: usize) -> Vec<[usize; 3]> {
    let mut faces = Vec::with_capacity(2 * (rings - 1) * per_ring);
    for r in 0..rings - 1 {
        for k in 0..per_ring {
            let a = r * per_ring + k;
            let b = r * per_ring + (k + 1) % per_ring;
            let c = (r + 1) * per_ring + k;
            let d = (r + 1) * per_ring + (k + 1) % per_ring;
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    faces
}
