//! Triangle mesh with per-face normals, degenerate-face filtering and a
//! watertightness flag (required for a signed SDF).

use super::GeometryError;
use nalgebra::Vector3;
use std::collections::HashMap;

/// Faces with twice-area below this are dropped at load time.
const DEGENERATE_AREA: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
    face_normals: Vec<Vector3<f64>>,
    face_areas: Vec<f64>,
    watertight: bool,
    dropped_faces: usize,
}

impl Mesh {
    /// Validates indices, filters zero-area faces and computes face data.
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<[u32; 3]>,
    ) -> Result<Self, GeometryError> {
        let n = vertices.len() as u32;
        if vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(GeometryError::Parse("non-finite vertex".into()));
        }
        let mut kept = Vec::with_capacity(triangles.len());
        let mut normals = Vec::with_capacity(triangles.len());
        let mut areas = Vec::with_capacity(triangles.len());
        let mut dropped = 0usize;
        for t in &triangles {
            if t.iter().any(|&i| i >= n) {
                return Err(GeometryError::Parse(format!(
                    "face index out of range: {t:?} with {n} vertices"
                )));
            }
            let [a, b, c] = [
                vertices[t[0] as usize],
                vertices[t[1] as usize],
                vertices[t[2] as usize],
            ];
            let cross = (b - a).cross(&(c - a));
            let twice_area = cross.norm();
            if twice_area < DEGENERATE_AREA {
                dropped += 1;
                continue;
            }
            kept.push(*t);
            normals.push(cross / twice_area);
            areas.push(0.5 * twice_area);
        }
        if kept.is_empty() {
            return Err(GeometryError::DegenerateMesh);
        }
        let watertight = is_watertight(&kept);
        Ok(Mesh {
            vertices,
            triangles: kept,
            face_normals: normals,
            face_areas: areas,
            watertight,
            dropped_faces: dropped,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn face_normal(&self, face: usize) -> Vector3<f64> {
        self.face_normals[face]
    }

    pub fn face_area(&self, face: usize) -> f64 {
        self.face_areas[face]
    }

    pub fn total_area(&self) -> f64 {
        self.face_areas.iter().sum()
    }

    pub fn is_watertight(&self) -> bool {
        self.watertight
    }

    /// Number of zero-area faces dropped at load time.
    pub fn dropped_faces(&self) -> usize {
        self.dropped_faces
    }

    pub fn corners(&self, face: usize) -> [Vector3<f64>; 3] {
        let t = self.triangles[face];
        [
            self.vertices[t[0] as usize],
            self.vertices[t[1] as usize],
            self.vertices[t[2] as usize],
        ]
    }

    pub fn aabb(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            for i in 0..3 {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        (lo, hi)
    }

    /// Signed volume by the divergence theorem; positive for outward-oriented
    /// closed surfaces.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let a = self.vertices[t[0] as usize];
                let b = self.vertices[t[1] as usize];
                let c = self.vertices[t[2] as usize];
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// V - E + F for the kept faces.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = std::collections::HashSet::new();
        let mut edges = std::collections::HashSet::new();
        for t in &self.triangles {
            for &i in t {
                used.insert(i);
            }
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        used.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    /// Returns a copy with every vertex transformed by `f`.
    pub fn transformed(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> Mesh {
        let vertices = self.vertices.iter().map(f).collect();
        Mesh::new(vertices, self.triangles.clone()).expect("transform kept mesh valid")
    }
}

/// Closed orientable surface: every directed edge appears exactly once and
/// its reverse exists.
fn is_watertight(triangles: &[[u32; 3]]) -> bool {
    let mut directed: HashMap<(u32, u32), u32> = HashMap::new();
    for t in triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            *directed.entry((a, b)).or_insert(0) += 1;
        }
    }
    directed
        .iter()
        .all(|(&(a, b), &c)| c == 1 && directed.get(&(b, a)) == Some(&1))
}
