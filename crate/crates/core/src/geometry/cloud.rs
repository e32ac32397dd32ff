//! Point clouds, surface sampling, farthest-point seeds, kNN regions and the
//! unit-volume normalization used by the feature planes.

use super::{GeometryError, Mesh};
use crate::se3::Pose;
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        assert!(!points.is_empty(), "point cloud must be non-empty");
        assert!(
            points.iter().all(|p| p.iter().all(|x| x.is_finite())),
            "point cloud must be finite"
        );
        PointCloud {
            points,
            normals: None,
        }
    }

    pub fn with_normals(points: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> Self {
        assert_eq!(points.len(), normals.len());
        let mut c = PointCloud::new(points);
        c.normals = Some(normals);
        c
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    pub fn aabb(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        (lo, hi)
    }

    /// FNV-1a over the raw point bytes; identifies the cloud a shape context
    /// was built from.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.points {
            for x in p.iter() {
                for b in x.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Subset of a parent cloud given by indices (`P_t` is a subset of `P`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRegion {
    pub indices: Vec<usize>,
    #[serde(skip)]
    pub points: Vec<Vector3<f64>>,
}

impl TargetRegion {
    pub fn from_indices(cloud: &PointCloud, indices: Vec<usize>) -> Self {
        let mut seen = std::collections::HashSet::new();
        for &i in &indices {
            assert!(i < cloud.len(), "region index {i} out of range");
            assert!(seen.insert(i), "region indices must be unique");
        }
        let points = indices.iter().map(|&i| cloud.points()[i]).collect();
        TargetRegion { indices, points }
    }

    pub fn cloud(&self) -> PointCloud {
        PointCloud::new(self.points.clone())
    }
}

/// Area-weighted uniform surface samples with face normals attached.
pub fn sample_surface<R: Rng + ?Sized>(mesh: &Mesh, n: usize, rng: &mut R) -> PointCloud {
    assert!(n >= 1);
    let faces = mesh.triangles().len();
    let mut cdf = Vec::with_capacity(faces);
    let mut acc = 0.0;
    for f in 0..faces {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    let total = acc;
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen_range(0.0..total);
        let f = cdf.partition_point(|&c| c < u).min(faces - 1);
        let [a, b, c] = mesh.corners(f);
        let r1: f64 = rng.gen();
        let r2: f64 = rng.gen();
        let s = r1.sqrt();
        let p = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
        points.push(p);
        normals.push(mesh.face_normal(f));
    }
    PointCloud::with_normals(points, normals)
}

/// Greedy max-min farthest point sampling, deterministic given the seed index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed_index: usize) -> Vec<usize> {
    let n = cloud.len();
    assert!(m >= 1 && m <= n, "need 1 <= m <= N");
    assert!(seed_index < n);
    let pts = cloud.points();
    let mut chosen = Vec::with_capacity(m);
    let mut dist2 = vec![f64::INFINITY; n];
    let mut current = seed_index;
    chosen.push(current);
    for _ in 1..m {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, d) in dist2.iter_mut().enumerate() {
            let dd = (pts[i] - pts[current]).norm_squared();
            if dd < *d {
                *d = dd;
            }
            if *d > best.1 {
                best = (i, *d);
            }
        }
        current = best.0;
        chosen.push(current);
    }
    chosen
}

/// The k points nearest to `query_index` (itself included), ties broken by
/// smaller index.
pub fn knn_region(cloud: &PointCloud, query_index: usize, k: usize) -> TargetRegion {
    let n = cloud.len();
    assert!(k >= 1 && k <= n, "need 1 <= k <= N");
    assert!(query_index < n);
    let q = cloud.points()[query_index];
    let mut order: Vec<(f64, usize)> = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - q).norm_squared(), i))
        .collect();
    order.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut indices: Vec<usize> = order[..k].iter().map(|&(_, i)| i).collect();
    indices.sort_unstable();
    TargetRegion::from_indices(cloud, indices)
}

/// Similarity transform between world coordinates and the unit volume the
/// feature planes are built over: `x_norm = (x - center) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormTransform {
    pub center: Vector3<f64>,
    pub scale: f64,
}

impl NormTransform {
    pub fn identity() -> Self {
        NormTransform {
            center: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn to_normalized(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.center) * self.scale
    }

    pub fn to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p / self.scale + self.center
    }

    /// Conjugates a rigid pose into normalized coordinates: rotation is
    /// untouched, translation is centered and scaled.
    pub fn pose_to_normalized(&self, h: &Pose) -> Pose {
        Pose::new(*h.rotation(), self.to_normalized(h.translation()))
            .expect("rotation unchanged by normalization")
    }

    pub fn pose_to_world(&self, h: &Pose) -> Pose {
        Pose::new(*h.rotation(), self.to_world(h.translation()))
            .expect("rotation unchanged by normalization")
    }

    pub fn cloud_to_normalized(&self, cloud: &PointCloud) -> PointCloud {
        let pts = cloud.points().iter().map(|p| self.to_normalized(p)).collect();
        match cloud.normals() {
            Some(n) => PointCloud::with_normals(pts, n.to_vec()),
            None => PointCloud::new(pts),
        }
    }
}

/// Centers the cloud and scales it so the bounding box fits the unit volume
/// with a 5% margin. Returns the transform so results map back to meters.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, NormTransform), GeometryError> {
    let (lo, hi) = cloud.aabb();
    let ext = hi - lo;
    let max_extent = ext.iter().fold(0.0f64, |m, &x| m.max(x));
    if max_extent < 1e-12 {
        return Err(GeometryError::DegenerateCloud);
    }
    let transform = NormTransform {
        center: (lo + hi) * 0.5,
        scale: 1.0 / (max_extent * 1.05),
    };
    Ok((transform.cloud_to_normalized(cloud), transform))
}
