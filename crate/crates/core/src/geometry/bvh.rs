//! Median-split AABB tree (leaf size 8) over mesh triangles, backing exact
//! nearest-triangle distance, ray casting and parity-signed SDF queries.
//! Queries evaluate the same per-triangle primitives a brute-force scan
//! would, so results agree with an all-triangles oracle exactly.

use super::Mesh;
use nalgebra::Vector3;

const LEAF_SIZE: usize = 8;
const RAY_EPS: f64 = 1e-12;

/// Fixed, axis-skewed parity-ray directions; three rays vote on the sign.
const SIGN_RAYS: [[f64; 3]; 3] = [
    [0.267_261_241_9, 0.534_522_483_8, 0.801_783_725_7],
    [-0.801_783_725_7, 0.267_261_241_9, 0.534_522_483_8],
    [0.534_522_483_8, -0.801_783_725_7, 0.267_261_241_9],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub distance: f64,
    pub face: usize,
}

#[derive(Debug, Clone)]
struct Node {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    // Leaf when count > 0: [start, start+count) in tri order. Otherwise the
    // children are at left and left + 1 is not implied; right stored too.
    left: u32,
    right: u32,
    start: u32,
    count: u32,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    corners: Vec<[Vector3<f64>; 3]>,
    normals: Vec<Vector3<f64>>,
    face_ids: Vec<u32>,
    watertight: bool,
}

impl Bvh {
    pub fn build(mesh: &Mesh) -> Self {
        let n = mesh.triangles().len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let centroids: Vec<Vector3<f64>> = (0..n)
            .map(|f| {
                let [a, b, c] = mesh.corners(f);
                (a + b + c) / 3.0
            })
            .collect();
        let mut nodes = Vec::new();
        build_node(mesh, &centroids, &mut order, 0, n, &mut nodes);
        let corners = order.iter().map(|&f| mesh.corners(f as usize)).collect();
        let normals = order
            .iter()
            .map(|&f| mesh.face_normal(f as usize))
            .collect();
        Bvh {
            nodes,
            corners,
            normals,
            face_ids: order,
            watertight: mesh.is_watertight(),
        }
    }

    pub fn is_watertight(&self) -> bool {
        self.watertight
    }

    /// Nearest ray intersection, or none. `direction` must be unit length.
    pub fn raycast(&self, origin: &Vector3<f64>, direction: &Vector3<f64>) -> Option<RayHit> {
        debug_assert!((direction.norm() - 1.0).abs() < 1e-9);
        let inv = Vector3::new(1.0 / direction[0], 1.0 / direction[1], 1.0 / direction[2]);
        let mut best: Option<(f64, usize)> = None;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            let Some((tmin, _)) = slab_test(&node.lo, &node.hi, origin, &inv) else {
                continue;
            };
            if let Some((bt, _)) = best {
                if tmin > bt {
                    continue;
                }
            }
            if node.count > 0 {
                for i in node.start..node.start + node.count {
                    let tri = &self.corners[i as usize];
                    if let Some((t, _, _)) = moller_trumbore(origin, direction, tri) {
                        if t > RAY_EPS && best.map_or(true, |(bt, _)| t < bt) {
                            best = Some((t, i as usize));
                        }
                    }
                }
            } else {
                stack.push(node.left as usize);
                stack.push(node.right as usize);
            }
        }
        best.map(|(t, i)| RayHit {
            position: origin + direction * t,
            normal: self.normals[i],
            distance: t,
            face: self.face_ids[i] as usize,
        })
    }

    /// Exact unsigned distance to the surface plus the realizing face.
    pub fn closest(&self, p: &Vector3<f64>) -> (f64, usize, Vector3<f64>) {
        let mut best = (f64::INFINITY, 0usize, Vector3::zeros());
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if box_distance(&node.lo, &node.hi, p) > best.0 {
                continue;
            }
            if node.count > 0 {
                for i in node.start..node.start + node.count {
                    let q = closest_point_on_triangle(p, &self.corners[i as usize]);
                    let d = (p - q).norm();
                    if d < best.0 {
                        best = (d, i as usize, q);
                    }
                }
            } else {
                // Visit the nearer child first to tighten the bound early.
                let (l, r) = (node.left as usize, node.right as usize);
                let dl = box_distance(&self.nodes[l].lo, &self.nodes[l].hi, p);
                let dr = box_distance(&self.nodes[r].lo, &self.nodes[r].hi, p);
                if dl < dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        (best.0, self.face_ids[best.1] as usize, best.2)
    }

    /// Signed distance when the source mesh is watertight (inside negative,
    /// sign by majority vote of three parity rays); unsigned otherwise.
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        let (d, _, _) = self.closest(p);
        if !self.watertight {
            return d;
        }
        let mut inside_votes = 0;
        for dir in &SIGN_RAYS {
            let dir = Vector3::new(dir[0], dir[1], dir[2]);
            if self.count_intersections(p, &dir) % 2 == 1 {
                inside_votes += 1;
            }
        }
        if inside_votes >= 2 {
            -d
        } else {
            d
        }
    }

    /// True iff `tri` intersects any mesh triangle (edge-through-face test).
    pub fn intersects_triangle(&self, tri: &[Vector3<f64>; 3]) -> bool {
        let mut lo = tri[0];
        let mut hi = tri[0];
        for v in &tri[1..] {
            for i in 0..3 {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            let overlap = (0..3).all(|i| node.lo[i] <= hi[i] && lo[i] <= node.hi[i]);
            if !overlap {
                continue;
            }
            if node.count > 0 {
                for i in node.start..node.start + node.count {
                    if tri_tri_intersect(tri, &self.corners[i as usize]) {
                        return true;
                    }
                }
            } else {
                stack.push(node.left as usize);
                stack.push(node.right as usize);
            }
        }
        false
    }

    fn count_intersections(&self, origin: &Vector3<f64>, direction: &Vector3<f64>) -> usize {
        let inv = Vector3::new(1.0 / direction[0], 1.0 / direction[1], 1.0 / direction[2]);
        let mut count = 0usize;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if slab_test(&node.lo, &node.hi, origin, &inv).is_none() {
                continue;
            }
            if node.count > 0 {
                for i in node.start..node.start + node.count {
                    if let Some((t, _, _)) = moller_trumbore(origin, direction, &self.corners[i as usize]) {
                        if t > RAY_EPS {
                            count += 1;
                        }
                    }
                }
            } else {
                stack.push(node.left as usize);
                stack.push(node.right as usize);
            }
        }
        count
    }
}

fn build_node(
    mesh: &Mesh,
    centroids: &[Vector3<f64>],
    order: &mut [u32],
    offset: usize,
    len: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let slice = &order[..len];
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &f in slice.iter() {
        for v in mesh.corners(f as usize) {
            for i in 0..3 {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
    }
    let idx = nodes.len();
    nodes.push(Node {
        lo,
        hi,
        left: 0,
        right: 0,
        start: offset as u32,
        count: len as u32,
    });
    if len <= LEAF_SIZE {
        return idx;
    }
    let ext = hi - lo;
    let axis = if ext[0] >= ext[1] && ext[0] >= ext[2] {
        0
    } else if ext[1] >= ext[2] {
        1
    } else {
        2
    };
    // Deterministic median split: sort by (centroid, face id).
    order[..len].sort_unstable_by(|&a, &b| {
        centroids[a as usize][axis]
            .partial_cmp(&centroids[b as usize][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mid = len / 2;
    let (left_half, right_half) = order[..len].split_at_mut(mid);
    let l = build_node(mesh, centroids, left_half, offset, mid, nodes);
    let r = build_node(mesh, centroids, right_half, offset + mid, len - mid, nodes);
    nodes[idx].count = 0;
    nodes[idx].left = l as u32;
    nodes[idx].right = r as u32;
    idx
}

fn slab_test(
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
    origin: &Vector3<f64>,
    inv_dir: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let mut tmin = 0.0f64;
    let mut tmax = f64::INFINITY;
    for i in 0..3 {
        let t1 = (lo[i] - origin[i]) * inv_dir[i];
        let t2 = (hi[i] - origin[i]) * inv_dir[i];
        let (a, b) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        tmin = tmin.max(a);
        tmax = tmax.min(b);
        if tmin > tmax {
            return None;
        }
    }
    Some((tmin, tmax))
}

fn box_distance(lo: &Vector3<f64>, hi: &Vector3<f64>, p: &Vector3<f64>) -> f64 {
    let mut d2 = 0.0;
    for i in 0..3 {
        let d = (lo[i] - p[i]).max(0.0).max(p[i] - hi[i]);
        d2 += d * d;
    }
    d2.sqrt()
}

/// Möller-Trumbore intersection; returns (t, u, v) or none.
pub fn moller_trumbore(
    origin: &Vector3<f64>,
    direction: &Vector3<f64>,
    tri: &[Vector3<f64>; 3],
) -> Option<(f64, f64, f64)> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = direction.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = direction.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    if t < 0.0 {
        return None;
    }
    Some((t, u, v))
}

/// Triangle-triangle intersection via edge-through-face tests in both
/// directions. Exactly coplanar overlaps without an edge crossing are not
/// detected; they do not occur for transform-sampled poses.
pub fn tri_tri_intersect(a: &[Vector3<f64>; 3], b: &[Vector3<f64>; 3]) -> bool {
    edges_hit(a, b) || edges_hit(b, a)
}

fn edges_hit(a: &[Vector3<f64>; 3], b: &[Vector3<f64>; 3]) -> bool {
    for i in 0..3 {
        let p = a[i];
        let d = a[(i + 1) % 3] - p;
        let len = d.norm();
        if len < 1e-15 {
            continue;
        }
        let dir = d / len;
        if let Some((t, _, _)) = moller_trumbore(&p, &dir, b) {
            if t <= len {
                return true;
            }
        }
    }
    false
}

/// Closest point on a triangle (Ericson, Real-Time Collision Detection 5.1.5).
pub fn closest_point_on_triangle(p: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> Vector3<f64> {
    let [a, b, c] = *tri;
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::unit_box_mesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn brute_sdf(mesh: &Mesh, p: &Vector3<f64>) -> f64 {
        (0..mesh.triangles().len())
            .map(|f| {
                let q = closest_point_on_triangle(p, &mesh.corners(f));
                (p - q).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn brute_raycast(mesh: &Mesh, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for f in 0..mesh.triangles().len() {
            if let Some((t, _, _)) = moller_trumbore(o, d, &mesh.corners(f)) {
                if t > RAY_EPS && best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, f));
                }
            }
        }
        best
    }

    #[test]
    fn sdf_analytic_cases_on_unit_box() {
        let mesh = unit_box_mesh();
        let bvh = Bvh::build(&mesh);
        assert!((bvh.sdf(&Vector3::zeros()) - (-0.5)).abs() < 1e-12);
        assert!(bvh.sdf(&Vector3::new(0.5, 0.0, 0.0)).abs() < 1e-9);
        assert!((bvh.sdf(&Vector3::new(1.5, 0.0, 0.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sdf_matches_brute_force_scan() {
        let mesh = unit_box_mesh();
        let bvh = Bvh::build(&mesh);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..500 {
            let p = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let got = bvh.sdf(&p).abs();
            let want = brute_sdf(&mesh, &p);
            assert!((got - want).abs() < 1e-9, "{got} vs {want} at {p:?}");
        }
    }

    #[test]
    fn raycast_face_center_and_miss() {
        let mesh = unit_box_mesh();
        let bvh = Bvh::build(&mesh);
        let hit = bvh
            .raycast(&Vector3::new(2.0, 0.0, 0.0), &Vector3::new(-1.0, 0.0, 0.0))
            .unwrap();
        assert!((hit.distance - 1.5).abs() < 1e-12);
        assert!((hit.position - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
        assert!((hit.normal - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);

        let miss = bvh.raycast(&Vector3::new(2.0, 2.0, 0.0), &Vector3::new(0.0, 0.0, 1.0));
        assert!(miss.is_none());
    }

    #[test]
    fn raycast_matches_brute_force_scan() {
        let mesh = unit_box_mesh();
        let bvh = Bvh::build(&mesh);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let o = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let mut d = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if d.norm() < 1e-6 {
                continue;
            }
            d.normalize_mut();
            let got = bvh.raycast(&o, &d);
            let want = brute_raycast(&mesh, &o, &d);
            match (got, want) {
                (None, None) => {}
                (Some(h), Some((t, f))) => {
                    assert!((h.distance - t).abs() < 1e-12);
                    assert_eq!(h.face, f);
                }
                other => panic!("mismatch {other:?}"),
            }
        }
    }
}
