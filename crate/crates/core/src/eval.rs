//! Analytic grasp metrics: collision pruning, ray-cast contact extraction,
//! grasp-matrix force closure with a wrench-hull oracle, target-grasp ratio,
//! dual-arm pairing and Chamfer distance.

use crate::dataset::box_mesh;
use crate::geometry::{Bvh, Mesh};
use crate::se3::Pose;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Eigenvalue floor in the force-closure test (`G G^T >= eps I`).
pub const DEFAULT_FC_EPS: f64 = 0.01;
/// Bound on the cone-axis wrench (`|G c| < delta'`).
pub const DEFAULT_FC_DELTA: f64 = 0.5;
/// Default friction coefficient.
pub const DEFAULT_FRICTION: f64 = 0.3;

/// Parallel-jaw gripper in its own frame: approach +z, closing axis +-x,
/// fingertip plane at z = finger_length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperSpec {
    pub finger_length: f64,
    pub max_opening: f64,
    /// Pad contact face: extent along the finger (z).
    pub pad_length: f64,
    /// Pad contact face: extent across the finger (y).
    pub pad_width: f64,
    pub finger_thickness: f64,
}

impl Default for GripperSpec {
    fn default() -> Self {
        GripperSpec {
            finger_length: 0.06,
            max_opening: 0.10,
            pad_length: 0.02,
            pad_width: 0.01,
            finger_thickness: 0.01,
        }
    }
}

impl GripperSpec {
    /// Grasp center: midpoint of the two fingertip centers, gripper frame.
    pub fn grasp_center_local(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.finger_length)
    }

    pub fn fingertip_centers_local(&self) -> [Vector3<f64>; 2] {
        [
            Vector3::new(-0.5 * self.max_opening, 0.0, self.finger_length),
            Vector3::new(0.5 * self.max_opening, 0.0, self.finger_length),
        ]
    }

    /// Collision mesh at max opening: two finger boxes plus a palm bar.
    pub fn collision_mesh(&self) -> Mesh {
        let w = 0.5 * self.max_opening;
        let t = self.finger_thickness;
        let hy = 0.5 * self.pad_width;
        let l = self.finger_length;
        let left = box_mesh(
            Vector3::new(-w - 0.5 * t, 0.0, 0.5 * l),
            Vector3::new(0.5 * t, hy, 0.5 * l),
        );
        let right = box_mesh(
            Vector3::new(w + 0.5 * t, 0.0, 0.5 * l),
            Vector3::new(0.5 * t, hy, 0.5 * l),
        );
        let palm = box_mesh(
            Vector3::new(0.0, 0.0, -0.01),
            Vector3::new(w + t, hy + 0.005, 0.01),
        );
        merge_meshes(&[left, right, palm])
    }

    /// Bounding-sphere diameter of the collision mesh.
    pub fn bounding_diameter(&self) -> f64 {
        let mesh = self.collision_mesh();
        let (lo, hi) = mesh.aabb();
        let center = (lo + hi) * 0.5;
        let r = mesh
            .vertices()
            .iter()
            .map(|v| (v - center).norm())
            .fold(0.0f64, f64::max);
        2.0 * r
    }

    /// Fixed query cloud (30 points): 2 x 10 fingertip pad points, a 6-point
    /// palm bar and 4 approach-axis samples.
    pub fn query_cloud(&self) -> Vec<Vector3<f64>> {
        let w = 0.5 * self.max_opening;
        let l = self.finger_length;
        let mut pts = Vec::with_capacity(30);
        for sx in [-1.0f64, 1.0] {
            for i in 0..5 {
                for j in 0..2 {
                    let z = l - self.pad_length + self.pad_length * (i as f64 / 4.0);
                    let y = (j as f64 - 0.5) * self.pad_width;
                    pts.push(Vector3::new(sx * w, y, z));
                }
            }
        }
        for i in 0..6 {
            let x = -w + 2.0 * w * (i as f64 / 5.0);
            pts.push(Vector3::new(x, 0.0, 0.0));
        }
        for i in 0..4 {
            pts.push(Vector3::new(0.0, 0.0, -0.01 - 0.01 * i as f64));
        }
        pts
    }

    /// Ray origins and directions (gripper frame) for contact extraction:
    /// a 5 x 3 grid per finger pad, cast inward along the closing axis.
    pub fn contact_rays(&self) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        let w = 0.5 * self.max_opening;
        let l = self.finger_length;
        let mut rays = Vec::with_capacity(30);
        for sx in [-1.0f64, 1.0] {
            let dir = Vector3::new(-sx, 0.0, 0.0);
            for i in 0..5 {
                let z = l - self.pad_length + self.pad_length * ((i as f64 + 0.5) / 5.0);
                for j in 0..3 {
                    let y = ((j as f64 - 1.0) / 2.0) * self.pad_width * 0.8;
                    rays.push((Vector3::new(sx * w, y, z), dir));
                }
            }
        }
        rays
    }
}

fn merge_meshes(parts: &[Mesh]) -> Mesh {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for m in parts {
        let base = vertices.len() as u32;
        vertices.extend_from_slice(m.vertices());
        triangles.extend(m.triangles().iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
    }
    Mesh::new(vertices, triangles).expect("merged mesh valid")
}

/// Hard-finger contact: position, inward force direction, friction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub position: Vector3<f64>,
    /// Unit direction the finger can push along (into the surface).
    pub normal: Vector3<f64>,
    pub friction: f64,
}

/// True iff the posed gripper collision mesh intersects the object mesh.
/// Any contact counts.
pub fn collision_check(object: &Bvh, gripper: &GripperSpec, pose: &Pose) -> bool {
    let mesh = gripper.collision_mesh().transformed(|v| pose.apply(v));
    mesh.triangles()
        .iter()
        .enumerate()
        .any(|(f, _)| object.intersects_triangle(&mesh.corners(f)))
}

/// Ray-cast contact extraction: per finger the nearest pad-ray hit within
/// the jaw gap wins; normals are mesh face normals oriented inward (along
/// the push).
pub fn extract_contacts(
    object: &Bvh,
    gripper: &GripperSpec,
    pose: &Pose,
    friction: f64,
) -> Vec<Contact> {
    let mut contacts = Vec::new();
    let rays = gripper.contact_rays();
    let per_finger = rays.len() / 2;
    for finger in 0..2 {
        let mut best: Option<(f64, Contact)> = None;
        for (origin, dir) in &rays[finger * per_finger..(finger + 1) * per_finger] {
            let o = pose.apply(origin);
            let d = pose.rotation() * dir;
            if let Some(hit) = object.raycast(&o, &d) {
                if hit.distance > gripper.max_opening {
                    continue;
                }
                if best.as_ref().map_or(true, |(t, _)| hit.distance < *t) {
                    let mut n = hit.normal;
                    if n.dot(&d) < 0.0 {
                        n = -n;
                    }
                    best = Some((
                        hit.distance,
                        Contact {
                            position: hit.position,
                            normal: n,
                            friction,
                        },
                    ));
                }
            }
        }
        if let Some((_, c)) = best {
            contacts.push(c);
        }
    }
    contacts
}

/// Orthonormal frame with z along `n`.
fn contact_frame(n: &Vector3<f64>) -> Matrix3<f64> {
    let a = if n[0].abs() < 0.9 {
        Vector3::new(1.0, 0.0, 0.0)
    } else {
        Vector3::new(0.0, 1.0, 0.0)
    };
    let t1 = n.cross(&a).normalize();
    let t2 = n.cross(&t1);
    Matrix3::from_columns(&[t1, t2, *n])
}

/// Torque lever arms are normalized by the largest contact distance from
/// the centroid, which makes the wrench space and the force-closure
/// thresholds scale-invariant.
fn torque_scale(contacts: &[Contact], centroid: &Vector3<f64>) -> f64 {
    contacts
        .iter()
        .map(|c| (c.position - centroid).norm())
        .fold(0.0f64, f64::max)
        .max(1e-12)
}

fn contact_centroid(contacts: &[Contact]) -> Vector3<f64> {
    contacts
        .iter()
        .fold(Vector3::zeros(), |a, ct| a + ct.position)
        / contacts.len().max(1) as f64
}

/// Grasp matrix G (6 x 3c): per contact the block
/// `[R; skew((p - centroid)/rho) R]` with R mapping the contact frame
/// (z = inward normal) to world, torques about the contact centroid and
/// lever arms normalized by the largest arm `rho`.
pub fn grasp_matrix(contacts: &[Contact]) -> DMatrix<f64> {
    let c = contacts.len();
    let centroid = contact_centroid(contacts);
    let rho = torque_scale(contacts, &centroid);
    let mut g = DMatrix::zeros(6, 3 * c);
    for (i, ct) in contacts.iter().enumerate() {
        let r = contact_frame(&ct.normal);
        let s = crate::se3::skew(&((ct.position - centroid) / rho)) * r;
        for col in 0..3 {
            for row in 0..3 {
                g[(row, 3 * i + col)] = r[(row, col)];
                g[(row + 3, 3 * i + col)] = s[(row, col)];
            }
        }
    }
    g
}

/// Eigenvalue + cone-axis force-closure test: `G G^T >= eps I` and
/// `|G c| < delta'` with c the stacked unit cone axes (the contact normals
/// in their own frames). With exactly two point contacts the wrench space
/// has a structural null direction (torque about the contact line), so the
/// eigenvalue test then applies to the reachable subspace.
pub fn force_closure(contacts: &[Contact], eps: f64, delta_prime: f64) -> bool {
    if contacts.len() < 2 {
        return false;
    }
    let g = grasp_matrix(contacts);
    let ggt = &g * g.transpose();
    let sym = nalgebra::SymmetricEigen::new(ggt.clone());
    let mut eigs: Vec<f64> = sym.eigenvalues.iter().copied().collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min_eig = if contacts.len() == 2 { eigs[1] } else { eigs[0] };
    if min_eig < eps {
        return false;
    }
    let mut c = DVector::zeros(3 * contacts.len());
    for i in 0..contacts.len() {
        c[3 * i + 2] = 1.0;
    }
    let gc = &g * c;
    gc.norm() < delta_prime
}

/// Discretized friction-cone wrenches about the contact centroid, lever
/// arms normalized like [`grasp_matrix`].
fn cone_wrenches(contacts: &[Contact], mu_override: Option<f64>, edge_count: usize) -> Vec<Vector6<f64>> {
    let centroid = contact_centroid(contacts);
    let rho = torque_scale(contacts, &centroid);
    let mut wrenches = Vec::with_capacity(contacts.len() * edge_count);
    for ct in contacts {
        let mu = mu_override.unwrap_or(ct.friction);
        let frame = contact_frame(&ct.normal);
        let t1: Vector3<f64> = frame.column(0).into();
        let t2: Vector3<f64> = frame.column(1).into();
        for j in 0..edge_count {
            let a = 2.0 * std::f64::consts::PI * j as f64 / edge_count as f64;
            let f = (ct.normal + (t1 * a.cos() + t2 * a.sin()) * mu).normalize();
            let tau = ((ct.position - centroid) / rho).cross(&f);
            wrenches.push(Vector6::new(f[0], f[1], f[2], tau[0], tau[1], tau[2]));
        }
    }
    wrenches
}

/// Distance from the origin to the convex hull of `pts` (Frank-Wolfe with
/// away steps on the min-norm-point problem).
fn hull_distance(pts: &[Vector6<f64>]) -> f64 {
    let n = pts.len();
    let mut lambda = vec![1.0 / n as f64; n];
    let mut x: Vector6<f64> = pts
        .iter()
        .zip(&lambda)
        .fold(Vector6::zeros(), |a, (w, &l)| a + w * l);
    for _ in 0..4000 {
        // Frank-Wolfe vertex: most aligned against x.
        let (s, _) = pts
            .iter()
            .enumerate()
            .map(|(i, w)| (i, w.dot(&x)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        // Away vertex: worst one currently in the support.
        let (a, _) = lambda
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 1e-14)
            .map(|(i, _)| (i, pts[i].dot(&x)))
            .max_by(|p, q| p.1.partial_cmp(&q.1).unwrap())
            .unwrap();
        let gap = x.norm_squared() - pts[s].dot(&x);
        if gap < 1e-14 {
            break;
        }
        let fw_dir = pts[s] - x;
        let away_dir = x - pts[a];
        let (dir, max_step, idx, away) = if fw_dir.dot(&-x) >= away_dir.dot(&-x) {
            (fw_dir, 1.0, s, false)
        } else {
            let l = lambda[a];
            (away_dir, l / (1.0 - l).max(1e-14), a, true)
        };
        let denom = dir.norm_squared();
        if denom < 1e-18 {
            break;
        }
        let step = (-x.dot(&dir) / denom).clamp(0.0, max_step);
        if step <= 0.0 {
            break;
        }
        if away {
            let scale = 1.0 + step;
            for l in lambda.iter_mut() {
                *l *= scale;
            }
            lambda[idx] -= step;
        } else {
            for l in lambda.iter_mut() {
                *l *= 1.0 - step;
            }
            lambda[idx] += step;
        }
        x = pts
            .iter()
            .zip(&lambda)
            .fold(Vector6::zeros(), |acc, (w, &l)| acc + w * l);
    }
    x.norm()
}

/// Largest ball about the origin inside the hull of `pts` (arbitrary
/// dimension): `min over unit d` of `max_i w_i . d`, by multi-start
/// projected subgradient descent.
fn hull_inradius(pts: &[DVector<f64>], dim: usize, seed: u64) -> f64 {
    use rand::Rng;
    let support = |d: &DVector<f64>| -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, w) in pts.iter().enumerate() {
            let v = w.dot(d);
            if v > best.0 {
                best = (v, i);
            }
        }
        best
    };
    let mut rng = crate::rng::stream_rng(seed, 7_771);
    let mut starts: Vec<DVector<f64>> = Vec::new();
    for w in pts.iter().take(64) {
        let n = w.norm();
        if n > 1e-12 {
            starts.push(-w / n);
        }
    }
    for i in 0..dim {
        let mut e = DVector::zeros(dim);
        e[i] = 1.0;
        starts.push(e.clone());
        starts.push(-e);
    }
    for _ in 0..48 {
        let d = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0f64));
        if d.norm() > 1e-9 {
            starts.push(d.normalize());
        }
    }
    let mut best = f64::INFINITY;
    for start in starts {
        let mut d = start;
        best = best.min(support(&d).0);
        for k in 1..=250 {
            let (_, i) = support(&d);
            let step = 0.7 / k as f64;
            let nd = &d - &pts[i] * step;
            let n = nd.norm();
            if n < 1e-12 {
                break;
            }
            d = nd / n;
            let local = support(&d).0;
            if local < best {
                best = local;
            }
        }
    }
    best
}

/// Classical wrench-hull force-closure criterion: the origin must lie
/// strictly inside the convex hull of the discretized friction-cone contact
/// wrenches, interiority taken relative to the subspace the wrenches span
/// (two point contacts never span all six wrench dimensions). Returns the
/// verdict plus a signed margin (negative: distance from the hull; positive:
/// inradius about the origin within the span).
pub fn force_closure_oracle_margin(
    contacts: &[Contact],
    mu: Option<f64>,
    edge_count: usize,
) -> (bool, f64) {
    if contacts.len() < 2 {
        return (false, f64::NEG_INFINITY);
    }
    let wrenches = cone_wrenches(contacts, mu, edge_count);
    let dist = hull_distance(&wrenches);
    if dist > 1e-7 {
        return (false, -dist);
    }
    // Orthonormal basis of the wrench span.
    let mut cov = nalgebra::Matrix6::<f64>::zeros();
    for w in &wrenches {
        cov += w * w.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let max_eig = eig.eigenvalues.iter().fold(0.0f64, |m, &x| m.max(x));
    let mut basis: Vec<Vector6<f64>> = Vec::new();
    for i in 0..6 {
        if eig.eigenvalues[i] > 1e-9 * max_eig {
            basis.push(eig.eigenvectors.column(i).into_owned());
        }
    }
    let k = basis.len();
    let projected: Vec<DVector<f64>> = wrenches
        .iter()
        .map(|w| DVector::from_fn(k, |i, _| basis[i].dot(w)))
        .collect();
    let r = hull_inradius(&projected, k, 1234);
    (r > 1e-6, r)
}

pub fn force_closure_oracle(contacts: &[Contact], mu: Option<f64>, edge_count: usize) -> bool {
    force_closure_oracle_margin(contacts, mu, edge_count).0
}

/// Percentage of grasp centers within `radius` of any region point.
/// An empty candidate list yields 0.
pub fn target_grasp_ratio(centers: &[Vector3<f64>], region: &[Vector3<f64>], radius: f64) -> f64 {
    if centers.is_empty() {
        return 0.0;
    }
    let hits = centers
        .iter()
        .filter(|c| {
            region
                .iter()
                .map(|p| (*c - p).norm())
                .fold(f64::INFINITY, f64::min)
                <= radius
        })
        .count();
    100.0 * hits as f64 / centers.len() as f64
}

/// Per-candidate analytic evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateEval {
    pub pose: [f64; 16],
    pub collides: bool,
    pub contact_count: usize,
    pub force_closure: bool,
    pub grasp_center: [f64; 3],
    /// Minimum distance from the grasp center to the region, when given.
    pub target_distance: Option<f64>,
}

/// Evaluates candidate poses (world frame) against the object.
pub fn evaluate_candidates(
    object: &Bvh,
    gripper: &GripperSpec,
    poses: &[Pose],
    region: Option<&[Vector3<f64>]>,
    friction: f64,
    fc_eps: f64,
    fc_delta: f64,
) -> Vec<CandidateEval> {
    crate::exec::map_slice(poses, |pose| {
        let collides = collision_check(object, gripper, pose);
        let contacts = if collides {
            Vec::new()
        } else {
            extract_contacts(object, gripper, pose, friction)
        };
        let fc = !collides && force_closure(&contacts, fc_eps, fc_delta);
        let center = pose.apply(&gripper.grasp_center_local());
        let target_distance = region.map(|r| {
            r.iter()
                .map(|p| (center - p).norm())
                .fold(f64::INFINITY, f64::min)
        });
        CandidateEval {
            pose: pose.to_flat16(),
            collides,
            contact_count: contacts.len(),
            force_closure: fc,
            grasp_center: [center[0], center[1], center[2]],
            target_distance,
        }
    })
}

/// FC percentage over all candidates, colliding ones included in the
/// denominator.
pub fn fc_percentage(evals: &[CandidateEval]) -> f64 {
    if evals.is_empty() {
        return 0.0;
    }
    100.0 * evals.iter().filter(|e| e.force_closure).count() as f64 / evals.len() as f64
}

/// Unordered dual-arm pair of candidate indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraspPair {
    pub first: usize,
    pub second: usize,
    pub joint_force_closure: bool,
}

/// All unordered candidate pairs whose grippers neither intersect each other
/// nor sit closer than `min_separation` (default 1.2x the gripper
/// bounding-sphere diameter); joint force closure uses the union of the two
/// contact pairs.
pub fn pair_dual_arm(
    object: &Bvh,
    gripper: &GripperSpec,
    poses: &[Pose],
    friction: f64,
    fc_eps: f64,
    fc_delta: f64,
    min_separation: Option<f64>,
) -> Vec<GraspPair> {
    let min_sep = min_separation.unwrap_or(1.2 * gripper.bounding_diameter());
    let centers: Vec<Vector3<f64>> = poses
        .iter()
        .map(|p| p.apply(&gripper.grasp_center_local()))
        .collect();
    let contacts: Vec<Vec<Contact>> = poses
        .iter()
        .map(|p| {
            if collision_check(object, gripper, p) {
                Vec::new()
            } else {
                extract_contacts(object, gripper, p, friction)
            }
        })
        .collect();
    let base = gripper.collision_mesh();
    let meshes: Vec<Mesh> = poses.iter().map(|p| base.transformed(|v| p.apply(v))).collect();
    let bvhs: Vec<Bvh> = meshes.iter().map(Bvh::build).collect();

    let mut pairs = Vec::new();
    for i in 0..poses.len() {
        for j in i + 1..poses.len() {
            if (centers[i] - centers[j]).norm() < min_sep {
                continue;
            }
            let grippers_touch = meshes[j]
                .triangles()
                .iter()
                .enumerate()
                .any(|(f, _)| bvhs[i].intersects_triangle(&meshes[j].corners(f)));
            if grippers_touch {
                continue;
            }
            let mut joint = contacts[i].clone();
            joint.extend_from_slice(&contacts[j]);
            let fc = joint.len() == 4 && force_closure(&joint, fc_eps, fc_delta);
            pairs.push(GraspPair {
                first: i,
                second: j,
                joint_force_closure: fc,
            });
        }
    }
    pairs
}

/// Symmetric Chamfer distance: the mean of squared nearest-neighbor
/// distances, averaged over both directions. A kd-tree backs the nearest
/// lookups; results match the quadratic scan exactly.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let ta = KdTree::build(b);
    let tb = KdTree::build(a);
    let d_ab: f64 = a.iter().map(|p| ta.nearest_sq(p)).sum::<f64>() / a.len() as f64;
    let d_ba: f64 = b.iter().map(|p| tb.nearest_sq(p)).sum::<f64>() / b.len() as f64;
    0.5 * (d_ab + d_ba)
}

struct KdNode {
    axis: usize,
    split: f64,
    left: usize,
    right: usize,
    start: usize,
    count: usize,
}

struct KdTree {
    pts: Vec<Vector3<f64>>,
    order: Vec<u32>,
    nodes: Vec<KdNode>,
}

impl KdTree {
    fn build(pts: &[Vector3<f64>]) -> Self {
        let mut order: Vec<u32> = (0..pts.len() as u32).collect();
        let mut nodes = Vec::new();
        let pts = pts.to_vec();
        Self::split(&pts, &mut order, 0, pts.len(), 0, &mut nodes);
        KdTree { pts, order, nodes }
    }

    fn split(
        pts: &[Vector3<f64>],
        order: &mut [u32],
        offset: usize,
        len: usize,
        depth: usize,
        nodes: &mut Vec<KdNode>,
    ) -> usize {
        let idx = nodes.len();
        if len <= 8 {
            nodes.push(KdNode {
                axis: 0,
                split: 0.0,
                left: usize::MAX,
                right: usize::MAX,
                start: offset,
                count: len,
            });
            return idx;
        }
        let axis = depth % 3;
        order[..len].sort_unstable_by(|&i, &j| {
            pts[i as usize][axis]
                .partial_cmp(&pts[j as usize][axis])
                .unwrap()
                .then(i.cmp(&j))
        });
        let mid = len / 2;
        let split = pts[order[mid] as usize][axis];
        nodes.push(KdNode {
            axis,
            split,
            left: 0,
            right: 0,
            start: offset,
            count: 0,
        });
        let (lo, hi) = order[..len].split_at_mut(mid);
        let l = Self::split(pts, lo, offset, mid, depth + 1, nodes);
        let r = Self::split(pts, hi, offset + mid, len - mid, depth + 1, nodes);
        nodes[idx].left = l;
        nodes[idx].right = r;
        idx
    }

    fn nearest_sq(&self, q: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, node: usize, q: &Vector3<f64>, best: &mut f64) {
        let n = &self.nodes[node];
        if n.count > 0 || n.left == usize::MAX {
            for &i in &self.order[n.start..n.start + n.count] {
                let d = (self.pts[i as usize] - q).norm_squared();
                if d < *best {
                    *best = d;
                }
            }
            return;
        }
        let delta = q[n.axis] - n.split;
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, q, best);
        if delta * delta < *best {
            self.search(far, q, best);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::unit_box_mesh;
    use crate::se3::expmap;
    use crate::se3::Twist;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn grasp_pose_at(gripper: &GripperSpec, center: Vector3<f64>, rot: Matrix3<f64>) -> Pose {
        // Place the grasp center (fingertip midpoint) at `center`.
        let t = center - rot * gripper.grasp_center_local();
        Pose::new(rot, t).unwrap()
    }

    #[test]
    fn collision_far_and_inside() {
        let mesh = unit_box_mesh().transformed(|v| v * 0.08);
        let bvh = Bvh::build(&mesh);
        let gripper = GripperSpec::default();
        let far = Pose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!(!collision_check(&bvh, &gripper, &far));
        let inside = Pose::new(Matrix3::identity(), Vector3::zeros()).unwrap();
        assert!(collision_check(&bvh, &gripper, &inside));
    }

    #[test]
    fn collision_matches_brute_force_all_pairs() {
        let mesh = unit_box_mesh().transformed(|v| v * 0.08);
        let bvh = Bvh::build(&mesh);
        let gripper = GripperSpec::default();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut hits = 0;
        for _ in 0..60 {
            let pose = expmap(&Twist::new(
                Vector3::new(
                    rng.gen_range(-0.15..0.15),
                    rng.gen_range(-0.15..0.15),
                    rng.gen_range(-0.15..0.15),
                ),
                Vector3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ),
            ));
            let got = collision_check(&bvh, &gripper, &pose);
            // Brute force: all gripper-triangle x object-triangle tests via
            // the same segment primitive, no acceleration structure.
            let gm = gripper.collision_mesh().transformed(|v| pose.apply(v));
            let mut want = false;
            'outer: for gf in 0..gm.triangles().len() {
                let gt = gm.corners(gf);
                for of in 0..mesh.triangles().len() {
                    let ot = mesh.corners(of);
                    if crate::geometry::tri_tri_intersect(&gt, &ot) {
                        want = true;
                        break 'outer;
                    }
                }
            }
            assert_eq!(got, want);
            hits += got as usize;
        }
        assert!(hits > 0, "test should exercise both branches");
    }

    #[test]
    fn contacts_across_parallel_faces() {
        // 6 cm box grasped across x: contacts on both faces, antiparallel
        // inward normals, positions on the surface.
        let mesh = unit_box_mesh().transformed(|v| v * 0.06);
        let bvh = Bvh::build(&mesh);
        let gripper = GripperSpec::default();
        let pose = grasp_pose_at(&gripper, Vector3::zeros(), Matrix3::identity());
        let contacts = extract_contacts(&bvh, &gripper, &pose, DEFAULT_FRICTION);
        assert_eq!(contacts.len(), 2);
        assert!((contacts[0].normal + contacts[1].normal).norm() < 1e-9);
        for c in &contacts {
            assert!(bvh.sdf(&c.position).abs() < 1e-6);
        }

        let empty_pose = grasp_pose_at(
            &gripper,
            Vector3::new(0.0, 0.0, 0.3),
            Matrix3::identity(),
        );
        assert!(extract_contacts(&bvh, &gripper, &empty_pose, DEFAULT_FRICTION).is_empty());
    }

    #[test]
    fn grasp_matrix_shape_and_translation_behavior() {
        let c1 = Contact {
            position: Vector3::zeros(),
            normal: Vector3::new(0.0, 0.0, 1.0),
            friction: 0.3,
        };
        let g = grasp_matrix(&[c1]);
        assert_eq!(g.shape(), (6, 3));
        // Single contact sits at the torque reference: torque block is zero
        // and the linear block is the contact frame.
        let r = contact_frame(&c1.normal);
        for i in 0..3 {
            for j in 0..3 {
                assert!((g[(i, j)] - r[(i, j)]).abs() < 1e-12);
                assert!(g[(i + 3, j)].abs() < 1e-12);
            }
        }

        // Recompute by definition under a rigid translation of all contacts:
        // with centroid-referenced torques both blocks must be unchanged.
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let contacts: Vec<Contact> = (0..4)
            .map(|_| Contact {
                position: Vector3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                ),
                normal: Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalize(),
                friction: 0.3,
            })
            .collect();
        let shift = Vector3::new(1.0, -2.0, 0.5);
        let shifted: Vec<Contact> = contacts
            .iter()
            .map(|c| Contact {
                position: c.position + shift,
                ..*c
            })
            .collect();
        let ga = grasp_matrix(&contacts);
        let gb = grasp_matrix(&shifted);
        assert_eq!(gb.shape(), (6, 12));
        for i in 0..3 {
            for j in 0..12 {
                assert!((ga[(i, j)] - gb[(i, j)]).abs() < 1e-12, "linear rows change");
            }
        }
        // Torque rows per the skew formula, recomputed from scratch.
        let centroid = shifted
            .iter()
            .fold(Vector3::zeros(), |a, c| a + c.position)
            / 4.0;
        let rho = shifted
            .iter()
            .map(|c| (c.position - centroid).norm())
            .fold(0.0f64, f64::max);
        for (i, ct) in shifted.iter().enumerate() {
            let want =
                crate::se3::skew(&((ct.position - centroid) / rho)) * contact_frame(&ct.normal);
            for row in 0..3 {
                for col in 0..3 {
                    assert!((gb[(row + 3, 3 * i + col)] - want[(row, col)]).abs() < 1e-12);
                }
            }
        }
    }

    fn antipodal_sphere_contacts() -> Vec<Contact> {
        vec![
            Contact {
                position: Vector3::new(1.0, 0.0, 0.0),
                normal: Vector3::new(-1.0, 0.0, 0.0),
                friction: 0.3,
            },
            Contact {
                position: Vector3::new(-1.0, 0.0, 0.0),
                normal: Vector3::new(1.0, 0.0, 0.0),
                friction: 0.3,
            },
        ]
    }

    fn same_face_contacts() -> Vec<Contact> {
        vec![
            Contact {
                position: Vector3::new(0.1, 0.0, 0.5),
                normal: Vector3::new(0.0, 0.0, -1.0),
                friction: 0.3,
            },
            Contact {
                position: Vector3::new(-0.1, 0.0, 0.5),
                normal: Vector3::new(0.0, 0.0, -1.0),
                friction: 0.3,
            },
        ]
    }

    #[test]
    fn force_closure_canonical_cases_agree_with_oracle() {
        let anti = antipodal_sphere_contacts();
        assert!(force_closure(&anti, DEFAULT_FC_EPS, DEFAULT_FC_DELTA));
        assert!(force_closure_oracle(&anti, None, 16));

        let single = &anti[..1];
        assert!(!force_closure(single, DEFAULT_FC_EPS, DEFAULT_FC_DELTA));
        assert!(!force_closure_oracle(single, None, 16));

        let same = same_face_contacts();
        assert!(!force_closure(&same, DEFAULT_FC_EPS, DEFAULT_FC_DELTA));
        assert!(!force_closure_oracle(&same, None, 16));
    }

    #[test]
    fn oracle_rejects_degenerate_coplanar_wrenches() {
        // Frictionless contacts in one plane: every wrench lies in a proper
        // subspace, so the origin sits on the hull boundary.
        let contacts = vec![
            Contact {
                position: Vector3::new(1.0, 0.0, 0.0),
                normal: Vector3::new(-1.0, 0.0, 0.0),
                friction: 0.0,
            },
            Contact {
                position: Vector3::new(-1.0, 0.0, 0.0),
                normal: Vector3::new(1.0, 0.0, 0.0),
                friction: 0.0,
            },
            Contact {
                position: Vector3::new(0.0, 1.0, 0.0),
                normal: Vector3::new(0.0, -1.0, 0.0),
                friction: 0.0,
            },
        ];
        assert!(!force_closure_oracle(&contacts, None, 16));
    }

    #[test]
    fn oracle_edge_counts_agree_on_non_marginal_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut checked = 0;
        for _ in 0..60 {
            let contacts: Vec<Contact> = (0..4)
                .map(|_| {
                    let p = Vector3::new(
                        rng.gen_range(-1.0..1.0f64),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                    .normalize();
                    let noise = Vector3::new(
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                    );
                    Contact {
                        position: p,
                        normal: (-p + noise).normalize(),
                        friction: 0.3,
                    }
                })
                .collect();
            let (fc8, m8) = force_closure_oracle_margin(&contacts, None, 8);
            let (fc32, m32) = force_closure_oracle_margin(&contacts, None, 32);
            if m8.abs() > 0.05 && m32.abs() > 0.05 {
                checked += 1;
                assert_eq!(fc8, fc32, "margins {m8} vs {m32}");
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn target_grasp_ratio_cases() {
        assert_eq!(target_grasp_ratio(&[], &[Vector3::zeros()], 0.06), 0.0);
        let centers = vec![Vector3::zeros(), Vector3::new(0.01, 0.0, 0.0)];
        let region = vec![Vector3::zeros()];
        assert_eq!(target_grasp_ratio(&centers, &region, 0.06), 100.0);
        let far = vec![Vector3::new(0.07, 0.0, 0.0)];
        assert_eq!(target_grasp_ratio(&far, &region, 0.06), 0.0);
    }

    #[test]
    fn dual_arm_pairs_prune_and_keep() {
        // Long thin box: grasps near both ends pair up, identical poses of
        // the same grasp are pruned.
        let mesh = box_mesh(Vector3::zeros(), Vector3::new(0.035, 0.025, 0.15));
        let bvh = Bvh::build(&mesh);
        let gripper = GripperSpec::default();
        // Approach along -y: gripper z maps to world -y, closing axis x.
        let rot = Matrix3::from_columns(&[
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, -1.0, 0.0),
        ]);
        let top = grasp_pose_at(&gripper, Vector3::new(0.0, 0.0, 0.12), rot);
        let bottom = grasp_pose_at(&gripper, Vector3::new(0.0, 0.0, -0.12), rot);
        let poses = vec![top, top, bottom];
        let pairs = pair_dual_arm(
            &bvh,
            &gripper,
            &poses,
            DEFAULT_FRICTION,
            DEFAULT_FC_EPS,
            DEFAULT_FC_DELTA,
            None,
        );
        // Pair (0,1) is two identical poses: pruned. Pairs with the far end
        // survive and are unordered and deduplicated.
        assert!(pairs.iter().all(|p| !(p.first == 0 && p.second == 1)));
        let far_pairs: Vec<_> = pairs.iter().filter(|p| p.second == 2).collect();
        assert_eq!(far_pairs.len(), 2);
        assert!(far_pairs.iter().all(|p| p.joint_force_closure));
    }

    #[test]
    fn fc_percentage_counts_colliders_in_denominator() {
        let mk = |fc: bool, collides: bool| CandidateEval {
            pose: Pose::identity().to_flat16(),
            collides,
            contact_count: 2,
            force_closure: fc,
            grasp_center: [0.0; 3],
            target_distance: None,
        };
        let evals = vec![mk(true, false), mk(false, true), mk(false, false), mk(true, false)];
        assert_eq!(fc_percentage(&evals), 50.0);
        assert_eq!(fc_percentage(&[]), 0.0);
        assert_eq!(fc_percentage(&[mk(false, true)]), 0.0);
    }

    #[test]
    fn chamfer_matches_brute_force_scan() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let a: Vec<Vector3<f64>> = (0..400)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let b: Vec<Vector3<f64>> = (0..350)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let got = chamfer(&a, &b);
        let d_ab: f64 = a
            .iter()
            .map(|p| b.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64;
        let d_ba: f64 = b
            .iter()
            .map(|p| a.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / b.len() as f64;
        let want = 0.5 * (d_ab + d_ba);
        assert_eq!(got, want);
        assert_eq!(chamfer(&a, &a), 0.0);
        assert_eq!(chamfer(&a, &b), chamfer(&b, &a));
    }
}
