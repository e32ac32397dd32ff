//! Procedural desk-scale dataset: parametric meshes, analytically generated
//! force-closure-verified antipodal grasps, and the analytic oracle energy
//! field used to test the sampler independently of any trained model.

use crate::diffusion::EnergyField;
use crate::eval::{
    collision_check, force_closure, Contact, GripperSpec, DEFAULT_FC_DELTA, DEFAULT_FC_EPS,
};
use crate::geometry::{load_mesh, write_obj_mesh, Bvh, GeometryError, Mesh};
use crate::se3::{adjoint, relative_twist_total, right_jacobian_inv, Pose, Twist};
use nalgebra::{Matrix3, Vector3, Vector6};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dataset file: {0}")]
    Parse(String),
}

// ---- parametric meshes ----------------------------------------------------

/// Axis-aligned box from center and half extents, outward-oriented.
pub fn box_mesh(center: Vector3<f64>, half: Vector3<f64>) -> Mesh {
    let c = center;
    let h = half;
    let v = |sx: f64, sy: f64, sz: f64| {
        Vector3::new(c[0] + sx * h[0], c[1] + sy * h[1], c[2] + sz * h[2])
    };
    let vertices = vec![
        v(-1.0, -1.0, -1.0),
        v(1.0, -1.0, -1.0),
        v(1.0, 1.0, -1.0),
        v(-1.0, 1.0, -1.0),
        v(-1.0, -1.0, 1.0),
        v(1.0, -1.0, 1.0),
        v(1.0, 1.0, 1.0),
        v(-1.0, 1.0, 1.0),
    ];
    let triangles = vec![
        // bottom (-z), top (+z)
        [0u32, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        // -y, +y
        [0, 1, 5],
        [0, 5, 4],
        [2, 3, 7],
        [2, 7, 6],
        // +x, -x
        [1, 2, 6],
        [1, 6, 5],
        [3, 0, 4],
        [3, 4, 7],
    ];
    Mesh::new(vertices, triangles).expect("box mesh valid")
}

/// Unit cube centered at the origin.
pub fn unit_box_mesh() -> Mesh {
    box_mesh(Vector3::zeros(), Vector3::repeat(0.5))
}

/// Closed cylinder along +z, base at z = 0.
pub fn cylinder_mesh(radius: f64, height: f64, segments: usize) -> Mesh {
    assert!(segments >= 3);
    let mut vertices = vec![
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(0.0, 0.0, height),
    ];
    for ring_z in [0.0, height] {
        for s in 0..segments {
            let a = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push(Vector3::new(radius * a.cos(), radius * a.sin(), ring_z));
        }
    }
    let bottom = |s: usize| (2 + s % segments) as u32;
    let top = |s: usize| (2 + segments + s % segments) as u32;
    let mut triangles = Vec::new();
    for s in 0..segments {
        triangles.push([0, bottom(s + 1), bottom(s)]);
        triangles.push([1, top(s), top(s + 1)]);
        triangles.push([bottom(s), bottom(s + 1), top(s + 1)]);
        triangles.push([bottom(s), top(s + 1), top(s)]);
    }
    Mesh::new(vertices, triangles).expect("cylinder mesh valid")
}

/// L-shaped prism: an L cross-section in the xz plane (legs along +x and
/// +z, thickness `t`) extruded along y by `depth`, centered in y.
pub fn l_bracket_mesh(leg_a: f64, leg_b: f64, t: f64, depth: f64) -> Mesh {
    assert!(t < leg_a && t < leg_b);
    let profile = [
        (0.0, 0.0),
        (leg_a, 0.0),
        (leg_a, t),
        (t, t),
        (t, leg_b),
        (0.0, leg_b),
    ];
    let hy = 0.5 * depth;
    let mut vertices = Vec::with_capacity(12);
    for &(x, z) in &profile {
        vertices.push(Vector3::new(x, -hy, z));
    }
    for &(x, z) in &profile {
        vertices.push(Vector3::new(x, hy, z));
    }
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    // Front (-y) face: fan from the corner vertex keeps every triangle
    // inside the L (the profile is star-shaped from the origin).
    let fan = [[0u32, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 5]];
    triangles.extend_from_slice(&fan);
    // Back (+y) face: reversed winding, offset by 6.
    for f in fan {
        triangles.push([f[0] + 6, f[2] + 6, f[1] + 6]);
    }
    // Side walls around the CCW profile.
    for i in 0..6u32 {
        let j = (i + 1) % 6;
        triangles.push([i, j + 6, j]);
        triangles.push([i, i + 6, j + 6]);
    }
    Mesh::new(vertices, triangles).expect("bracket mesh valid")
}

/// Two stacked boxes (a step): the base spans `[0, h1]` in z, the smaller
/// top box sits centered on it.
pub fn two_box_mesh(base_half: Vector3<f64>, top_half: Vector3<f64>, h1: f64, h2: f64) -> Mesh {
    assert!(top_half[0] < base_half[0] && top_half[1] < base_half[1]);
    let (wx, wy) = (base_half[0], base_half[1]);
    let (vx, vy) = (top_half[0], top_half[1]);
    let corners = |hx: f64, hy: f64, z: f64| {
        [
            Vector3::new(-hx, -hy, z),
            Vector3::new(hx, -hy, z),
            Vector3::new(hx, hy, z),
            Vector3::new(-hx, hy, z),
        ]
    };
    let mut vertices = Vec::with_capacity(16);
    vertices.extend_from_slice(&corners(wx, wy, 0.0)); // 0..4 bottom outer
    vertices.extend_from_slice(&corners(wx, wy, h1)); // 4..8 ring outer
    vertices.extend_from_slice(&corners(vx, vy, h1)); // 8..12 ring inner
    vertices.extend_from_slice(&corners(vx, vy, h1 + h2)); // 12..16 top
    let mut triangles: Vec<[u32; 3]> = vec![[0, 2, 1], [0, 3, 2], [12, 13, 14], [12, 14, 15]];
    for i in 0..4u32 {
        let j = (i + 1) % 4;
        // Lower walls.
        triangles.push([i, j, j + 4]);
        triangles.push([i, j + 4, i + 4]);
        // Step ring, facing +z.
        triangles.push([i + 4, j + 4, j + 8]);
        triangles.push([i + 4, j + 8, i + 8]);
        // Upper walls.
        triangles.push([i + 8, j + 8, j + 12]);
        triangles.push([i + 8, j + 12, i + 12]);
    }
    Mesh::new(vertices, triangles).expect("two-box mesh valid")
}

/// Small UV sphere, used by tests that need every diameter graspable.
pub fn sphere_mesh(radius: f64, rings: usize, segments: usize) -> Mesh {
    assert!(rings >= 2 && segments >= 3);
    let mut vertices = vec![Vector3::new(0.0, 0.0, -radius)];
    for r in 1..rings {
        let phi = std::f64::consts::PI * r as f64 / rings as f64 - std::f64::consts::FRAC_PI_2;
        for s in 0..segments {
            let th = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push(Vector3::new(
                radius * phi.cos() * th.cos(),
                radius * phi.cos() * th.sin(),
                radius * phi.sin(),
            ));
        }
    }
    vertices.push(Vector3::new(0.0, 0.0, radius));
    let top = vertices.len() as u32 - 1;
    let ring = |r: usize, s: usize| (1 + (r - 1) * segments + s % segments) as u32;
    let mut triangles = Vec::new();
    for s in 0..segments {
        triangles.push([0, ring(1, s + 1), ring(1, s)]);
        triangles.push([top, ring(rings - 1, s), ring(rings - 1, s + 1)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            triangles.push([ring(r, s), ring(r, s + 1), ring(r + 1, s + 1)]);
            triangles.push([ring(r, s), ring(r + 1, s + 1), ring(r + 1, s)]);
        }
    }
    Mesh::new(vertices, triangles).expect("sphere mesh valid")
}

// ---- shape specs ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    Box {
        half_extents: [f64; 3],
    },
    Cylinder {
        radius: f64,
        height: f64,
        #[serde(default = "default_segments")]
        segments: usize,
    },
    LBracket {
        leg_a: f64,
        leg_b: f64,
        thickness: f64,
        depth: f64,
    },
    TwoBox {
        base_half: [f64; 3],
        top_half: [f64; 3],
    },
}

fn default_segments() -> usize {
    48
}

// No deny_unknown_fields here: serde cannot combine it with flatten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ShapeKind,
}

impl ShapeSpec {
    pub fn make(&self) -> Mesh {
        match &self.kind {
            ShapeKind::Box { half_extents } => box_mesh(
                Vector3::zeros(),
                Vector3::new(half_extents[0], half_extents[1], half_extents[2]),
            ),
            ShapeKind::Cylinder {
                radius,
                height,
                segments,
            } => cylinder_mesh(*radius, *height, *segments),
            ShapeKind::LBracket {
                leg_a,
                leg_b,
                thickness,
                depth,
            } => l_bracket_mesh(*leg_a, *leg_b, *thickness, *depth),
            ShapeKind::TwoBox { base_half, top_half } => two_box_mesh(
                Vector3::new(base_half[0], base_half[1], base_half[2]),
                Vector3::new(top_half[0], top_half[1], top_half[2]),
                2.0 * base_half[2],
                2.0 * top_half[2],
            ),
        }
    }
}

/// The three default toy shapes, sized for the default gripper.
pub fn default_shape_specs() -> Vec<ShapeSpec> {
    vec![
        ShapeSpec {
            name: "box".into(),
            kind: ShapeKind::Box {
                half_extents: [0.035, 0.025, 0.12],
            },
        },
        ShapeSpec {
            name: "cylinder".into(),
            kind: ShapeKind::Cylinder {
                radius: 0.032,
                height: 0.26,
                segments: 48,
            },
        },
        ShapeSpec {
            name: "bracket".into(),
            kind: ShapeKind::LBracket {
                leg_a: 0.16,
                leg_b: 0.16,
                thickness: 0.05,
                depth: 0.05,
            },
        },
    ]
}

// ---- antipodal grasp labels -------------------------------------------------

/// A verified grasp label: gripper pose (approach +z, closing axis +-x),
/// its contact pair and jaw width.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspLabel {
    pub pose: Pose,
    pub contacts: [Contact; 2],
    pub width: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContactJson {
    position: [f64; 3],
    normal: [f64; 3],
    friction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraspLabelJson {
    pose: Vec<f64>,
    contacts: Vec<ContactJson>,
    width: f64,
}

impl GraspLabel {
    fn to_json(&self) -> GraspLabelJson {
        GraspLabelJson {
            pose: self.pose.to_flat16().to_vec(),
            contacts: self
                .contacts
                .iter()
                .map(|c| ContactJson {
                    position: [c.position[0], c.position[1], c.position[2]],
                    normal: [c.normal[0], c.normal[1], c.normal[2]],
                    friction: c.friction,
                })
                .collect(),
            width: self.width,
        }
    }

    fn from_json(j: &GraspLabelJson) -> Result<Self, DatasetError> {
        let arr: [f64; 16] = j
            .pose
            .as_slice()
            .try_into()
            .map_err(|_| DatasetError::Parse("pose needs 16 numbers".into()))?;
        let pose = Pose::from_flat16(&arr)
            .map_err(|e| DatasetError::Parse(format!("bad pose: {e}")))?;
        if j.contacts.len() != 2 {
            return Err(DatasetError::Parse("label needs 2 contacts".into()));
        }
        let c = |cj: &ContactJson| Contact {
            position: Vector3::new(cj.position[0], cj.position[1], cj.position[2]),
            normal: Vector3::new(cj.normal[0], cj.normal[1], cj.normal[2]),
            friction: cj.friction,
        };
        Ok(GraspLabel {
            pose,
            contacts: [c(&j.contacts[0]), c(&j.contacts[1])],
            width: j.width,
        })
    }
}

/// Samples antipodal grasps: a surface point plus its opposing contact along
/// the inward normal, accepted when both contact normals lie in the friction
/// cone of the closing line, the width fits the jaw, the (max-opening)
/// gripper does not collide, and the contact pair passes force closure.
/// Returns what it found and whether the request was met in budget.
pub fn antipodal_grasps<R: Rng + ?Sized>(
    mesh: &Mesh,
    bvh: &Bvh,
    gripper: &GripperSpec,
    n: usize,
    mu: f64,
    rng: &mut R,
) -> (Vec<GraspLabel>, bool) {
    assert!(n >= 1 && mu >= 0.0);
    let budget = 400 * n;
    let cone = mu.atan();
    let mut labels = Vec::with_capacity(n);
    let faces = mesh.triangles().len();
    let mut cdf = Vec::with_capacity(faces);
    let mut acc = 0.0;
    for f in 0..faces {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    for _ in 0..budget {
        if labels.len() >= n {
            break;
        }
        let u: f64 = rng.gen_range(0.0..acc);
        let f = cdf.partition_point(|&c| c < u).min(faces - 1);
        let [a, b, c3] = mesh.corners(f);
        let r1: f64 = rng.gen();
        let r2: f64 = rng.gen();
        let s = r1.sqrt();
        let p1 = a * (1.0 - s) + b * (s * (1.0 - r2)) + c3 * (s * r2);
        let n1 = mesh.face_normal(f);

        let Some(hit) = bvh.raycast(&(p1 - n1 * 1e-7), &-n1) else {
            continue;
        };
        let width = (hit.position - p1).norm();
        if width < 1e-4 || width > gripper.max_opening - 0.002 {
            continue;
        }
        let p2 = hit.position;
        let n2 = hit.normal;
        let line = (p2 - p1) / width;
        // Friction-cone checks: force at p1 acts along +line inside the cone
        // about -n1, force at p2 along -line inside the cone about -n2.
        if line.dot(&-n1).acos() > cone + 1e-12 || (-line).dot(&-n2).acos() > cone + 1e-12 {
            continue;
        }

        let center = (p1 + p2) * 0.5;
        let x_axis = line;
        let aux = if x_axis[2].abs() < 0.9 {
            Vector3::new(0.0, 0.0, 1.0)
        } else {
            Vector3::new(0.0, 1.0, 0.0)
        };
        let b1 = x_axis.cross(&aux).normalize();
        let b2 = x_axis.cross(&b1);
        let psi: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let z_axis = b1 * psi.cos() + b2 * psi.sin();
        let y_axis = z_axis.cross(&x_axis);
        let rot = Matrix3::from_columns(&[x_axis, y_axis, z_axis]);
        let t = center - rot * gripper.grasp_center_local();
        let Ok(pose) = Pose::new(rot, t) else {
            continue;
        };
        if collision_check(bvh, gripper, &pose) {
            continue;
        }
        let contacts = [
            Contact {
                position: p1,
                normal: -n1,
                friction: mu,
            },
            Contact {
                position: p2,
                normal: -n2,
                friction: mu,
            },
        ];
        if !force_closure(&contacts, DEFAULT_FC_EPS, DEFAULT_FC_DELTA) {
            continue;
        }
        labels.push(GraspLabel {
            pose,
            contacts,
            width,
        });
    }
    let complete = labels.len() >= n;
    (labels, complete)
}

// ---- analytic oracle energy field --------------------------------------------

/// Softmin-of-squared-twist-distance energy over a label set: an analytic
/// stand-in for the learned field with the same interface.
///
/// As an [`EnergyField`] the softmin is scaled by `1/(2 sigma^2)`, the
/// denoising-score-matching convention: the gradient then approximates
/// `displacement / sigma^2`, which is what the inverse diffusion step needs
/// for its stationary spread to anneal with the noise level.
pub struct OracleField {
    labels: Vec<Pose>,
    pub temperature: f64,
    pub rotation_scale: f64,
}

impl OracleField {
    pub fn new(labels: Vec<Pose>, temperature: f64, rotation_scale: f64) -> Self {
        assert!(!labels.is_empty() && temperature > 0.0);
        OracleField {
            labels,
            temperature,
            rotation_scale,
        }
    }

    /// The plain softmin over squared twist distances, no noise-level scale.
    pub fn unscaled_energy(&self, pose: &Pose) -> f64 {
        self.softmin_terms(pose).2
    }

    pub fn labels(&self) -> &[Pose] {
        &self.labels
    }

    fn weight_matrix(&self) -> Vector6<f64> {
        let s2 = self.rotation_scale * self.rotation_scale;
        Vector6::new(1.0, 1.0, 1.0, s2, s2, s2)
    }

    /// Softmax weights over -d^2/tau, plus each relative twist.
    fn softmin_terms(&self, pose: &Pose) -> (Vec<f64>, Vec<Twist>, f64) {
        let w = self.weight_matrix();
        let mut d2 = Vec::with_capacity(self.labels.len());
        let mut twists = Vec::with_capacity(self.labels.len());
        for l in &self.labels {
            let u = relative_twist_total(pose, l);
            let v = u.to_vector();
            let dd: f64 = (0..6).map(|i| w[i] * v[i] * v[i]).sum();
            d2.push(dd);
            twists.push(u);
        }
        let m = d2.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut weights: Vec<f64> = d2.iter().map(|&x| (-(x - m) / self.temperature).exp()).collect();
        let z: f64 = weights.iter().sum();
        for wt in &mut weights {
            *wt /= z;
        }
        // Softmin value: m - tau ln(sum exp(-(d2-m)/tau)).
        let e = m - self.temperature * z.ln();
        (weights, twists, e)
    }
}

impl EnergyField for OracleField {
    fn energy(&self, pose: &Pose, sigma: f64) -> f64 {
        self.softmin_terms(pose).2 / (2.0 * sigma * sigma)
    }

    /// Analytic left-trivialized gradient:
    /// `d d^2/de = -2 u^T W Jr_inv(u) Ad(L^-1)` per label, softmax-weighted,
    /// then scaled like the energy.
    fn gradient(&self, pose: &Pose, sigma: f64) -> Twist {
        let (weights, twists, _) = self.softmin_terms(pose);
        let wdiag = self.weight_matrix();
        let mut g = Vector6::zeros();
        for ((label, u), wt) in self.labels.iter().zip(&twists).zip(&weights) {
            let v = u.to_vector();
            let mut wu = v;
            for i in 0..6 {
                wu[i] *= wdiag[i];
            }
            let jr_inv = right_jacobian_inv(u);
            let ad_linv = adjoint(&crate::se3::inverse(label));
            let row = -2.0 * (jr_inv.transpose() * wu);
            g += (ad_linv.transpose() * row) * *wt;
        }
        Twist::from_vector(&(g / (2.0 * sigma * sigma)))
    }
}

// ---- dataset directory -----------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpecFile {
    pub shapes: Vec<ShapeSpec>,
    pub grasps_per_shape: usize,
    #[serde(default = "default_friction")]
    pub friction: f64,
    #[serde(default)]
    pub gripper: GripperOverride,
}

fn default_friction() -> f64 {
    crate::eval::DEFAULT_FRICTION
}

/// Optional gripper overrides in the dataset spec.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GripperOverride {
    pub finger_length: Option<f64>,
    pub max_opening: Option<f64>,
}

impl GripperOverride {
    pub fn apply(&self, mut g: GripperSpec) -> GripperSpec {
        if let Some(l) = self.finger_length {
            g.finger_length = l;
        }
        if let Some(w) = self.max_opening {
            g.max_opening = w;
        }
        g
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestShape {
    pub name: String,
    pub mesh_file: String,
    pub grasps_file: String,
    pub grasp_count: usize,
    pub complete: bool,
    pub mesh_hash: String,
    pub grasps_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub friction: f64,
    pub gripper: GripperSpec,
    pub shapes: Vec<ManifestShape>,
    pub specs: Vec<ShapeSpec>,
}

fn fnv_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

/// Generates the dataset directory: one OBJ and one grasp JSON per shape
/// plus a manifest with content hashes. Deterministic under (spec, seed).
pub fn generate_dataset(
    spec: &DatasetSpecFile,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest, DatasetError> {
    std::fs::create_dir_all(out_dir)?;
    let gripper = spec.gripper.apply(GripperSpec::default());
    let shapes: Vec<(usize, Vec<GraspLabel>, bool, Mesh)> =
        crate::exec::map_indexed(spec.shapes.len(), |i| {
            let mesh = spec.shapes[i].make();
            let bvh = Bvh::build(&mesh);
            let mut rng = crate::rng::stream_rng(seed, 1000 + i as u64);
            let (labels, complete) = antipodal_grasps(
                &mesh,
                &bvh,
                &gripper,
                spec.grasps_per_shape,
                spec.friction,
                &mut rng,
            );
            (i, labels, complete, mesh)
        });

    let mut manifest_shapes = Vec::new();
    for (i, labels, complete, mesh) in shapes {
        let name = &spec.shapes[i].name;
        let mesh_file = format!("{name}.obj");
        let grasps_file = format!("{name}_grasps.json");
        write_obj_mesh(&out_dir.join(&mesh_file), &mesh)?;
        let json: Vec<GraspLabelJson> = labels.iter().map(|l| l.to_json()).collect();
        std::fs::write(
            out_dir.join(&grasps_file),
            serde_json::to_string_pretty(&json).expect("labels serialize"),
        )?;
        manifest_shapes.push(ManifestShape {
            name: name.clone(),
            grasp_count: labels.len(),
            complete,
            mesh_hash: fnv_hex(&std::fs::read(out_dir.join(&mesh_file))?),
            grasps_hash: fnv_hex(&std::fs::read(out_dir.join(&grasps_file))?),
            mesh_file,
            grasps_file,
        });
    }
    let manifest = Manifest {
        seed,
        friction: spec.friction,
        gripper,
        shapes: manifest_shapes,
        specs: spec.shapes.clone(),
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

/// A dataset shape loaded back from disk.
pub struct DatasetShape {
    pub name: String,
    pub mesh: Mesh,
    pub labels: Vec<GraspLabel>,
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<DatasetShape>), DatasetError> {
    let manifest: Manifest = serde_json::from_str(
        &std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| DatasetError::Parse(format!("missing manifest: {e}")))?,
    )
    .map_err(|e| DatasetError::Parse(format!("bad manifest: {e}")))?;
    let mut shapes = Vec::new();
    for m in &manifest.shapes {
        let mesh = load_mesh(&dir.join(&m.mesh_file))?;
        let json: Vec<GraspLabelJson> =
            serde_json::from_str(&std::fs::read_to_string(dir.join(&m.grasps_file))?)
                .map_err(|e| DatasetError::Parse(format!("bad grasps file: {e}")))?;
        let labels: Result<Vec<GraspLabel>, DatasetError> =
            json.iter().map(GraspLabel::from_json).collect();
        shapes.push(DatasetShape {
            name: m.name.clone(),
            mesh,
            labels: labels?,
        });
    }
    Ok((manifest, shapes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{expmap, twist_distance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use tempfile::tempdir;

    #[test]
    fn parametric_meshes_are_watertight_and_sized() {
        let b = unit_box_mesh();
        assert_eq!(b.triangles().len(), 12);
        assert!((b.signed_volume() - 1.0).abs() < 1e-12);

        let c = cylinder_mesh(0.1, 0.4, 64);
        assert!(c.is_watertight());
        assert_eq!(c.euler_characteristic(), 2);
        let analytic = std::f64::consts::PI * 0.1 * 0.1 * 0.4;
        assert!((c.signed_volume() - analytic).abs() / analytic < 0.01);

        let l = l_bracket_mesh(0.16, 0.16, 0.05, 0.05);
        assert!(l.is_watertight());
        assert_eq!(l.euler_characteristic(), 2);
        let vol = 0.05 * (0.16 * 0.05 + (0.16 - 0.05) * 0.05);
        assert!((l.signed_volume() - vol).abs() < 1e-9);

        let t = two_box_mesh(
            Vector3::new(0.06, 0.04, 0.03),
            Vector3::new(0.03, 0.025, 0.04),
            0.06,
            0.08,
        );
        assert!(t.is_watertight());
        assert_eq!(t.euler_characteristic(), 2);
        let vol = 0.12 * 0.08 * 0.06 + 0.06 * 0.05 * 0.08;
        assert!((t.signed_volume() - vol).abs() < 1e-9);

        let s = sphere_mesh(0.05, 12, 24);
        assert!(s.is_watertight());
        assert_eq!(s.euler_characteristic(), 2);
    }

    #[test]
    fn box_grasps_have_opposing_face_contacts() {
        let spec = default_shape_specs();
        let mesh = spec[0].make();
        let bvh = Bvh::build(&mesh);
        let gripper = GripperSpec::default();
        let mut rng = ChaCha12Rng::seed_from_u64(100);
        let (labels, complete) = antipodal_grasps(&mesh, &bvh, &gripper, 40, 0.3, &mut rng);
        assert!(complete, "only found {}", labels.len());
        for l in &labels {
            // Opposing faces: inward normals antiparallel.
            assert!(l.contacts[0].normal.dot(&l.contacts[1].normal) < -0.99);
            assert!(l.width <= gripper.max_opening);
            assert!(force_closure(&l.contacts, DEFAULT_FC_EPS, DEFAULT_FC_DELTA));
            assert!(!collision_check(&bvh, &gripper, &l.pose));
            // Grasp center sits at the contact midpoint.
            let center = l.pose.apply(&gripper.grasp_center_local());
            let midpoint = (l.contacts[0].position + l.contacts[1].position) * 0.5;
            assert!((center - midpoint).norm() < 1e-9);
        }
    }

    #[test]
    fn sphere_accepts_diameter_grasps_everywhere() {
        let mesh = sphere_mesh(0.03, 16, 32);
        let bvh = Bvh::build(&mesh);
        let gripper = GripperSpec::default();
        let mut rng = ChaCha12Rng::seed_from_u64(101);
        let (labels, complete) = antipodal_grasps(&mesh, &bvh, &gripper, 30, 0.3, &mut rng);
        assert!(complete);
        for l in &labels {
            assert!(l.contacts[0].normal.dot(&l.contacts[1].normal) < -0.95);
        }
    }

    #[test]
    fn zero_friction_keeps_only_exact_antipodal_pairs() {
        let spec = default_shape_specs();
        let mesh = spec[0].make();
        let bvh = Bvh::build(&mesh);
        let gripper = GripperSpec::default();
        let mut rng = ChaCha12Rng::seed_from_u64(102);
        let (labels, _) = antipodal_grasps(&mesh, &bvh, &gripper, 10, 0.0, &mut rng);
        // With a line cone every kept grasp has its closing line exactly
        // along both normals; a corner-to-corner candidate cannot pass.
        for l in &labels {
            let line = (l.contacts[1].position - l.contacts[0].position).normalize();
            assert!(line.dot(&l.contacts[0].normal).abs() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn oracle_energy_near_labels_and_gradient_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(103);
        // Labels spread far apart relative to the temperature, so the
        // softmin is dominated by the nearest one.
        let labels: Vec<Pose> = (0..5)
            .map(|i| {
                expmap(&Twist::new(
                    Vector3::new(0.4 * i as f64, 0.0, 0.0),
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ),
                ))
            })
            .collect();
        let field = OracleField::new(labels.clone(), 0.01, 0.1);

        // Plain energy at a label is within tau ln(count) of zero.
        let at_label = field.unscaled_energy(&labels[0]);
        assert!(at_label.abs() <= 0.01 * (labels.len() as f64).ln() + 1e-9);

        // Gradient at a label pose is near zero.
        let g0 = field.gradient(&labels[0], 1.0);
        assert!(g0.norm() < 1e-4, "gradient at label {:?}", g0);

        // FD check at random poses.
        let h = 1e-6;
        for _ in 0..30 {
            let pose = expmap(&Twist::new(
                Vector3::new(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                ),
                Vector3::new(
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                ),
            ));
            let g = field.gradient(&pose, 1.0).to_array();
            for i in 0..6 {
                let mut e = [0.0; 6];
                e[i] = h;
                let p = crate::se3::compose(&expmap(&Twist::from_array(&e)), &pose);
                e[i] = -h;
                let m = crate::se3::compose(&expmap(&Twist::from_array(&e)), &pose);
                let fd = (field.energy(&p, 1.0) - field.energy(&m, 1.0)) / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs().max(g[i].abs())),
                    "axis {i}: fd {fd} vs {}",
                    g[i]
                );
            }
        }
        let _ = twist_distance;
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let spec = DatasetSpecFile {
            shapes: vec![default_shape_specs().remove(0)],
            grasps_per_shape: 12,
            friction: 0.3,
            gripper: GripperOverride::default(),
        };
        let dir1 = tempdir().unwrap();
        let dir2 = tempdir().unwrap();
        let m1 = generate_dataset(&spec, 9, dir1.path()).unwrap();
        let m2 = generate_dataset(&spec, 9, dir2.path()).unwrap();
        assert_eq!(m1.shapes[0].mesh_hash, m2.shapes[0].mesh_hash);
        assert_eq!(m1.shapes[0].grasps_hash, m2.shapes[0].grasps_hash);
        assert!(m1.shapes[0].complete);

        let (manifest, shapes) = load_dataset(dir1.path()).unwrap();
        assert_eq!(manifest.shapes[0].grasp_count, 12);
        assert_eq!(shapes[0].labels.len(), 12);
        // Re-verify the build-time invariant on the loaded copies.
        let bvh = Bvh::build(&shapes[0].mesh);
        for l in &shapes[0].labels {
            assert!(force_closure(&l.contacts, DEFAULT_FC_EPS, DEFAULT_FC_DELTA));
            assert!(!collision_check(&bvh, &manifest.gripper, &l.pose));
        }
    }
}
