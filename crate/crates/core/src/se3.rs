//! SE(3)/so(3) arithmetic: exponential and logarithm maps, composition,
//! random poses and the forward noising step used by the diffusion chart.
//!
//! Twists are ordered `[rho (translational), phi (rotational)]`. Rotations are
//! stored as 3x3 matrices and re-orthonormalized whenever drift exceeds
//! `ORTHO_TOL` so long composition chains stay on the manifold.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Orthonormality drift allowed before a rotation is re-orthonormalized.
pub const ORTHO_TOL: f64 = 1e-9;

/// Rotation angles within this distance of pi have no canonical logarithm.
pub const ANGLE_NEAR_PI_TOL: f64 = 1e-6;

/// Small-angle cutoff below which series expansions replace closed forms.
const SMALL_ANGLE: f64 = 1e-6;

/// Default weight (m/rad) applied to the rotational part in [`twist_distance`].
pub const DEFAULT_ROTATION_SCALE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Se3Error {
    /// Rotation angle within `ANGLE_NEAR_PI_TOL` of pi: the canonical branch
    /// of the logarithm is ill-defined there.
    #[error("rotation angle within {ANGLE_NEAR_PI_TOL:e} of pi; logarithm has no canonical branch")]
    AngleNearPi,
    /// A matrix handed to a constructor is not a proper rotation.
    #[error("matrix is not a proper rotation: {0}")]
    InvalidRotation(String),
}

/// Element of se(3) in the `[rho, phi]` chart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    /// Translational component (meters).
    pub rho: Vector3<f64>,
    /// Rotational component (radians, axis-angle).
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Twist { rho, phi }
    }

    pub fn zero() -> Self {
        Twist {
            rho: Vector3::zeros(),
            phi: Vector3::zeros(),
        }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rho[0], self.rho[1], self.rho[2], self.phi[0], self.phi[1], self.phi[2],
        )
    }

    /// Flat `[rho, phi]` array, the on-disk layout.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.rho[0], self.rho[1], self.rho[2], self.phi[0], self.phi[1], self.phi[2],
        ]
    }

    pub fn from_array(a: &[f64; 6]) -> Self {
        Twist {
            rho: Vector3::new(a[0], a[1], a[2]),
            phi: Vector3::new(a[3], a[4], a[5]),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.rho.norm_squared() + self.phi.norm_squared()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.rho.iter().chain(self.phi.iter()).all(|x| x.is_finite())
    }
}

impl std::ops::Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist {
            rho: self.rho + rhs.rho,
            phi: self.phi + rhs.phi,
        }
    }
}

impl std::ops::Sub for Twist {
    type Output = Twist;
    fn sub(self, rhs: Twist) -> Twist {
        Twist {
            rho: self.rho - rhs.rho,
            phi: self.phi - rhs.phi,
        }
    }
}

impl std::ops::Mul<f64> for Twist {
    type Output = Twist;
    fn mul(self, s: f64) -> Twist {
        Twist {
            rho: self.rho * s,
            phi: self.phi * s,
        }
    }
}

/// Rigid transform: orthonormal rotation plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, validating the rotation and snapping it back onto SO(3)
    /// if drift exceeds `ORTHO_TOL`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, Se3Error> {
        if !rotation.iter().all(|x| x.is_finite()) || !translation.iter().all(|x| x.is_finite()) {
            return Err(Se3Error::InvalidRotation("non-finite entries".into()));
        }
        let drift = ortho_drift(&rotation);
        if drift > 1e-3 {
            return Err(Se3Error::InvalidRotation(format!(
                "orthonormality drift {drift:e} exceeds 1e-3"
            )));
        }
        if rotation.determinant() <= 0.0 {
            return Err(Se3Error::InvalidRotation("determinant not positive".into()));
        }
        let rotation = if drift > ORTHO_TOL {
            orthonormalize(&rotation)
        } else {
            rotation
        };
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Internal constructor for products of valid rotations; fixes drift only.
    fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = if ortho_drift(&rotation) > ORTHO_TOL {
            orthonormalize(&rotation)
        } else {
            rotation
        };
        Pose {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Applies the transform to a point: `R x + t`.
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Row-major 4x4 homogeneous matrix flattened to 16 numbers, the JSON layout.
    pub fn to_flat16(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    pub fn from_flat16(m: &[f64; 16]) -> Result<Self, Se3Error> {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        Pose::new(rotation, translation)
    }
}

fn ortho_drift(r: &Matrix3<f64>) -> f64 {
    let e = r.transpose() * r - Matrix3::identity();
    e.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Modified Gram-Schmidt on rows, third row from the cross product so the
/// result has determinant +1.
fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let r0: Vector3<f64> = r.row(0).transpose();
    let r1: Vector3<f64> = r.row(1).transpose();
    let b0 = r0.normalize();
    let b1 = (r1 - b0 * r1.dot(&b0)).normalize();
    let b2 = b0.cross(&b1);
    Matrix3::from_rows(&[b0.transpose(), b1.transpose(), b2.transpose()])
}

/// Skew-symmetric (hat) matrix of a 3-vector.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Rodrigues coefficients A = sin t / t, B = (1-cos t)/t^2, C = (t-sin t)/t^3
/// with series fallbacks below `SMALL_ANGLE`.
fn rot_coeffs(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    if theta < SMALL_ANGLE {
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let s = theta.sin();
        let c = theta.cos();
        (
            s / theta,
            (1.0 - c) / t2,
            (theta - s) / (t2 * theta),
        )
    }
}

/// Closed-form SE(3) exponential: Rodrigues rotation plus the V-matrix
/// coupling translation to rotation.
pub fn expmap(v: &Twist) -> Pose {
    let theta = v.phi.norm();
    let (a, b, c) = rot_coeffs(theta);
    let k = skew(&v.phi);
    let k2 = k * k;
    let rotation = Matrix3::identity() + k * a + k2 * b;
    let vmat = Matrix3::identity() + k * b + k2 * c;
    Pose::from_parts(rotation, vmat * v.rho)
}

/// Rotation log via quaternion extraction; stable for all angles. Returns
/// (axis * angle, angle).
fn so3_log_total(r: &Matrix3<f64>) -> (Vector3<f64>, f64) {
    // Shepperd's method: pick the largest of (w, x, y, z) for stability.
    let tr = r.trace();
    let (w, x, y, z);
    if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        w = 0.25 * s;
        x = (r[(2, 1)] - r[(1, 2)]) / s;
        y = (r[(0, 2)] - r[(2, 0)]) / s;
        z = (r[(1, 0)] - r[(0, 1)]) / s;
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(2, 1)] - r[(1, 2)]) / s;
        x = 0.25 * s;
        y = (r[(0, 1)] + r[(1, 0)]) / s;
        z = (r[(0, 2)] + r[(2, 0)]) / s;
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        w = (r[(0, 2)] - r[(2, 0)]) / s;
        x = (r[(0, 1)] + r[(1, 0)]) / s;
        y = 0.25 * s;
        z = (r[(1, 2)] + r[(2, 1)]) / s;
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        w = (r[(1, 0)] - r[(0, 1)]) / s;
        x = (r[(0, 2)] + r[(2, 0)]) / s;
        y = (r[(1, 2)] + r[(2, 1)]) / s;
        z = (r[(2, 1)] - r[(1, 2)]) / s;
    }
    // Canonical branch: w >= 0 keeps the angle in [0, pi].
    let (w, x, y, z) = if w < 0.0 { (-w, -x, -y, -z) } else { (w, x, y, z) };
    let vn = (x * x + y * y + z * z).sqrt();
    let theta = 2.0 * vn.atan2(w);
    if vn < 1e-300 {
        return (Vector3::zeros(), 0.0);
    }
    let axis = Vector3::new(x, y, z) / vn;
    (axis * theta, theta)
}

fn vinv_coeff(theta: f64) -> f64 {
    let t2 = theta * theta;
    if theta < SMALL_ANGLE {
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        (1.0 - 0.5 * theta * theta.sin() / (1.0 - theta.cos())) / t2
    }
}

/// Total-function SE(3) logarithm: at angle pi it returns the value on the
/// branch picked by the quaternion extraction. Used where only distances
/// matter; the public [`logmap`] rejects the near-pi band instead.
fn logmap_total(h: &Pose) -> Twist {
    let (phi, theta) = so3_log_total(&h.rotation);
    let k = skew(&phi);
    let vinv = Matrix3::identity() - k * 0.5 + (k * k) * vinv_coeff(theta);
    Twist {
        rho: vinv * h.translation,
        phi,
    }
}

/// Canonical SE(3) logarithm; inverse of [`expmap`] for `|phi| < pi`.
pub fn logmap(h: &Pose) -> Result<Twist, Se3Error> {
    let (phi, theta) = so3_log_total(&h.rotation);
    if theta > std::f64::consts::PI - ANGLE_NEAR_PI_TOL {
        return Err(Se3Error::AngleNearPi);
    }
    let k = skew(&phi);
    let vinv = Matrix3::identity() - k * 0.5 + (k * k) * vinv_coeff(theta);
    Ok(Twist {
        rho: vinv * h.translation,
        phi,
    })
}

/// Group composition `A * B`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose::from_parts(
        a.rotation * b.rotation,
        a.rotation * b.translation + a.translation,
    )
}

/// Group inverse.
pub fn inverse(h: &Pose) -> Pose {
    let rt = h.rotation.transpose();
    Pose::from_parts(rt, -(rt * h.translation))
}

/// The adjoint of `H` on `[rho, phi]` twists: `[[R, t^ R], [0, R]]`.
pub fn adjoint(h: &Pose) -> Matrix6<f64> {
    let mut ad = Matrix6::zeros();
    let tr = skew(&h.translation) * h.rotation;
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&h.rotation);
    ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&h.rotation);
    ad
}

fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    Matrix3::identity() - k * 0.5 + (k * k) * vinv_coeff(theta)
}

/// Q block of the SE(3) left Jacobian (Barfoot's closed form).
fn q_matrix(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let t2 = theta * theta;
    let (b, c, e);
    if theta < 1e-3 {
        // Series keep full f64 accuracy where the closed forms cancel.
        b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
        c = -1.0 / 24.0 + t2 / 720.0 - t2 * t2 / 40320.0;
        e = -1.0 / 120.0 + t2 / 5040.0;
    } else {
        let s = theta.sin();
        let co = theta.cos();
        b = (theta - s) / (t2 * theta);
        c = (1.0 - 0.5 * t2 - co) / (t2 * t2);
        e = (theta - s - t2 * theta / 6.0) / (t2 * t2 * theta);
    }
    let rx = skew(rho);
    let px = skew(phi);
    let m1 = rx;
    let m2 = px * rx + rx * px + px * rx * px;
    let m3 = px * px * rx + rx * px * px - px * rx * px * 3.0;
    let m4 = px * rx * px * px + px * px * rx * px;
    m1 * 0.5 + m2 * b - m3 * c - m4 * (0.5 * (c - 3.0 * e))
}

/// Inverse left Jacobian of SE(3) at twist `v`, satisfying
/// `log(exp(d) * exp(v)) ~= v + Jl_inv(v) d` for small `d`.
pub fn left_jacobian_inv(v: &Twist) -> Matrix6<f64> {
    let jinv = so3_left_jacobian_inv(&v.phi);
    let q = q_matrix(&v.rho, &v.phi);
    let top_right = -jinv * q * jinv;
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&top_right);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    out
}

/// Inverse right Jacobian: `log(exp(v) * exp(d)) ~= v + Jr_inv(v) d`.
pub fn right_jacobian_inv(v: &Twist) -> Matrix6<f64> {
    left_jacobian_inv(&Twist {
        rho: -v.rho,
        phi: -v.phi,
    })
}

/// Axis-aligned box of initial poses: rotations uniform on SO(3),
/// translations uniform in the box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseBounds {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
}

impl PoseBounds {
    pub fn new(center: Vector3<f64>, half_extents: Vector3<f64>) -> Self {
        assert!(
            half_extents.iter().all(|&h| h >= 0.0),
            "half extents must be non-negative"
        );
        PoseBounds {
            center,
            half_extents,
        }
    }

    pub fn inflate(&self, factor: f64) -> Self {
        PoseBounds {
            center: self.center,
            half_extents: self.half_extents * factor,
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| (p[i] - self.center[i]).abs() <= self.half_extents[i] + 1e-12)
    }
}

/// Uniform random pose: rotation from a uniform unit quaternion, translation
/// uniform in the bounds box.
pub fn random_pose<R: Rng + ?Sized>(bounds: &PoseBounds, rng: &mut R) -> Pose {
    let rotation = random_rotation(rng);
    let mut t = bounds.center;
    for i in 0..3 {
        let u: f64 = rng.gen_range(-1.0..=1.0);
        t[i] += u * bounds.half_extents[i];
    }
    Pose::from_parts(rotation, t)
}

/// Uniform rotation on SO(3) via a normalized Gaussian 4-vector quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n < 1e-12 {
            continue;
        }
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        return Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
    }
}

/// Forward noising step in the global chart: `H_k = exp(log(H) + eps)`,
/// `eps ~ N(0, sigma^2 I_6)`. Returns the noise so it can serve as the
/// regression target.
pub fn perturb<R: Rng + ?Sized>(
    h: &Pose,
    sigma: f64,
    rng: &mut R,
) -> Result<(Pose, Twist), Se3Error> {
    assert!(sigma > 0.0, "sigma must be positive");
    let base = logmap(h)?;
    let mut e = [0.0f64; 6];
    for v in &mut e {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * sigma;
    }
    let eps = Twist::from_array(&e);
    Ok((expmap(&(base + eps)), eps))
}

/// Weighted twist metric `|log(A^-1 B)|` with the rotational part scaled by
/// `rotation_scale` (m/rad). Total: falls back to the quaternion branch at pi.
pub fn twist_distance_scaled(a: &Pose, b: &Pose, rotation_scale: f64) -> f64 {
    let rel = compose(&inverse(a), b);
    let u = logmap_total(&rel);
    (u.rho.norm_squared() + rotation_scale * rotation_scale * u.phi.norm_squared()).sqrt()
}

/// [`twist_distance_scaled`] at the default 0.1 m/rad weight.
pub fn twist_distance(a: &Pose, b: &Pose) -> f64 {
    twist_distance_scaled(a, b, DEFAULT_ROTATION_SCALE)
}

/// Relative twist `log(A^-1 B)` on the total branch; building block for
/// analytic distance gradients.
pub fn relative_twist_total(a: &Pose, b: &Pose) -> Twist {
    logmap_total(&compose(&inverse(a), b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    const TOL: f64 = 1e-9;

    fn hom(h: &Pose) -> Matrix4<f64> {
        let f = h.to_flat16();
        Matrix4::from_row_slice(&f)
    }

    /// Generic 4x4 matrix exponential by scaling and squaring; the
    /// independent oracle for expmap.
    fn mat_exp4(a: &Matrix4<f64>) -> Matrix4<f64> {
        let norm = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let k = (norm.log2().ceil().max(0.0) as u32) + 6;
        let scaled = a / 2f64.powi(k as i32);
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for i in 1..24 {
            term = term * scaled / i as f64;
            sum += term;
        }
        let mut out = sum;
        for _ in 0..k {
            out = out * out;
        }
        out
    }

    fn twist_hat4(v: &Twist) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&v.phi));
        m[(0, 3)] = v.rho[0];
        m[(1, 3)] = v.rho[1];
        m[(2, 3)] = v.rho[2];
        m
    }

    fn random_twist<R: Rng>(rng: &mut R, max_angle: f64) -> Twist {
        let mut v = [0.0f64; 6];
        for x in &mut v {
            *x = rng.gen_range(-1.0..1.0);
        }
        let mut t = Twist::from_array(&v);
        let n = t.phi.norm();
        if n > max_angle {
            t.phi *= rng.gen_range(0.0..max_angle) / n;
        }
        t
    }

    #[test]
    fn expmap_identity_and_pure_translation() {
        let id = expmap(&Twist::zero());
        assert_relative_eq!(hom(&id), Matrix4::identity(), epsilon = TOL);

        let v = Twist::new(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros());
        let h = expmap(&v);
        assert_relative_eq!(*h.rotation(), Matrix3::identity(), epsilon = TOL);
        assert_relative_eq!(*h.translation(), Vector3::new(1.0, 2.0, 3.0), epsilon = TOL);
    }

    #[test]
    fn expmap_quarter_turn_about_z() {
        let v = Twist::new(
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
        );
        let h = expmap(&v);
        let oracle = mat_exp4(&twist_hat4(&v));
        assert_relative_eq!(hom(&h), oracle, epsilon = 1e-8);
        assert_relative_eq!(*h.translation(), Vector3::zeros(), epsilon = TOL);
        let expect = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(*h.rotation(), expect, epsilon = TOL);
    }

    #[test]
    fn expmap_matches_matrix_exponential_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..100 {
            let v = random_twist(&mut rng, 3.0);
            let h = expmap(&v);
            let oracle = mat_exp4(&twist_hat4(&v));
            assert_relative_eq!(hom(&h), oracle, epsilon = 1e-8);
        }
    }

    #[test]
    fn log_exp_round_trip_canonical_twists() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let v = random_twist(&mut rng, 3.0);
            let back = logmap(&expmap(&v)).unwrap();
            worst = worst.max((back - v).norm());
        }
        assert!(worst < 1e-8, "round trip error {worst:e}");
    }

    #[test]
    fn logmap_identity_and_pure_translation() {
        assert!(logmap(&Pose::identity()).unwrap().norm() < TOL);
        let h = Pose::new(Matrix3::identity(), Vector3::new(0.3, -0.2, 0.9)).unwrap();
        let v = logmap(&h).unwrap();
        assert_relative_eq!(v.rho, Vector3::new(0.3, -0.2, 0.9), epsilon = TOL);
        assert!(v.phi.norm() < TOL);
    }

    #[test]
    fn logmap_rejects_angle_near_pi() {
        let v = Twist::new(
            Vector3::zeros(),
            Vector3::new(std::f64::consts::PI - 1e-9, 0.0, 0.0),
        );
        assert_eq!(logmap(&expmap(&v)), Err(Se3Error::AngleNearPi));
    }

    #[test]
    fn compose_inverse_and_associativity() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = expmap(&random_twist(&mut rng, 3.0));
            let b = expmap(&random_twist(&mut rng, 3.0));
            let c = expmap(&random_twist(&mut rng, 3.0));
            let left = compose(&compose(&a, &b), &c);
            let right = compose(&a, &compose(&b, &c));
            assert_relative_eq!(hom(&left), hom(&right), epsilon = TOL);
            let id = compose(&a, &inverse(&a));
            assert_relative_eq!(hom(&id), Matrix4::identity(), epsilon = TOL);
            let same = compose(&Pose::identity(), &a);
            assert_relative_eq!(hom(&same), hom(&a), epsilon = TOL);
        }
    }

    #[test]
    fn random_pose_respects_bounds() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let bounds = PoseBounds::new(Vector3::new(1.0, -2.0, 0.5), Vector3::new(0.2, 0.3, 0.1));
        for _ in 0..1000 {
            let h = random_pose(&bounds, &mut rng);
            assert!(bounds.contains(h.translation()));
            assert!(ortho_drift(h.rotation()) < TOL);
        }
        let point = PoseBounds::new(Vector3::new(4.0, 5.0, 6.0), Vector3::zeros());
        let h = random_pose(&point, &mut rng);
        assert_relative_eq!(*h.translation(), Vector3::new(4.0, 5.0, 6.0), epsilon = 0.0);
    }

    #[test]
    fn random_rotation_uniformity_smoke() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut mean = Matrix3::zeros();
        let n = 10_000;
        for _ in 0..n {
            mean += random_rotation(&mut rng);
        }
        mean /= n as f64;
        for x in mean.iter() {
            assert!(x.abs() < 0.02, "mean entry {x} too far from 0");
        }
    }

    #[test]
    fn perturb_limits_and_statistics() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let h = expmap(&random_twist(&mut rng, 1.0));
        let (hk, eps) = perturb(&h, 1e-12, &mut rng).unwrap();
        assert!(twist_distance(&h, &hk) < 1e-9);
        assert!(eps.norm() < 1e-10);

        // Identity base point: H_k must equal exp(eps) exactly.
        let (hk, eps) = perturb(&Pose::identity(), 0.1, &mut rng).unwrap();
        assert_relative_eq!(hom(&hk), hom(&expmap(&eps)), epsilon = 0.0);

        // Component std within 2% of sigma over 10k draws.
        let sigma = 0.37;
        let n = 10_000;
        let mut sumsq = [0.0f64; 6];
        for _ in 0..n {
            let (_, eps) = perturb(&h, sigma, &mut rng).unwrap();
            for (s, x) in sumsq.iter_mut().zip(eps.to_array()) {
                *s += x * x;
            }
        }
        for s in sumsq {
            let std = (s / n as f64).sqrt();
            assert!((std - sigma).abs() / sigma < 0.02, "std {std} vs {sigma}");
        }
    }

    #[test]
    fn twist_distance_properties() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let a = expmap(&random_twist(&mut rng, 2.0));
        assert_eq!(twist_distance(&a, &a), 0.0);
        for _ in 0..200 {
            let x = expmap(&random_twist(&mut rng, 2.0));
            let y = expmap(&random_twist(&mut rng, 2.0));
            assert!((twist_distance(&x, &y) - twist_distance(&y, &x)).abs() < 1e-9);
        }
        let b = compose(
            &a,
            &Pose::new(Matrix3::identity(), Vector3::new(0.0, 1.0, 0.0)).unwrap(),
        );
        assert_relative_eq!(twist_distance(&a, &b), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn adjoint_conjugation_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for _ in 0..100 {
            let h = expmap(&random_twist(&mut rng, 2.0));
            let v = random_twist(&mut rng, 0.5);
            let lhs = compose(&compose(&h, &expmap(&v)), &inverse(&h));
            let advec = adjoint(&h) * v.to_vector();
            let rhs = expmap(&Twist::from_vector(&advec));
            assert_relative_eq!(hom(&lhs), hom(&rhs), epsilon = 1e-9);
        }
    }

    #[test]
    fn left_jacobian_inverse_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        for _ in 0..100 {
            let v = random_twist(&mut rng, 2.5);
            let jinv = left_jacobian_inv(&v);
            let h = 1e-6;
            for i in 0..6 {
                let mut da = [0.0f64; 6];
                da[i] = h;
                let d = Twist::from_array(&da);
                let plus = logmap(&compose(&expmap(&d), &expmap(&v)))
                    .unwrap()
                    .to_vector();
                let minus = logmap(&compose(&expmap(&(d * -1.0)), &expmap(&v)))
                    .unwrap()
                    .to_vector();
                let fd = (plus - minus) / (2.0 * h);
                let col = jinv.column(i).into_owned();
                assert!(
                    (fd - col).norm() < 1e-5 * (1.0 + col.norm()),
                    "Jl_inv column {i} mismatch: fd {fd:?} vs {col:?}"
                );
            }
        }
    }

    #[test]
    fn pose_flat16_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        let h = expmap(&random_twist(&mut rng, 2.0));
        let m = h.to_flat16();
        let back = Pose::from_flat16(&m).unwrap();
        assert_eq!(h, back);
        assert_eq!(&m[12..16], &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn pose_constructor_rejects_garbage() {
        let bad = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Pose::new(bad, Vector3::zeros()).is_err());
        let scaled = Matrix3::identity() * 1.5;
        assert!(Pose::new(scaled, Vector3::zeros()).is_err());
    }
}
