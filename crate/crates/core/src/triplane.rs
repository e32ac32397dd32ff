//! Tri-plane shape features: per-point MLP features scattered onto three
//! axis-aligned grids (average pooled), smoothed by a shared convolution
//! stack, and queried by bilinear interpolation.
//!
//! All coordinates here live in the normalized unit volume produced by
//! [`crate::geometry::normalize_cloud`]; the grids span `[-0.55, 0.55]` so
//! the 5% margin stays inside the sampled area.

use crate::geometry::{NormTransform, PointCloud};
use crate::nn::{relu_backward, relu_forward, Conv3x3, Linear};
use nalgebra::Vector3;
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use thiserror::Error;

/// Half-extent of the gridded volume.
pub const VOLUME_BOUND: f64 = 0.55;

/// Point-MLP hidden width (3 -> 64 -> 64 -> feat_dim).
pub const MLP_HIDDEN: usize = 64;

/// Grid axes per plane: XY, XZ, YZ.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

#[derive(Debug, Error)]
pub enum TriplaneError {
    #[error("point {index} lies outside the normalized volume (coord {coord})")]
    NotNormalized { index: usize, coord: f64 },
}

/// Per-point MLP plus the three-layer convolution stack shared by the planes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub mlp: [Linear; 3],
    pub conv: [Conv3x3; 3],
    pub feat_dim: usize,
}

impl EncoderWeights {
    pub fn init<R: Rng + ?Sized>(feat_dim: usize, rng: &mut R) -> Self {
        EncoderWeights {
            mlp: [
                Linear::init(MLP_HIDDEN, 3, 2.0f64.sqrt(), rng),
                Linear::init(MLP_HIDDEN, MLP_HIDDEN, 2.0f64.sqrt(), rng),
                Linear::init(feat_dim, MLP_HIDDEN, 1.0, rng),
            ],
            conv: [
                Conv3x3::init(feat_dim, feat_dim, 2.0f64.sqrt(), rng),
                Conv3x3::init(feat_dim, feat_dim, 2.0f64.sqrt(), rng),
                Conv3x3::init(feat_dim, feat_dim, 1.0, rng),
            ],
            feat_dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderWeights {
            mlp: [
                Linear::zeros(self.mlp[0].out_dim(), self.mlp[0].in_dim()),
                Linear::zeros(self.mlp[1].out_dim(), self.mlp[1].in_dim()),
                Linear::zeros(self.mlp[2].out_dim(), self.mlp[2].in_dim()),
            ],
            conv: [
                Conv3x3::zeros(self.conv[0].cout, self.conv[0].cin),
                Conv3x3::zeros(self.conv[1].cout, self.conv[1].cin),
                Conv3x3::zeros(self.conv[2].cout, self.conv[2].cin),
            ],
            feat_dim: self.feat_dim,
        }
    }
}

/// The three smoothed feature grids plus the transform that maps world
/// coordinates into their volume. Immutable once built.
#[derive(Debug, Clone)]
pub struct TriPlaneFeatures {
    pub planes: [Array3<f64>; 3],
    pub resolution: usize,
    pub feat_dim: usize,
    pub transform: NormTransform,
}

impl TriPlaneFeatures {
    pub fn from_planes(planes: [Array3<f64>; 3], transform: NormTransform) -> Self {
        let (res, res2, d) = planes[0].dim();
        assert_eq!(res, res2, "planes must be square");
        for p in &planes {
            assert_eq!(p.dim(), (res, res, d));
        }
        TriPlaneFeatures {
            planes,
            resolution: res,
            feat_dim: d,
            transform,
        }
    }
}

/// Everything the backward pass needs to differentiate an encode call.
pub struct EncodeCache {
    pub(crate) x: Array2<f64>,
    pub(crate) z1: Array2<f64>,
    pub(crate) a1: Array2<f64>,
    pub(crate) z2: Array2<f64>,
    pub(crate) a2: Array2<f64>,
    /// Point indices per cell, in canonical order: (plane, cell row-major).
    pub(crate) buckets: Vec<Vec<Vec<u32>>>,
    pub(crate) pre_conv: [Array3<f64>; 3],
    pub(crate) conv_z1: [Array3<f64>; 3],
    pub(crate) conv_a1: [Array3<f64>; 3],
    pub(crate) conv_z2: [Array3<f64>; 3],
    pub(crate) conv_a2: [Array3<f64>; 3],
}

fn cell_width(res: usize) -> f64 {
    2.0 * VOLUME_BOUND / res as f64
}

fn scatter_cell(u: f64, res: usize) -> usize {
    let c = ((u + VOLUME_BOUND) / cell_width(res)).floor() as isize;
    c.clamp(0, res as isize - 1) as usize
}

/// Encodes a normalized cloud into tri-plane features.
pub fn encode(
    cloud: &PointCloud,
    w: &EncoderWeights,
    resolution: usize,
    transform: NormTransform,
) -> Result<TriPlaneFeatures, TriplaneError> {
    encode_cached(cloud, w, resolution, transform).map(|(f, _)| f)
}

/// Encode and keep the intermediate activations for a backward pass.
pub fn encode_cached(
    cloud: &PointCloud,
    w: &EncoderWeights,
    resolution: usize,
    transform: NormTransform,
) -> Result<(TriPlaneFeatures, EncodeCache), TriplaneError> {
    let n = cloud.len();
    let d = w.feat_dim;
    for (i, p) in cloud.points().iter().enumerate() {
        for &c in p.iter() {
            if c.abs() > VOLUME_BOUND {
                return Err(TriplaneError::NotNormalized { index: i, coord: c });
            }
        }
    }
    let mut x = Array2::zeros((n, 3));
    for (i, p) in cloud.points().iter().enumerate() {
        for j in 0..3 {
            x[(i, j)] = p[j];
        }
    }
    let z1 = w.mlp[0].forward(&x);
    let a1 = relu_forward(&z1);
    let z2 = w.mlp[1].forward(&a1);
    let a2 = relu_forward(&z2);
    let feats = w.mlp[2].forward(&a2);

    // Bucket the points per plane cell. Within a cell, contributions are
    // summed in a canonical order (sorted by feature bytes, then index) with
    // compensated summation, so the planes are bit-identical under any
    // permutation of the input cloud.
    let mut buckets: Vec<Vec<Vec<u32>>> = Vec::with_capacity(3);
    let mut pre_conv: Vec<Array3<f64>> = Vec::with_capacity(3);
    for (a_axis, b_axis) in PLANE_AXES {
        let mut cells: Vec<Vec<u32>> = vec![Vec::new(); resolution * resolution];
        for (i, p) in cloud.points().iter().enumerate() {
            let ca = scatter_cell(p[a_axis], resolution);
            let cb = scatter_cell(p[b_axis], resolution);
            cells[ca * resolution + cb].push(i as u32);
        }
        let mut plane = Array3::zeros((resolution, resolution, d));
        for (cell, members) in cells.iter_mut().enumerate() {
            if members.is_empty() {
                continue;
            }
            members.sort_unstable_by(|&i, &j| {
                let ri = feats.row(i as usize);
                let rj = feats.row(j as usize);
                for (a, b) in ri.iter().zip(rj.iter()) {
                    match a.total_cmp(b) {
                        std::cmp::Ordering::Equal => continue,
                        o => return o,
                    }
                }
                i.cmp(&j)
            });
            let (ca, cb) = (cell / resolution, cell % resolution);
            let inv = 1.0 / members.len() as f64;
            for k in 0..d {
                // Kahan sum in canonical order.
                let mut sum = 0.0f64;
                let mut comp = 0.0f64;
                for &i in members.iter() {
                    let y = feats[(i as usize, k)] - comp;
                    let t = sum + y;
                    comp = (t - sum) - y;
                    sum = t;
                }
                plane[(ca, cb, k)] = sum * inv;
            }
        }
        buckets.push(cells);
        pre_conv.push(plane);
    }
    let pre_conv: [Array3<f64>; 3] = pre_conv.try_into().unwrap();

    let mut conv_z1 = Vec::with_capacity(3);
    let mut conv_a1 = Vec::with_capacity(3);
    let mut conv_z2 = Vec::with_capacity(3);
    let mut conv_a2 = Vec::with_capacity(3);
    let mut out = Vec::with_capacity(3);
    let stages: Vec<_> = crate::exec::map_indexed(3, |p| {
        let cz1 = w.conv[0].forward(&pre_conv[p]);
        let ca1 = relu_forward(&cz1);
        let cz2 = w.conv[1].forward(&ca1);
        let ca2 = relu_forward(&cz2);
        let o = w.conv[2].forward(&ca2);
        (cz1, ca1, cz2, ca2, o)
    });
    for (cz1, ca1, cz2, ca2, o) in stages {
        conv_z1.push(cz1);
        conv_a1.push(ca1);
        conv_z2.push(cz2);
        conv_a2.push(ca2);
        out.push(o);
    }

    let features = TriPlaneFeatures::from_planes(out.try_into().unwrap(), transform);
    let cache = EncodeCache {
        x,
        z1,
        a1,
        z2,
        a2,
        buckets,
        pre_conv,
        conv_z1: conv_z1.try_into().unwrap(),
        conv_a1: conv_a1.try_into().unwrap(),
        conv_z2: conv_z2.try_into().unwrap(),
        conv_a2: conv_a2.try_into().unwrap(),
    };
    Ok((features, cache))
}

/// Accumulates encoder weight gradients from plane adjoints.
pub fn encode_backward(
    w: &EncoderWeights,
    cache: &EncodeCache,
    planes_bar: &[Array3<f64>; 3],
    grads: &mut EncoderWeights,
) {
    let n = cache.x.nrows();
    let d = w.feat_dim;
    let mut feats_bar = Array2::zeros((n, d));
    for p in 0..3 {
        let a2_bar = w.conv[2].backward(&cache.conv_a2[p], &planes_bar[p], &mut grads.conv[2]);
        let z2_bar = relu_backward(&cache.conv_z2[p], &a2_bar);
        let a1_bar = w.conv[1].backward(&cache.conv_a1[p], &z2_bar, &mut grads.conv[1]);
        let z1_bar = relu_backward(&cache.conv_z1[p], &a1_bar);
        let pre_bar = w.conv[0].backward(&cache.pre_conv[p], &z1_bar, &mut grads.conv[0]);
        let res = pre_bar.dim().0;
        for (cell, members) in cache.buckets[p].iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let (ca, cb) = (cell / res, cell % res);
            let inv = 1.0 / members.len() as f64;
            for &i in members {
                for k in 0..d {
                    feats_bar[(i as usize, k)] += pre_bar[(ca, cb, k)] * inv;
                }
            }
        }
    }
    let a2_bar = w.mlp[2].backward(&cache.a2, &feats_bar, &mut grads.mlp[2]);
    let z2_bar = relu_backward(&cache.z2, &a2_bar);
    let a1_bar = w.mlp[1].backward(&cache.a1, &z2_bar, &mut grads.mlp[1]);
    let z1_bar = relu_backward(&cache.z1, &a1_bar);
    let _ = w.mlp[0].backward(&cache.x, &z1_bar, &mut grads.mlp[0]);
}

/// One plane's four-cell bilinear stencil at a query position.
#[derive(Debug, Clone, Copy)]
pub struct PlaneTap {
    pub i0: usize,
    pub j0: usize,
    /// Corner weights in (i, j) order: (0,0), (0,1), (1,0), (1,1).
    pub w4: [f64; 4],
    /// d(weight)/d(coord along plane axis 0/1); zero where clamped.
    pub da4: [f64; 4],
    pub db4: [f64; 4],
    pub axes: (usize, usize),
}

/// The full three-plane stencil; positions are pre-clamped to the volume.
#[derive(Debug, Clone, Copy)]
pub struct QueryTap {
    pub planes: [PlaneTap; 3],
    pub position: Vector3<f64>,
    /// Per-axis clamp mask: 1.0 where the raw coordinate was in range.
    pub mask: Vector3<f64>,
    pub clamped: bool,
}

fn axis_tap(u: f64, res: usize) -> (usize, f64, f64) {
    let cw = cell_width(res);
    let g = (u + VOLUME_BOUND) / cw - 0.5;
    if g <= 0.0 {
        (0, 0.0, 0.0)
    } else if g >= res as f64 - 1.0 {
        (res - 2, 1.0, 0.0)
    } else {
        let i0 = (g.floor() as usize).min(res - 2);
        (i0, g - i0 as f64, 1.0 / cw)
    }
}

/// Builds the bilinear stencil for a query position, clamping out-of-volume
/// coordinates to the boundary.
pub fn make_tap(x: &Vector3<f64>, resolution: usize) -> QueryTap {
    let mut clamped = false;
    let mut pos = *x;
    let mut mask = Vector3::new(1.0, 1.0, 1.0);
    for i in 0..3 {
        if pos[i].abs() > VOLUME_BOUND {
            pos[i] = pos[i].clamp(-VOLUME_BOUND, VOLUME_BOUND);
            mask[i] = 0.0;
            clamped = true;
        }
    }
    let planes = PLANE_AXES.map(|(a, b)| {
        let (i0, fa, dfa) = axis_tap(pos[a], resolution);
        let (j0, fb, dfb) = axis_tap(pos[b], resolution);
        PlaneTap {
            i0,
            j0,
            w4: [
                (1.0 - fa) * (1.0 - fb),
                (1.0 - fa) * fb,
                fa * (1.0 - fb),
                fa * fb,
            ],
            da4: [
                -(1.0 - fb) * dfa,
                -fb * dfa,
                (1.0 - fb) * dfa,
                fb * dfa,
            ],
            db4: [
                -(1.0 - fa) * dfb,
                (1.0 - fa) * dfb,
                -fa * dfb,
                fa * dfb,
            ],
            axes: (a, b),
        }
    });
    QueryTap {
        planes,
        position: pos,
        mask,
        clamped,
    }
}

fn corner(i0: usize, j0: usize, k: usize) -> (usize, usize) {
    (i0 + k / 2, j0 + k % 2)
}

/// Sum of the three bilinear plane samples.
pub fn tap_value(f: &TriPlaneFeatures, tap: &QueryTap) -> Array1<f64> {
    let mut z = Array1::zeros(f.feat_dim);
    for (p, pt) in tap.planes.iter().enumerate() {
        let plane = &f.planes[p];
        for k in 0..4 {
            let (i, j) = corner(pt.i0, pt.j0, k);
            let w = pt.w4[k];
            if w == 0.0 {
                continue;
            }
            for c in 0..f.feat_dim {
                z[c] += w * plane[(i, j, c)];
            }
        }
    }
    z
}

/// Directional derivative of the sample along `xdot` (post clamp mask).
pub fn tap_tangent(f: &TriPlaneFeatures, tap: &QueryTap, xdot: &Vector3<f64>) -> Array1<f64> {
    let mut z = Array1::zeros(f.feat_dim);
    for (p, pt) in tap.planes.iter().enumerate() {
        let plane = &f.planes[p];
        let ua = xdot[pt.axes.0] * tap.mask[pt.axes.0];
        let ub = xdot[pt.axes.1] * tap.mask[pt.axes.1];
        for k in 0..4 {
            let dw = pt.da4[k] * ua + pt.db4[k] * ub;
            if dw == 0.0 {
                continue;
            }
            let (i, j) = corner(pt.i0, pt.j0, k);
            for c in 0..f.feat_dim {
                z[c] += dw * plane[(i, j, c)];
            }
        }
    }
    z
}

/// Position adjoint: `xbar += J^T zbar` with J the sample Jacobian. Clamped
/// axes receive zero.
pub fn tap_position_adjoint(f: &TriPlaneFeatures, tap: &QueryTap, zbar: &Array1<f64>) -> Vector3<f64> {
    let mut xbar = Vector3::zeros();
    for (p, pt) in tap.planes.iter().enumerate() {
        let plane = &f.planes[p];
        for k in 0..4 {
            let (i, j) = corner(pt.i0, pt.j0, k);
            let mut dot = 0.0;
            for c in 0..f.feat_dim {
                dot += plane[(i, j, c)] * zbar[c];
            }
            xbar[pt.axes.0] += pt.da4[k] * dot;
            xbar[pt.axes.1] += pt.db4[k] * dot;
        }
    }
    for i in 0..3 {
        xbar[i] *= tap.mask[i];
    }
    xbar
}

/// Primal-path plane adjoint: `P[cell] += w * zbar`.
pub fn tap_plane_adjoint(planes_bar: &mut [Array3<f64>; 3], tap: &QueryTap, zbar: &Array1<f64>) {
    let d = zbar.len();
    for (p, pt) in tap.planes.iter().enumerate() {
        for k in 0..4 {
            let w = pt.w4[k];
            if w == 0.0 {
                continue;
            }
            let (i, j) = corner(pt.i0, pt.j0, k);
            for c in 0..d {
                planes_bar[p][(i, j, c)] += w * zbar[c];
            }
        }
    }
}

/// Tangent-path plane adjoint: the tangent sample is linear in the plane
/// values with stencil `dW . xdot`, so its adjoint scatters the same way.
pub fn tap_plane_tangent_adjoint(
    planes_bar: &mut [Array3<f64>; 3],
    tap: &QueryTap,
    xdot: &Vector3<f64>,
    ztbar: &Array1<f64>,
) {
    let d = ztbar.len();
    for (p, pt) in tap.planes.iter().enumerate() {
        let ua = xdot[pt.axes.0] * tap.mask[pt.axes.0];
        let ub = xdot[pt.axes.1] * tap.mask[pt.axes.1];
        for k in 0..4 {
            let dw = pt.da4[k] * ua + pt.db4[k] * ub;
            if dw == 0.0 {
                continue;
            }
            let (i, j) = corner(pt.i0, pt.j0, k);
            for c in 0..d {
                planes_bar[p][(i, j, c)] += dw * ztbar[c];
            }
        }
    }
}

/// Bilinear feature sample at `x` (normalized coordinates): the sum over the
/// three plane samples.
pub fn query_features(f: &TriPlaneFeatures, x: &Vector3<f64>) -> Array1<f64> {
    tap_value(f, &make_tap(x, f.resolution))
}
