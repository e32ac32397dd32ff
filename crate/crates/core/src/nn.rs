//! Minimal dense and convolutional layers with hand-written derivatives.
//!
//! Besides the usual forward/backward passes, the dense layers carry a
//! forward tangent program (directional derivatives with respect to their
//! inputs) and its reverse pass. The pose score is the derivative of the
//! energy, so training the score against noise requires differentiating
//! that derivative with respect to the weights; propagating a small number
//! of tangent channels alongside the primal values and then running reverse
//! mode over both gives exactly that.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// Numerically stable softplus ln(1 + e^z).
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Dense layer `y = x W^T + b`, stored row-major (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    /// He-style init scaled by `gain / sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, gain: f64, rng: &mut R) -> Self {
        let scale = gain / (in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        });
        Linear {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Rows of `x` are samples.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Tangent channels ride along as an (channels, rows, in) stack; they see
    /// the same linear map without the bias.
    pub fn forward_tan(&self, xt: &Array3<f64>) -> Array3<f64> {
        let (c, n, _) = xt.dim();
        let mut out = Array3::zeros((c, n, self.out_dim()));
        for ch in 0..c {
            out.index_axis_mut(Axis(0), ch)
                .assign(&xt.index_axis(Axis(0), ch).dot(&self.w.t()));
        }
        out
    }

    /// Accumulates weight gradients into `grad` and returns the input adjoint.
    pub fn backward(&self, x: &Array2<f64>, ybar: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &ybar.t().dot(x);
        grad.b += &ybar.sum_axis(Axis(0));
        ybar.dot(&self.w)
    }

    /// Input adjoint only; no weight gradients (the inference path).
    pub fn backward_input(&self, ybar: &Array2<f64>) -> Array2<f64> {
        ybar.dot(&self.w)
    }

    /// Reverse pass for the tangent channels; they also contribute to the
    /// weight gradient (`d(xt W^T)/dW`).
    pub fn backward_tan(
        &self,
        xt: &Array3<f64>,
        ytbar: &Array3<f64>,
        grad: &mut Linear,
    ) -> Array3<f64> {
        let (c, n, _) = xt.dim();
        let mut out = Array3::zeros((c, n, self.in_dim()));
        for ch in 0..c {
            let xc = xt.index_axis(Axis(0), ch);
            let yc = ytbar.index_axis(Axis(0), ch);
            grad.w += &yc.t().dot(&xc);
            out.index_axis_mut(Axis(0), ch).assign(&yc.dot(&self.w));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Softplus over a matrix; returns activations.
pub fn softplus_forward(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(softplus)
}

/// Tangent rule `at = sigmoid(z) * zt` per channel.
pub fn softplus_forward_tan(z: &Array2<f64>, zt: &Array3<f64>) -> Array3<f64> {
    let s = z.mapv(sigmoid);
    let mut out = zt.clone();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        ch *= &s;
    }
    out
}

/// Reverse through softplus and its tangent program:
/// `zbar = s(z) abar + sum_c s'(z) zt_c atbar_c`, `ztbar_c = s(z) atbar_c`.
pub fn softplus_backward_tan(
    z: &Array2<f64>,
    zt: &Array3<f64>,
    abar: &Array2<f64>,
    atbar: &Array3<f64>,
) -> (Array2<f64>, Array3<f64>) {
    let s = z.mapv(sigmoid);
    let sp = &s * &(1.0 - &s);
    let mut zbar = abar * &s;
    let mut ztbar = atbar.clone();
    for ch in 0..zt.dim().0 {
        zbar += &(&sp * &zt.index_axis(Axis(0), ch) * &atbar.index_axis(Axis(0), ch));
        let mut z_ch = ztbar.index_axis_mut(Axis(0), ch);
        z_ch *= &s;
    }
    (zbar, ztbar)
}

/// First-order reverse through softplus (no tangent channels).
pub fn softplus_backward(z: &Array2<f64>, abar: &Array2<f64>) -> Array2<f64> {
    abar * &z.mapv(sigmoid)
}

pub fn relu_forward<D: ndarray::Dimension>(z: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    z.mapv(|x| x.max(0.0))
}

pub fn relu_backward<D: ndarray::Dimension>(
    z: &ndarray::Array<f64, D>,
    abar: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mask = z.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
    abar * &mask
}

/// 3x3 same-padding convolution over (H, W, C) feature grids. Weights are
/// kept in im2col layout: row `o`, column `(ky*3 + kx)*cin + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub cin: usize,
    pub cout: usize,
}

impl Conv3x3 {
    pub fn init<R: Rng + ?Sized>(cout: usize, cin: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = 9 * cin;
        let scale = gain / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((cout, fan_in), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        });
        Conv3x3 {
            w,
            b: Array1::zeros(cout),
            cin,
            cout,
        }
    }

    pub fn zeros(cout: usize, cin: usize) -> Self {
        Conv3x3 {
            w: Array2::zeros((cout, 9 * cin)),
            b: Array1::zeros(cout),
            cin,
            cout,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (h, w, c) = x.dim();
        debug_assert_eq!(c, self.cin);
        let mut m = Array2::zeros((h * w, 9 * c));
        for y in 0..h {
            for xx in 0..w {
                let row = y * w + xx;
                for ky in 0..3usize {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (ky * 3 + kx) * c;
                        for i in 0..c {
                            m[(row, base + i)] = x[(sy as usize, sx as usize, i)];
                        }
                    }
                }
            }
        }
        m
    }

    fn col2im(&self, m: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
        let c = self.cin;
        let mut x = Array3::zeros((h, w, c));
        for y in 0..h {
            for xx in 0..w {
                let row = y * w + xx;
                for ky in 0..3usize {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (ky * 3 + kx) * c;
                        for i in 0..c {
                            x[(sy as usize, sx as usize, i)] += m[(row, base + i)];
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (h, w, _) = x.dim();
        let m = self.im2col(x);
        let y = m.dot(&self.w.t()) + &self.b;
        y.into_shape_with_order((h, w, self.cout)).expect("conv shape")
    }

    /// Accumulates weight gradients and returns the input adjoint.
    pub fn backward(
        &self,
        x: &Array3<f64>,
        ybar: &Array3<f64>,
        grad: &mut Conv3x3,
    ) -> Array3<f64> {
        let (h, w, _) = x.dim();
        let m = self.im2col(x);
        let yb = ybar
            .view()
            .into_shape_with_order((h * w, self.cout))
            .expect("conv adjoint shape");
        grad.w += &yb.t().dot(&m);
        grad.b += &yb.sum_axis(Axis(0));
        let mbar = yb.dot(&self.w);
        self.col2im(&mbar, h, w)
    }
}

/// Adam over an ordered list of parameter slices. The slice order must stay
/// identical across steps; `ModelWeights::visit_mut` guarantees that.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Advances the step counter; `n_tensors` fixes the state layout on the
    /// first call.
    pub fn begin_step(&mut self, n_tensors: usize) {
        if self.m.is_empty() {
            self.m = vec![Vec::new(); n_tensors];
            self.v = vec![Vec::new(); n_tensors];
        }
        assert_eq!(self.m.len(), n_tensors);
        self.t += 1;
    }

    /// Updates one tensor; `idx` must follow the same order every step.
    pub fn update_tensor(&mut self, idx: usize, p: &mut [f64], g: &[f64]) {
        assert_eq!(p.len(), g.len());
        let m = &mut self.m[idx];
        let v = &mut self.v[idx];
        if m.is_empty() {
            m.resize(p.len(), 0.0);
            v.resize(p.len(), 0.0);
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..p.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            // Keep every weight on the f32 grid so checkpoints are
            // lossless (the on-disk blocks are f32).
            p[i] = p[i] as f32 as f64;
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len());
        self.begin_step(params.len());
        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update_tensor(idx, p, g);
        }
    }
}
