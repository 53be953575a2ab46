//! Neural-network building blocks, generic over the scalar type.
//!
//! Everything is laid out channels-last — time or rows outermost, channels
//! innermost — so each convolution tap is one contiguous matrix product
//! and the whole stack runs on GEMM. Training runs in `f32`; the
//! finite-difference gradient tests instantiate the identical code in
//! `f64`.
//!
//! Convolutions zero-pad to preserve their leading (time/spatial) extents.
//! Backward passes take the forward input and the output gradient and
//! return parameter gradients in a container of the layer's own type, so
//! optimizer code can walk parameters and gradients in lockstep.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayViewMut2, Dimension};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Scalar type the network runs on.
pub trait Real:
    ndarray::LinalgScalar
    + Float
    + FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

/// Converts an `f64` constant into the network scalar type.
#[inline]
pub fn real<F: Real>(v: f64) -> F {
    <F as FromPrimitive>::from_f64(v).expect("f64 convertible")
}

impl Real for f32 {}
impl Real for f64 {}

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Scaled exponential linear unit.
pub fn selu<F: Real>(x: F) -> F {
    let lambda = real::<F>(SELU_LAMBDA);
    if x > F::zero() {
        lambda * x
    } else {
        let alpha = real::<F>(SELU_ALPHA);
        lambda * alpha * (x.exp() - F::one())
    }
}

/// Derivative of selu, computed from the ACTIVATION value (not the
/// pre-activation): for y > 0 the slope is λ, otherwise y = λα(eˣ−1)
/// gives λα·eˣ = y + λα.
pub fn selu_grad_from_act<F: Real>(y: F) -> F {
    let lambda = real::<F>(SELU_LAMBDA);
    if y > F::zero() {
        lambda
    } else {
        y + lambda * real::<F>(SELU_ALPHA)
    }
}

/// Applies selu elementwise in place.
pub fn selu_inplace<F: Real, D: Dimension>(a: &mut ndarray::Array<F, D>) {
    a.mapv_inplace(selu);
}

/// Inverted-dropout mask: each element is 0 with probability `rate`,
/// otherwise `1/(1 − rate)`, so the expected value of `x ⊙ mask` is `x`.
/// Elements are drawn in row-major order for reproducibility.
pub fn dropout_mask<F: Real, D: Dimension>(
    dim: D,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> ndarray::Array<F, D> {
    debug_assert!((0.0..1.0).contains(&rate));
    let keep = real::<F>(1.0 / (1.0 - rate));
    let mut mask = ndarray::Array::<F, D>::zeros(dim);
    for m in mask.iter_mut() {
        if rng.random::<f64>() >= rate {
            *m = keep;
        }
    }
    mask
}

/// Draws Xavier-uniform values: `U(−limit, limit)` with
/// `limit = sqrt(6 / (fan_in + fan_out))`, in row-major order.
fn xavier_fill<F: Real, D: Dimension>(
    a: &mut ndarray::Array<F, D>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for w in a.iter_mut() {
        *w = real::<F>(rng.random_range(-limit..limit));
    }
}

fn flat2<F>(v: ndarray::ArrayView3<'_, F>) -> ArrayView2<'_, F> {
    let (a, b, c) = v.dim();
    v.into_shape_with_order((a * b, c))
        .expect("standard-layout view")
}

fn flat2_mut<F>(v: ndarray::ArrayViewMut3<'_, F>) -> ArrayViewMut2<'_, F> {
    let (a, b, c) = v.dim();
    v.into_shape_with_order((a * b, c))
        .expect("standard-layout view")
}

/// 1D convolution over the leading time axis of a `(T, N, C)` batch,
/// zero-padded to keep `T`. Weight layout `(tap, C_in, C_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<F> {
    pub weight: Array3<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Conv1d<F> {
    pub fn xavier(taps: usize, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(taps % 2 == 1, "even kernels would shift the signal");
        let mut weight = Array3::zeros((taps, c_in, c_out));
        xavier_fill(&mut weight, taps * c_in, taps * c_out, rng);
        Self {
            weight,
            bias: Array1::zeros(c_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array3::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let (t_len, n, _c_in) = x.dim();
        let (taps, _, c_out) = self.weight.dim();
        let half = (taps / 2) as isize;
        let mut out = Array3::zeros((t_len, n, c_out));
        out.slice_mut(ndarray::s![.., .., ..])
            .assign(&self.bias.broadcast((t_len, n, c_out)).unwrap());
        for k in 0..taps {
            let shift = k as isize - half;
            let (o0, o1) = valid_range(t_len, shift);
            if o0 >= o1 {
                continue;
            }
            let xs = x.slice(ndarray::s![
                (o0 as isize + shift) as usize..(o1 as isize + shift) as usize,
                ..,
                ..
            ]);
            let os = out.slice_mut(ndarray::s![o0..o1, .., ..]);
            general_mat_mul(
                F::one(),
                &flat2(xs),
                &self.weight.index_axis(ndarray::Axis(0), k),
                F::one(),
                &mut flat2_mut(os),
            );
        }
        out
    }

    /// Returns (parameter gradients, input gradient).
    pub fn backward(&self, x: &Array3<F>, dy: &Array3<F>) -> (Self, Array3<F>) {
        let (t_len, _n, _c_in) = x.dim();
        let (taps, _, _c_out) = self.weight.dim();
        let half = (taps / 2) as isize;
        let mut grad = self.zeros_like();
        let mut dx = Array3::zeros(x.raw_dim());
        for row in flat2(dy.view()).rows() {
            grad.bias.zip_mut_with(&row, |b, &g| *b = *b + g);
        }
        for k in 0..taps {
            let shift = k as isize - half;
            let (o0, o1) = valid_range(t_len, shift);
            if o0 >= o1 {
                continue;
            }
            let xs = x.slice(ndarray::s![
                (o0 as isize + shift) as usize..(o1 as isize + shift) as usize,
                ..,
                ..
            ]);
            let dys = dy.slice(ndarray::s![o0..o1, .., ..]);
            general_mat_mul(
                F::one(),
                &flat2(xs).t(),
                &flat2(dys),
                F::one(),
                &mut grad.weight.index_axis_mut(ndarray::Axis(0), k),
            );
            let dxs = dx.slice_mut(ndarray::s![
                (o0 as isize + shift) as usize..(o1 as isize + shift) as usize,
                ..,
                ..
            ]);
            general_mat_mul(
                F::one(),
                &flat2(dys),
                &self.weight.index_axis(ndarray::Axis(0), k).t(),
                F::one(),
                &mut flat2_mut(dxs),
            );
        }
        (grad, dx)
    }
}

/// Output rows `[o0, o1)` for which `o + shift` stays inside `[0, len)`.
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let o0 = (-shift).max(0) as usize;
    let o1 = (len as isize - shift.max(0)).max(0) as usize;
    (o0, o1.min(len))
}

/// Fully connected layer on the last axis. Weight layout `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Dense<F> {
    pub fn xavier(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut weight = Array2::zeros((c_in, c_out));
        xavier_fill(&mut weight, c_in, c_out, rng);
        Self {
            weight,
            bias: Array1::zeros(c_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let (rows, _) = x.dim();
        let c_out = self.bias.len();
        let mut out = Array2::zeros((rows, c_out));
        out.assign(&self.bias.broadcast((rows, c_out)).unwrap());
        general_mat_mul(F::one(), &x.view(), &self.weight.view(), F::one(), &mut out.view_mut());
        out
    }

    pub fn backward(&self, x: &Array2<F>, dy: &Array2<F>) -> (Self, Array2<F>) {
        let mut grad = self.zeros_like();
        general_mat_mul(F::one(), &x.t(), &dy.view(), F::one(), &mut grad.weight.view_mut());
        for row in dy.rows() {
            grad.bias.zip_mut_with(&row, |b, &g| *b = *b + g);
        }
        let mut dx = Array2::zeros(x.raw_dim());
        general_mat_mul(F::one(), &dy.view(), &self.weight.t(), F::one(), &mut dx.view_mut());
        (grad, dx)
    }
}

/// 2D convolution on a `(rows, cols, C)` single-slice patch, zero-padded
/// to keep the spatial extents. Weight layout `(kr, kc, C_in, C_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Conv2d<F> {
    pub fn xavier(k: usize, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(k % 2 == 1);
        let mut weight = Array4::zeros((k, k, c_in, c_out));
        xavier_fill(&mut weight, k * k * c_in, k * k * c_out, rng);
        Self {
            weight,
            bias: Array1::zeros(c_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let (rows, cols, _c_in) = x.dim();
        let (kr, kc, _, c_out) = self.weight.dim();
        let (hr, hc) = ((kr / 2) as isize, (kc / 2) as isize);
        let mut out = Array3::zeros((rows, cols, c_out));
        out.assign(&self.bias.broadcast((rows, cols, c_out)).unwrap());
        for dr in 0..kr {
            let rshift = dr as isize - hr;
            let (r0, r1) = valid_range(rows, rshift);
            for dc in 0..kc {
                let cshift = dc as isize - hc;
                let (c0, c1) = valid_range(cols, cshift);
                if r0 >= r1 || c0 >= c1 {
                    continue;
                }
                let w = self.weight.slice(ndarray::s![dr, dc, .., ..]);
                // Row by row: each row's column window is contiguous.
                for r in r0..r1 {
                    let xs = x.slice(ndarray::s![
                        (r as isize + rshift) as usize,
                        (c0 as isize + cshift) as usize..(c1 as isize + cshift) as usize,
                        ..
                    ]);
                    let os = out.slice_mut(ndarray::s![r, c0..c1, ..]);
                    general_mat_mul(F::one(), &xs, &w, F::one(), &mut os.into_shape_with_order((c1 - c0, c_out)).unwrap());
                }
            }
        }
        out
    }

    pub fn backward(&self, x: &Array3<F>, dy: &Array3<F>) -> (Self, Array3<F>) {
        let (rows, cols, c_in) = x.dim();
        let (kr, kc, _, _) = self.weight.dim();
        let (hr, hc) = ((kr / 2) as isize, (kc / 2) as isize);
        let mut grad = self.zeros_like();
        let mut dx = Array3::zeros(x.raw_dim());
        for row in flat2(dy.view()).rows() {
            grad.bias.zip_mut_with(&row, |b, &g| *b = *b + g);
        }
        for dr in 0..kr {
            let rshift = dr as isize - hr;
            let (r0, r1) = valid_range(rows, rshift);
            for dc in 0..kc {
                let cshift = dc as isize - hc;
                let (c0, c1) = valid_range(cols, cshift);
                if r0 >= r1 || c0 >= c1 {
                    continue;
                }
                for r in r0..r1 {
                    let xs = x.slice(ndarray::s![
                        (r as isize + rshift) as usize,
                        (c0 as isize + cshift) as usize..(c1 as isize + cshift) as usize,
                        ..
                    ]);
                    let dys = dy.slice(ndarray::s![r, c0..c1, ..]);
                    general_mat_mul(
                        F::one(),
                        &xs.t(),
                        &dys,
                        F::one(),
                        &mut grad.weight.slice_mut(ndarray::s![dr, dc, .., ..]),
                    );
                    let dxs = dx.slice_mut(ndarray::s![
                        (r as isize + rshift) as usize,
                        (c0 as isize + cshift) as usize..(c1 as isize + cshift) as usize,
                        ..
                    ]);
                    general_mat_mul(
                        F::one(),
                        &dys,
                        &self.weight.slice(ndarray::s![dr, dc, .., ..]).t(),
                        F::one(),
                        &mut dxs.into_shape_with_order((c1 - c0, c_in)).unwrap(),
                    );
                }
            }
        }
        (grad, dx)
    }
}

/// 3D convolution on a `(T, rows, cols, C)` patch sequence, zero-padded
/// on all three leading axes. Weight layout `(kt, kr, kc, C_in, C_out)`.
///
/// Runs as one GEMM per call through an explicit im2col buffer — the
/// operand is a small fixed-size patch, so the buffer stays tiny.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<F> {
    pub weight: ndarray::Array5<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Conv3d<F> {
    pub fn xavier(k: usize, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(k % 2 == 1);
        let mut weight = ndarray::Array5::zeros((k, k, k, c_in, c_out));
        let volume = k * k * k;
        xavier_fill(&mut weight, volume * c_in, volume * c_out, rng);
        Self {
            weight,
            bias: Array1::zeros(c_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: ndarray::Array5::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn im2col(&self, x: &Array4<F>) -> Array2<F> {
        let (t_len, rows, cols, c_in) = x.dim();
        let (kt, kr, kc, _, _) = self.weight.dim();
        let (ht, hr, hc) = (kt / 2, kr / 2, kc / 2);
        let width = kt * kr * kc * c_in;
        let mut out = Array2::zeros((t_len * rows * cols, width));
        let xs = x.as_slice().expect("standard-layout input");
        let os = out.as_slice_mut().expect("owned standard layout");
        for t in 0..t_len {
            for r in 0..rows {
                for c in 0..cols {
                    let row_base = ((t * rows + r) * cols + c) * width;
                    // Column taps whose source stays inside [0, cols); the
                    // run over (dc, channel) is contiguous on both sides.
                    let dc0 = hc.saturating_sub(c);
                    let dc1 = (cols + hc - c).min(kc);
                    if dc0 >= dc1 {
                        continue;
                    }
                    let run = (dc1 - dc0) * c_in;
                    let sc0 = c + dc0 - hc;
                    for dt in 0..kt {
                        if t + dt < ht || t + dt >= t_len + ht {
                            continue;
                        }
                        let st = t + dt - ht;
                        for dr in 0..kr {
                            if r + dr < hr || r + dr >= rows + hr {
                                continue;
                            }
                            let sr = r + dr - hr;
                            let src = ((st * rows + sr) * cols + sc0) * c_in;
                            let dst = row_base + ((dt * kr + dr) * kc + dc0) * c_in;
                            os[dst..dst + run].copy_from_slice(&xs[src..src + run]);
                        }
                    }
                }
            }
        }
        out
    }

    fn weight2(&self) -> ArrayView2<'_, F> {
        let (kt, kr, kc, c_in, c_out) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((kt * kr * kc * c_in, c_out))
            .expect("owned standard layout")
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (t_len, rows, cols, _) = x.dim();
        let c_out = self.bias.len();
        let cols_mat = self.im2col(x);
        let mut out2 = Array2::zeros((t_len * rows * cols, c_out));
        out2.assign(&self.bias.broadcast(out2.raw_dim()).unwrap());
        general_mat_mul(F::one(), &cols_mat.view(), &self.weight2(), F::one(), &mut out2.view_mut());
        out2.into_shape_with_order((t_len, rows, cols, c_out))
            .expect("consistent shape")
    }

    pub fn backward(&self, x: &Array4<F>, dy: &Array4<F>) -> (Self, Array4<F>) {
        let (t_len, rows, cols, c_in) = x.dim();
        let (kt, kr, kc, _, c_out) = self.weight.dim();
        let (ht, hr, hc) = (kt / 2, kr / 2, kc / 2);
        let width = kt * kr * kc * c_in;
        let cols_mat = self.im2col(x);
        let dy2 = dy
            .view()
            .into_shape_with_order((t_len * rows * cols, c_out))
            .expect("standard layout");
        let mut grad = self.zeros_like();
        {
            let mut dw2 = grad
                .weight
                .view_mut()
                .into_shape_with_order((width, c_out))
                .expect("owned standard layout");
            general_mat_mul(F::one(), &cols_mat.t(), &dy2, F::one(), &mut dw2);
        }
        for row in dy2.rows() {
            grad.bias.zip_mut_with(&row, |b, &g| *b = *b + g);
        }

        let mut dcols = Array2::zeros(cols_mat.raw_dim());
        general_mat_mul(F::one(), &dy2, &self.weight2().t(), F::one(), &mut dcols.view_mut());
        // col2im: scatter-add each unfolded column back to its source,
        // one contiguous (dc, channel) run at a time as in im2col.
        let mut dx = Array4::zeros(x.raw_dim());
        let ds = dcols.as_slice().expect("owned standard layout");
        let dxs = dx.as_slice_mut().expect("owned standard layout");
        for t in 0..t_len {
            for r in 0..rows {
                for c in 0..cols {
                    let row_base = ((t * rows + r) * cols + c) * width;
                    let dc0 = hc.saturating_sub(c);
                    let dc1 = (cols + hc - c).min(kc);
                    if dc0 >= dc1 {
                        continue;
                    }
                    let run = (dc1 - dc0) * c_in;
                    let sc0 = c + dc0 - hc;
                    for dt in 0..kt {
                        if t + dt < ht || t + dt >= t_len + ht {
                            continue;
                        }
                        let st = t + dt - ht;
                        for dr in 0..kr {
                            if r + dr < hr || r + dr >= rows + hr {
                                continue;
                            }
                            let sr = r + dr - hr;
                            let src = row_base + ((dt * kr + dr) * kc + dc0) * c_in;
                            let dst = ((st * rows + sr) * cols + sc0) * c_in;
                            for i in 0..run {
                                dxs[dst + i] = dxs[dst + i] + ds[src + i];
                            }
                        }
                    }
                }
            }
        }
        (grad, dx)
    }
}

/// Max pooling over the time axis of `(T, N, C)` with ceil semantics: the
/// last window may cover a single frame. Returns the pooled array and the
/// in-window offset of each maximum for the backward pass.
pub fn maxpool_time<F: Real>(x: &Array3<F>, window: usize) -> (Array3<F>, Array3<u8>) {
    let (t_len, n, c) = x.dim();
    let t_out = t_len.div_ceil(window);
    let mut out = Array3::zeros((t_out, n, c));
    let mut arg = Array3::zeros((t_out, n, c));
    for to in 0..t_out {
        let t0 = to * window;
        let t1 = (t0 + window).min(t_len);
        for i in 0..n {
            for ch in 0..c {
                let mut best = x[[t0, i, ch]];
                let mut best_k = 0u8;
                for (k, t) in (t0 + 1..t1).enumerate() {
                    let v = x[[t, i, ch]];
                    if v > best {
                        best = v;
                        best_k = k as u8 + 1;
                    }
                }
                out[[to, i, ch]] = best;
                arg[[to, i, ch]] = best_k;
            }
        }
    }
    (out, arg)
}

/// Routes pooled gradients back to each window's argmax.
pub fn maxpool_time_backward<F: Real>(
    arg: &Array3<u8>,
    dy: &Array3<F>,
    t_in: usize,
    window: usize,
) -> Array3<F> {
    let (t_out, n, c) = dy.dim();
    let mut dx = Array3::zeros((t_in, n, c));
    for to in 0..t_out {
        for i in 0..n {
            for ch in 0..c {
                let t = to * window + arg[[to, i, ch]] as usize;
                dx[[t, i, ch]] = dx[[t, i, ch]] + dy[[to, i, ch]];
            }
        }
    }
    dx
}

/// Global average pool over the time axis: `(T, N, C) → (N, C)`.
pub fn gap_time<F: Real>(x: &Array3<F>) -> Array2<F> {
    let (t_len, n, c) = x.dim();
    let mut out = Array2::zeros((n, c));
    for t in 0..t_len {
        out.zip_mut_with(&x.index_axis(ndarray::Axis(0), t), |o, &v| *o = *o + v);
    }
    let inv = real::<F>(1.0 / t_len as f64);
    out.mapv_inplace(|v| v * inv);
    out
}

/// Backward of [`gap_time`]: spreads the gradient evenly over frames.
pub fn gap_time_backward<F: Real>(dy: &Array2<F>, t_in: usize) -> Array3<F> {
    let (n, c) = dy.dim();
    let inv = real::<F>(1.0 / t_in as f64);
    let mut dx = Array3::zeros((t_in, n, c));
    for t in 0..t_in {
        dx.index_axis_mut(ndarray::Axis(0), t)
            .assign(&dy.mapv(|v| v * inv));
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3, Array4};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn fill_random<D: Dimension>(a: &mut ndarray::Array<f64, D>, r: &mut ChaCha8Rng) {
        for v in a.iter_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    }

    #[test]
    fn selu_values_and_derivative() {
        assert_eq!(selu(0.0f64), 0.0);
        assert!((selu(1.0f64) - SELU_LAMBDA).abs() < 1e-12);
        assert!((selu(-30.0f64) + SELU_LAMBDA * SELU_ALPHA).abs() < 1e-9);
        for &x in &[-2.0f64, -0.5, 0.3, 1.7] {
            let h = 1e-7;
            let fd = (selu(x + h) - selu(x - h)) / (2.0 * h);
            let an = selu_grad_from_act(selu(x));
            assert!((fd - an).abs() < 1e-6, "x {x}: {fd} vs {an}");
        }
    }

    #[test]
    fn conv1d_matches_naive_evaluation() {
        let mut r = rng(1);
        let layer = Conv1d::<f64>::xavier(5, 3, 4, &mut r);
        let mut x = Array3::zeros((7, 2, 3));
        fill_random(&mut x, &mut r);
        let y = layer.forward(&x);
        assert_eq!(y.dim(), (7, 2, 4));
        // Direct evaluation with explicit zero padding.
        for t in 0..7i64 {
            for n in 0..2 {
                for co in 0..4 {
                    let mut want = layer.bias[co];
                    for k in 0..5i64 {
                        let src = t + k - 2;
                        if (0..7).contains(&src) {
                            for ci in 0..3 {
                                want += x[[src as usize, n, ci]]
                                    * layer.weight[[k as usize, ci, co]];
                            }
                        }
                    }
                    let got = y[[t as usize, n, co]];
                    assert!((got - want).abs() < 1e-12, "({t},{n},{co}): {got} vs {want}");
                }
            }
        }
    }

    /// Central finite difference of a scalar loss `sum(y²/2)` for any
    /// layer, checked against the analytic backward.
    fn check_param_grads<FwdF, BwdF>(
        params: &mut [f64],
        forward: FwdF,
        backward: BwdF,
        tol: f64,
        label: &str,
    ) where
        FwdF: Fn(&[f64]) -> f64,
        BwdF: Fn() -> Vec<f64>,
    {
        let analytic = backward();
        assert_eq!(analytic.len(), params.len());
        let h = 1e-6;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let plus = forward(params);
            params[i] = orig - h;
            let minus = forward(params);
            params[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (fd - analytic[i]).abs() / denom < tol,
                "{label}[{i}]: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn conv1d_backward_matches_finite_differences() {
        let mut r = rng(2);
        let layer = Conv1d::<f64>::xavier(3, 2, 3, &mut r);
        let mut x = Array3::zeros((5, 2, 2));
        fill_random(&mut x, &mut r);

        let loss = |l: &Conv1d<f64>, x: &Array3<f64>| -> f64 {
            l.forward(x).iter().map(|v| v * v / 2.0).sum()
        };
        let y = layer.forward(&x);
        let (grad, dx) = layer.backward(&x, &y); // dL/dy = y for this loss

        // Weight gradient.
        let mut flat: Vec<f64> = layer.weight.iter().copied().collect();
        check_param_grads(
            &mut flat,
            |p| {
                let mut probe = layer.clone();
                probe.weight.iter_mut().zip(p).for_each(|(w, v)| *w = *v);
                loss(&probe, &x)
            },
            || grad.weight.iter().copied().collect(),
            1e-6,
            "conv1d weight",
        );

        // Bias gradient.
        let mut bias: Vec<f64> = layer.bias.iter().copied().collect();
        check_param_grads(
            &mut bias,
            |p| {
                let mut probe = layer.clone();
                probe.bias.iter_mut().zip(p).for_each(|(b, v)| *b = *v);
                loss(&probe, &x)
            },
            || grad.bias.iter().copied().collect(),
            1e-6,
            "conv1d bias",
        );

        // Input gradient.
        let mut flat_x: Vec<f64> = x.iter().copied().collect();
        check_param_grads(
            &mut flat_x,
            |p| {
                let mut probe = x.clone();
                probe.iter_mut().zip(p).for_each(|(w, v)| *w = *v);
                loss(&layer, &probe)
            },
            || dx.iter().copied().collect(),
            1e-6,
            "conv1d input",
        );
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut r = rng(3);
        let layer = Dense::<f64>::xavier(4, 3, &mut r);
        let mut x = Array2::zeros((5, 4));
        fill_random(&mut x, &mut r);
        let loss =
            |l: &Dense<f64>, x: &Array2<f64>| -> f64 { l.forward(x).iter().map(|v| v * v / 2.0).sum() };
        let y = layer.forward(&x);
        let (grad, dx) = layer.backward(&x, &y);

        let mut flat: Vec<f64> = layer.weight.iter().copied().collect();
        check_param_grads(
            &mut flat,
            |p| {
                let mut probe = layer.clone();
                probe.weight.iter_mut().zip(p).for_each(|(w, v)| *w = *v);
                loss(&probe, &x)
            },
            || grad.weight.iter().copied().collect(),
            1e-6,
            "dense weight",
        );
        let mut flat_x: Vec<f64> = x.iter().copied().collect();
        check_param_grads(
            &mut flat_x,
            |p| {
                let mut probe = x.clone();
                probe.iter_mut().zip(p).for_each(|(w, v)| *w = *v);
                loss(&layer, &probe)
            },
            || dx.iter().copied().collect(),
            1e-6,
            "dense input",
        );
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let mut r = rng(4);
        let layer = Conv2d::<f64>::xavier(3, 2, 3, &mut r);
        let mut x = Array3::zeros((4, 5, 2));
        fill_random(&mut x, &mut r);
        let loss =
            |l: &Conv2d<f64>, x: &Array3<f64>| -> f64 { l.forward(x).iter().map(|v| v * v / 2.0).sum() };
        let y = layer.forward(&x);
        assert_eq!(y.dim(), (4, 5, 3));
        let (grad, dx) = layer.backward(&x, &y);

        let mut flat: Vec<f64> = layer.weight.iter().copied().collect();
        check_param_grads(
            &mut flat,
            |p| {
                let mut probe = layer.clone();
                probe.weight.iter_mut().zip(p).for_each(|(w, v)| *w = *v);
                loss(&probe, &x)
            },
            || grad.weight.iter().copied().collect(),
            1e-6,
            "conv2d weight",
        );
        let mut flat_x: Vec<f64> = x.iter().copied().collect();
        check_param_grads(
            &mut flat_x,
            |p| {
                let mut probe = x.clone();
                probe.iter_mut().zip(p).for_each(|(w, v)| *w = *v);
                loss(&layer, &probe)
            },
            || dx.iter().copied().collect(),
            1e-6,
            "conv2d input",
        );
    }

    #[test]
    fn conv2d_identity_center_tap_is_local() {
        let mut layer = Conv2d::<f64> {
            weight: Array4::zeros((3, 3, 2, 2)),
            bias: Array1::zeros(2),
        };
        // Center tap = identity on channels.
        layer.weight[[1, 1, 0, 0]] = 1.0;
        layer.weight[[1, 1, 1, 1]] = 1.0;
        let mut r = rng(5);
        let mut x = Array3::zeros((4, 4, 2));
        fill_random(&mut x, &mut r);
        let y = layer.forward(&x);
        assert_eq!(x, y);
    }

    #[test]
    fn conv3d_backward_matches_finite_differences() {
        let mut r = rng(6);
        let layer = Conv3d::<f64>::xavier(3, 2, 2, &mut r);
        let mut x = Array4::zeros((3, 4, 4, 2));
        fill_random(&mut x, &mut r);
        let loss =
            |l: &Conv3d<f64>, x: &Array4<f64>| -> f64 { l.forward(x).iter().map(|v| v * v / 2.0).sum() };
        let y = layer.forward(&x);
        assert_eq!(y.dim(), (3, 4, 4, 2));
        let (grad, dx) = layer.backward(&x, &y);

        let mut flat: Vec<f64> = layer.weight.iter().copied().collect();
        check_param_grads(
            &mut flat,
            |p| {
                let mut probe = layer.clone();
                probe.weight.iter_mut().zip(p).for_each(|(w, v)| *w = *v);
                loss(&probe, &x)
            },
            || grad.weight.iter().copied().collect(),
            3e-6,
            "conv3d weight",
        );
        let mut flat_x: Vec<f64> = x.iter().copied().collect();
        check_param_grads(
            &mut flat_x,
            |p| {
                let mut probe = x.clone();
                probe.iter_mut().zip(p).for_each(|(w, v)| *w = *v);
                loss(&layer, &probe)
            },
            || dx.iter().copied().collect(),
            3e-6,
            "conv3d input",
        );
    }

    #[test]
    fn maxpool_handles_odd_lengths_and_routes_gradients() {
        let x = Array3::from_shape_vec(
            (5, 1, 2),
            vec![1.0, 0.0, 3.0, 1.0, 2.0, 5.0, 0.0, 2.0, 7.0, -1.0],
        )
        .unwrap();
        let (y, arg) = maxpool_time(&x, 2);
        assert_eq!(y.dim(), (3, 1, 2));
        assert_eq!(y[[0, 0, 0]], 3.0); // max(1, 3)
        assert_eq!(y[[1, 0, 1]], 5.0); // max(5, 2)
        assert_eq!(y[[2, 0, 0]], 7.0); // lone last frame
        let dy = Array3::from_elem((3, 1, 2), 1.0);
        let dx = maxpool_time_backward(&arg, &dy, 5, 2);
        assert_eq!(dx[[1, 0, 0]], 1.0);
        assert_eq!(dx[[0, 0, 0]], 0.0);
        assert_eq!(dx[[4, 0, 0]], 1.0);
        let total: f64 = dx.iter().sum();
        assert_eq!(total, 6.0, "every pooled gradient lands exactly once");
    }

    #[test]
    fn gap_time_averages_and_spreads() {
        let x = Array3::from_shape_vec((2, 1, 2), vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let y = gap_time(&x);
        assert_eq!(y[[0, 0]], 2.0);
        assert_eq!(y[[0, 1]], 4.0);
        let dx = gap_time_backward(&y, 2);
        assert_eq!(dx[[0, 0, 0]], 1.0);
        assert_eq!(dx[[1, 0, 1]], 2.0);
    }

    #[test]
    fn dropout_mask_is_inverted_and_seeded() {
        let mut r = rng(7);
        let m: Array2<f64> = dropout_mask(ndarray::Dim((50, 50)), 0.5, &mut r);
        for &v in m.iter() {
            assert!(v == 0.0 || v == 2.0);
        }
        let kept = m.iter().filter(|&&v| v > 0.0).count();
        assert!((800..1700).contains(&kept), "kept {kept} of 2500");
        let mut r2 = rng(7);
        let m2: Array2<f64> = dropout_mask(ndarray::Dim((50, 50)), 0.5, &mut r2);
        assert_eq!(m, m2);

        let mut r3 = rng(8);
        let none: Array2<f64> = dropout_mask(ndarray::Dim((4, 4)), 0.0, &mut r3);
        assert!(none.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn xavier_init_is_bounded_and_deterministic() {
        let mut r = rng(9);
        let a = Conv1d::<f32>::xavier(5, 18, 64, &mut r);
        let limit = (6.0f32 / (5.0 * 18.0 + 5.0 * 64.0)).sqrt();
        for &w in a.weight.iter() {
            assert!(w.abs() <= limit);
        }
        assert!(a.bias.iter().all(|&b| b == 0.0));
        let mut r2 = rng(9);
        let b = Conv1d::<f32>::xavier(5, 18, 64, &mut r2);
        assert_eq!(a, b);
    }
}
