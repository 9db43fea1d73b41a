//! Layers with explicit forward/backward passes.
//!
//! Every layer caches what its backward pass needs during a training-mode
//! forward call. Backward accumulates into parameter gradients and returns the
//! gradient with respect to the layer input.

use rand::Rng;

use crate::error::{Error, Result};

use super::{matmul, FeatureMap, Scalar};

/// A named, trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

impl<F: Scalar> Param<F> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            value: vec![F::zero(); len],
            grad: vec![F::zero(); len],
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: F) -> Self {
        let mut p = Self::zeros(name, shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    pub fn fan_in_uniform<R: Rng>(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(name, shape);
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        for v in p.value.iter_mut() {
            *v = F::of(rng.random_range(-bound..bound));
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}

/// Kernel/stride/padding of a 2-D (transposed) convolution. Padding may be
/// asymmetric: `pad_begin` on top/left, `pad_end` on bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad_begin: usize,
    pub pad_end: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad_begin: usize, pad_end: usize) -> Self {
        Self {
            kernel,
            stride,
            pad_begin,
            pad_end,
        }
    }

    /// Output extent of a forward convolution, if positive.
    pub fn conv_out(&self, size: usize) -> Option<usize> {
        let padded = size + self.pad_begin + self.pad_end;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution, if positive.
    pub fn transposed_out(&self, size: usize) -> Option<usize> {
        if size == 0 {
            return None;
        }
        let grown = (size - 1) * self.stride + self.kernel;
        grown
            .checked_sub(self.pad_begin + self.pad_end)
            .filter(|&s| s > 0)
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad_begin`
/// lies inside `[0, w)`.
fn valid_span(g: ConvGeometry, kx: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = g.pad_begin.saturating_sub(kx).div_ceil(g.stride);
    let hi = if w + g.pad_begin > kx {
        ((w + g.pad_begin - kx - 1) / g.stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Layout of one im2col operation: a `[c][n][h][w]` map unfolded into
/// `[c*k*k][chunk*oh*ow]` patch columns for samples `n0..n1`.
#[derive(Clone, Copy)]
struct Unfold {
    c: usize,
    n: usize,
    h: usize,
    w: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
}

impl Unfold {
    fn rows(&self) -> usize {
        self.c * self.g.kernel * self.g.kernel
    }

    /// Samples per chunk, keeping the patch matrix around a million elements.
    fn chunk(&self) -> usize {
        let per_sample = self.rows() * self.oh * self.ow;
        (1_000_000 / per_sample.max(1)).clamp(1, self.n.max(1))
    }

    fn im2col<F: Scalar>(&self, src: &[F], n0: usize, n1: usize, cols: &mut [F]) {
        let Unfold {
            c,
            n,
            h,
            w,
            g,
            oh,
            ow,
        } = *self;
        let k = g.kernel;
        let ncols = (n1 - n0) * oh * ow;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                    let (lo, hi) = valid_span(g, kx, w, ow);
                    for ni in n0..n1 {
                        let src_img = &src[(ci * n + ni) * h * w..][..h * w];
                        for oy in 0..oh {
                            let dst = &mut dst_row[((ni - n0) * oh + oy) * ow..][..ow];
                            let iy = (oy * g.stride + ky) as isize - g.pad_begin as isize;
                            if iy < 0 || iy >= h as isize || lo >= hi {
                                dst.fill(F::zero());
                                continue;
                            }
                            let src_row = &src_img[iy as usize * w..][..w];
                            dst[..lo].fill(F::zero());
                            dst[hi..].fill(F::zero());
                            let first = lo * g.stride + kx - g.pad_begin;
                            if g.stride == 1 {
                                dst[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                            } else {
                                for (d, &v) in dst[lo..hi]
                                    .iter_mut()
                                    .zip(src_row[first..].iter().step_by(g.stride))
                                {
                                    *d = v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Unfold::im2col`]: scatters patches back, accumulating into `dst`.
    fn col2im<F: Scalar>(&self, cols: &[F], n0: usize, n1: usize, dst: &mut [F]) {
        let Unfold {
            c,
            n,
            h,
            w,
            g,
            oh,
            ow,
        } = *self;
        let k = g.kernel;
        let ncols = (n1 - n0) * oh * ow;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &cols[row * ncols..(row + 1) * ncols];
                    let (lo, hi) = valid_span(g, kx, w, ow);
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * g.stride + kx - g.pad_begin;
                    for ni in n0..n1 {
                        let dst_img = &mut dst[(ci * n + ni) * h * w..][..h * w];
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad_begin as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &src_row[((ni - n0) * oh + oy) * ow..][..ow];
                            let dst_row = &mut dst_img[iy as usize * w..][..w];
                            if g.stride == 1 {
                                for (d, &v) in
                                    dst_row[first..first + hi - lo].iter_mut().zip(&src[lo..hi])
                                {
                                    *d += v;
                                }
                            } else {
                                for (d, &v) in dst_row[first..]
                                    .iter_mut()
                                    .step_by(g.stride)
                                    .zip(&src[lo..hi])
                                {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<F: Scalar>(out: &mut FeatureMap<F>, bias: &[F]) {
    let per = out.per_channel();
    for (c, chunk) in out.data.chunks_mut(per).enumerate() {
        let b = bias[c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_channel_bias_grad<F: Scalar>(grad_out: &FeatureMap<F>, bias_grad: &mut [F]) {
    let per = grad_out.per_channel();
    for (c, chunk) in grad_out.data.chunks(per).enumerate() {
        bias_grad[c] += chunk.iter().copied().sum::<F>();
    }
}

/// 2-D convolution; weight layout `[out][in][k][k]`.
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    cache: Option<FeatureMap<F>>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let k = geometry.kernel;
        let fan_in = in_channels * k * k;
        let weight = Param::fan_in_uniform(
            format!("{name}.weight"),
            vec![out_channels, in_channels, k, k],
            fan_in,
            rng,
        );
        let bias = with_bias.then(|| Param::zeros(format!("{name}.bias"), vec![out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            geometry,
            cache: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.geometry.conv_out(h)?, self.geometry.conv_out(w)?))
    }

    fn unfold(&self, n: usize, h: usize, w: usize, oh: usize, ow: usize) -> Unfold {
        Unfold {
            c: self.in_channels,
            n,
            h,
            w,
            g: self.geometry,
            oh,
            ow,
        }
    }

    fn compute(&self, x: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        if x.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "{}: expected {} input channels, got {}",
                self.weight.name, self.in_channels, x.channels
            )));
        }
        let (oh, ow) = self.output_size(x.height, x.width).ok_or_else(|| {
            Error::Shape(format!(
                "{}: input {}x{} too small",
                self.weight.name, x.height, x.width
            ))
        })?;
        let u = self.unfold(x.batch, x.height, x.width, oh, ow);
        let rows = u.rows();
        let plane = oh * ow;
        let row_stride = (x.batch * plane) as isize;
        let mut out = FeatureMap::zeros(self.out_channels, x.batch, oh, ow);
        let mut cols = vec![F::zero(); rows * u.chunk() * plane];
        for n0 in (0..x.batch).step_by(u.chunk()) {
            let n1 = (n0 + u.chunk()).min(x.batch);
            let ncols = (n1 - n0) * plane;
            u.im2col(&x.data, n0, n1, &mut cols);
            let off = n0 * plane;
            F::gemm(
                self.out_channels,
                rows,
                ncols,
                F::one(),
                &self.weight.value,
                (rows as isize, 1),
                &cols,
                (ncols as isize, 1),
                F::zero(),
                &mut out.data[off..],
                (row_stride, 1),
            );
        }
        if let Some(b) = &self.bias {
            add_channel_bias(&mut out, &b.value);
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &FeatureMap<F>, train: bool) -> Result<FeatureMap<F>> {
        let out = self.compute(x)?;
        self.cache = train.then(|| x.clone());
        Ok(out)
    }

    fn backward_impl(
        &self,
        grad_out: &FeatureMap<F>,
        x: Option<&FeatureMap<F>>,
        in_h: usize,
        in_w: usize,
        weight_grad: Option<&mut [F]>,
    ) -> FeatureMap<F> {
        let u = self.unfold(grad_out.batch, in_h, in_w, grad_out.height, grad_out.width);
        let rows = u.rows();
        let plane = grad_out.height * grad_out.width;
        let row_stride = (grad_out.batch * plane) as isize;
        let mut cols = vec![F::zero(); rows * u.chunk() * plane];
        let mut dcols = vec![F::zero(); rows * u.chunk() * plane];
        let mut dx = FeatureMap::zeros(self.in_channels, grad_out.batch, in_h, in_w);
        let mut weight_grad = weight_grad;
        for n0 in (0..grad_out.batch).step_by(u.chunk()) {
            let n1 = (n0 + u.chunk()).min(grad_out.batch);
            let ncols = (n1 - n0) * plane;
            let off = n0 * plane;
            let dy = &grad_out.data[off..];
            if let (Some(x), Some(wg)) = (x, weight_grad.as_deref_mut()) {
                // dW += dY * cols^T
                u.im2col(&x.data, n0, n1, &mut cols);
                F::gemm(
                    self.out_channels,
                    ncols,
                    rows,
                    F::one(),
                    dy,
                    (row_stride, 1),
                    &cols,
                    (1, ncols as isize),
                    F::one(),
                    wg,
                    (rows as isize, 1),
                );
            }
            // dcols = W^T * dY
            F::gemm(
                rows,
                self.out_channels,
                ncols,
                F::one(),
                &self.weight.value,
                (1, rows as isize),
                dy,
                (row_stride, 1),
                F::zero(),
                &mut dcols,
                (ncols as isize, 1),
            );
            u.col2im(&dcols, n0, n1, &mut dx.data);
        }
        dx
    }

    pub fn backward(&mut self, grad_out: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        let x = self.cache.take().ok_or_else(|| {
            Error::Shape(format!("{}: backward without forward", self.weight.name))
        })?;
        let mut wg = std::mem::take(&mut self.weight.grad);
        let dx = self.backward_impl(grad_out, Some(&x), x.height, x.width, Some(&mut wg));
        self.weight.grad = wg;
        if let Some(b) = &mut self.bias {
            accumulate_channel_bias_grad(grad_out, &mut b.grad);
        }
        Ok(dx)
    }

    /// Gradient with respect to the input only; parameter gradients are left untouched.
    pub fn backward_input(
        &self,
        grad_out: &FeatureMap<F>,
        in_h: usize,
        in_w: usize,
    ) -> FeatureMap<F> {
        self.backward_impl(grad_out, None, in_h, in_w, None)
    }

    /// Forward pass without caching, usable through a shared reference.
    pub fn forward_frozen(&self, x: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        self.compute(x)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }
}

/// Transposed 2-D convolution; weight layout `[in][out][k][k]`.
pub struct ConvTranspose2d<F> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    cache: Option<FeatureMap<F>>,
}

impl<F: Scalar> ConvTranspose2d<F> {
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let k = geometry.kernel;
        // each output pixel sees roughly in_channels * (k/stride)^2 inputs
        let fan_in = (in_channels * k * k / (geometry.stride * geometry.stride)).max(1);
        let weight = Param::fan_in_uniform(
            format!("{name}.weight"),
            vec![in_channels, out_channels, k, k],
            fan_in,
            rng,
        );
        let bias = with_bias.then(|| Param::zeros(format!("{name}.bias"), vec![out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            geometry,
            cache: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            self.geometry.transposed_out(h)?,
            self.geometry.transposed_out(w)?,
        ))
    }

    /// The forward pass scatters like the adjoint of a convolution from the
    /// output map back onto the input map.
    fn unfold(&self, n: usize, oh: usize, ow: usize, h: usize, w: usize) -> Unfold {
        Unfold {
            c: self.out_channels,
            n,
            h: oh,
            w: ow,
            g: self.geometry,
            oh: h,
            ow: w,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<F>, train: bool) -> Result<FeatureMap<F>> {
        if x.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "{}: expected {} input channels, got {}",
                self.weight.name, self.in_channels, x.channels
            )));
        }
        let (oh, ow) = self
            .output_size(x.height, x.width)
            .ok_or_else(|| Error::Shape(format!("{}: degenerate output", self.weight.name)))?;
        let u = self.unfold(x.batch, oh, ow, x.height, x.width);
        let rows = u.rows();
        let plane = x.height * x.width;
        let row_stride = (x.batch * plane) as isize;
        let mut cols = vec![F::zero(); rows * u.chunk() * plane];
        let mut out = FeatureMap::zeros(self.out_channels, x.batch, oh, ow);
        for n0 in (0..x.batch).step_by(u.chunk()) {
            let n1 = (n0 + u.chunk()).min(x.batch);
            let ncols = (n1 - n0) * plane;
            let off = n0 * plane;
            F::gemm(
                rows,
                self.in_channels,
                ncols,
                F::one(),
                &self.weight.value,
                (1, rows as isize),
                &x.data[off..],
                (row_stride, 1),
                F::zero(),
                &mut cols,
                (ncols as isize, 1),
            );
            u.col2im(&cols, n0, n1, &mut out.data);
        }
        if let Some(b) = &self.bias {
            add_channel_bias(&mut out, &b.value);
        }
        self.cache = train.then(|| x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        let x = self.cache.take().ok_or_else(|| {
            Error::Shape(format!("{}: backward without forward", self.weight.name))
        })?;
        let u = self.unfold(x.batch, grad_out.height, grad_out.width, x.height, x.width);
        let rows = u.rows();
        let plane = x.height * x.width;
        let row_stride = (x.batch * plane) as isize;
        let mut dcols = vec![F::zero(); rows * u.chunk() * plane];
        let mut dx = FeatureMap::zeros(self.in_channels, x.batch, x.height, x.width);
        for n0 in (0..x.batch).step_by(u.chunk()) {
            let n1 = (n0 + u.chunk()).min(x.batch);
            let ncols = (n1 - n0) * plane;
            let off = n0 * plane;
            u.im2col(&grad_out.data, n0, n1, &mut dcols);
            // dW += X * dcols^T
            F::gemm(
                self.in_channels,
                ncols,
                rows,
                F::one(),
                &x.data[off..],
                (row_stride, 1),
                &dcols,
                (1, ncols as isize),
                F::one(),
                &mut self.weight.grad,
                (rows as isize, 1),
            );
            // dX = W * dcols
            F::gemm(
                self.in_channels,
                rows,
                ncols,
                F::one(),
                &self.weight.value,
                (rows as isize, 1),
                &dcols,
                (ncols as isize, 1),
                F::zero(),
                &mut dx.data[off..],
                (row_stride, 1),
            );
        }
        if let Some(b) = &mut self.bias {
            accumulate_channel_bias_grad(grad_out, &mut b.grad);
        }
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }
}

/// Fully connected layer on `[features][batch]` matrices; weight layout `[out][in]`.
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_features: usize,
    pub out_features: usize,
    cache: Option<FeatureMap<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new<R: Rng>(name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::fan_in_uniform(
                format!("{name}.weight"),
                vec![out_features, in_features],
                in_features,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![out_features]),
            in_features,
            out_features,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<F>, train: bool) -> Result<FeatureMap<F>> {
        let rows = x.channels * x.plane();
        if rows != self.in_features {
            return Err(Error::Shape(format!(
                "{}: expected {} features, got {rows}",
                self.weight.name, self.in_features
            )));
        }
        let n = x.batch;
        let mut out = FeatureMap::zeros(self.out_features, n, 1, 1);
        matmul(
            self.out_features,
            self.in_features,
            n,
            &self.weight.value,
            false,
            &x.data,
            false,
            &mut out.data,
            false,
        );
        add_channel_bias(&mut out, &self.bias.value);
        self.cache = train.then(|| x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        let x = self.cache.take().ok_or_else(|| {
            Error::Shape(format!("{}: backward without forward", self.weight.name))
        })?;
        let n = x.batch;
        matmul(
            self.out_features,
            n,
            self.in_features,
            &grad_out.data,
            false,
            &x.data,
            true,
            &mut self.weight.grad,
            true,
        );
        accumulate_channel_bias_grad(grad_out, &mut self.bias.grad);
        let mut dx = FeatureMap::zeros(x.channels, n, x.height, x.width);
        matmul(
            self.in_features,
            self.out_features,
            n,
            &self.weight.value,
            true,
            &grad_out.data,
            false,
            &mut dx.data,
            false,
        );
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }
}

struct BatchNormCache<F> {
    normalized: Vec<F>,
    inv_std: Vec<F>,
}

/// Per-channel batch normalization. Training mode uses batch statistics and
/// updates running estimates; evaluation mode uses the running estimates.
pub struct BatchNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BatchNormCache<F>>,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.weight"), vec![channels], F::one()),
            beta: Param::zeros(format!("{name}.bias"), vec![channels]),
            running_mean: Param::zeros(format!("{name}.running_mean"), vec![channels]),
            running_var: Param::filled(format!("{name}.running_var"), vec![channels], F::one()),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<F>, train: bool) -> Result<FeatureMap<F>> {
        let channels = self.gamma.value.len();
        if x.channels != channels {
            return Err(Error::Shape(format!(
                "{}: expected {channels} channels, got {}",
                self.gamma.name, x.channels
            )));
        }
        let per = x.per_channel();
        let mut out = x.clone();
        let eps = F::of(self.eps);
        if train {
            let count = F::of(per as f64);
            let mut normalized = vec![F::zero(); x.len()];
            let mut inv_stds = vec![F::zero(); channels];
            for c in 0..channels {
                let src = &x.data[c * per..(c + 1) * per];
                let mean = src.iter().copied().sum::<F>() / count;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / count;
                let inv_std = F::one() / (var + eps).sqrt();
                inv_stds[c] = inv_std;
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                let norm = &mut normalized[c * per..(c + 1) * per];
                let dst = &mut out.data[c * per..(c + 1) * per];
                for ((d, nv), &v) in dst.iter_mut().zip(norm.iter_mut()).zip(src) {
                    *nv = (v - mean) * inv_std;
                    *d = g * *nv + b;
                }
                let m = F::of(self.momentum);
                let unbiased = if per > 1 {
                    var * count / F::of((per - 1) as f64)
                } else {
                    var
                };
                self.running_mean.value[c] = (F::one() - m) * self.running_mean.value[c] + m * mean;
                self.running_var.value[c] =
                    (F::one() - m) * self.running_var.value[c] + m * unbiased;
            }
            self.cache = Some(BatchNormCache {
                normalized,
                inv_std: inv_stds,
            });
        } else {
            for c in 0..channels {
                let inv_std = F::one() / (self.running_var.value[c] + eps).sqrt();
                let mean = self.running_mean.value[c];
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                for v in &mut out.data[c * per..(c + 1) * per] {
                    *v = g * (*v - mean) * inv_std + b;
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        let cache = self.cache.take().ok_or_else(|| {
            Error::Shape(format!("{}: backward without forward", self.gamma.name))
        })?;
        let channels = self.gamma.value.len();
        let per = grad_out.per_channel();
        let count = F::of(per as f64);
        let mut dx = grad_out.clone();
        for c in 0..channels {
            let dy = &grad_out.data[c * per..(c + 1) * per];
            let xhat = &cache.normalized[c * per..(c + 1) * per];
            let sum_dy = dy.iter().copied().sum::<F>();
            let sum_dy_xhat = dy.iter().zip(xhat).map(|(&d, &h)| d * h).sum::<F>();
            self.gamma.grad[c] += sum_dy_xhat;
            self.beta.grad[c] += sum_dy;
            let scale = self.gamma.value[c] * cache.inv_std[c] / count;
            for ((d, &g), &h) in dx.data[c * per..(c + 1) * per].iter_mut().zip(dy).zip(xhat) {
                *d = scale * (count * g - sum_dy - h * sum_dy_xhat);
            }
        }
        Ok(dx)
    }

    /// Trainable parameters only (running statistics are buffers).
    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn buffers(&self) -> Vec<&Param<F>> {
        vec![&self.running_mean, &self.running_var]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

/// Elementwise activation functions used by the networks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply<F: Scalar>(self, v: F) -> F {
        match self {
            Activation::LeakyRelu(slope) => {
                if v > F::zero() {
                    v
                } else {
                    v * F::of(slope)
                }
            }
            Activation::Relu => v.max(F::zero()),
            Activation::Sigmoid => F::one() / (F::one() + (-v).exp()),
            Activation::Softplus => softplus(v),
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    fn derivative<F: Scalar>(self, x: F, y: F) -> F {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::of(slope)
                }
            }
            Activation::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Sigmoid => y * (F::one() - y),
            Activation::Softplus => F::one() / (F::one() + (-x).exp()),
        }
    }
}

pub fn softplus<F: Scalar>(v: F) -> F {
    // ln(1 + e^v) = max(v, 0) + ln(1 + e^{-|v|})
    v.max(F::zero()) + (-v.abs()).exp().ln_1p()
}

/// Activation layer caching its input and output for backward.
pub struct ActivationLayer<F> {
    pub kind: Activation,
    cache: Option<(Vec<F>, Vec<F>)>,
}

impl<F: Scalar> ActivationLayer<F> {
    pub fn new(kind: Activation) -> Self {
        Self { kind, cache: None }
    }

    pub fn forward(&mut self, x: &FeatureMap<F>, train: bool) -> FeatureMap<F> {
        let mut out = x.clone();
        out.data.iter_mut().for_each(|v| *v = self.kind.apply(*v));
        self.cache = train.then(|| (x.data.clone(), out.data.clone()));
        out
    }

    pub fn backward(&mut self, grad_out: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        let (x, y) = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("activation: backward without forward".into()))?;
        let mut dx = grad_out.clone();
        for ((d, &xi), &yi) in dx.data.iter_mut().zip(&x).zip(&y) {
            *d *= self.kind.derivative(xi, yi);
        }
        Ok(dx)
    }
}
