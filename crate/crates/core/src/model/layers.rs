//! Layers with explicit forward/backward passes over a flat parameter vector.
//!
//! Activations are `batch x features` matrices. Image tensors are flattened
//! per sample in channel-major order (`c, y, x`).

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Allocates parameters and buffers while an architecture is assembled.
pub(crate) struct ParamBuilder<'r, R: Rng> {
    pub params: Vec<f64>,
    pub buffers: Vec<f64>,
    pub rng: &'r mut R,
}

impl<R: Rng> ParamBuilder<'_, R> {
    fn alloc_uniform(&mut self, len: usize, bound: f64) -> usize {
        let offset = self.params.len();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        self.params.extend((0..len).map(|_| dist.sample(self.rng)));
        offset
    }

    pub fn alloc_normal(&mut self, len: usize, std: f64) -> usize {
        let offset = self.params.len();
        let dist = Normal::new(0.0, std).expect("finite std");
        self.params.extend((0..len).map(|_| dist.sample(self.rng)));
        offset
    }

    pub fn alloc_const(&mut self, len: usize, value: f64) -> usize {
        let offset = self.params.len();
        self.params.extend(std::iter::repeat_n(value, len));
        offset
    }

    fn alloc_buffer(&mut self, len: usize, value: f64) -> usize {
        let offset = self.buffers.len();
        self.buffers.extend(std::iter::repeat_n(value, len));
        offset
    }

    pub fn linear(&mut self, inp: usize, out: usize) -> Layer {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = self.alloc_uniform(inp * out, bound);
        let b = self.alloc_uniform(out, bound);
        Layer::Linear(Linear { inp, out, w, b })
    }

    pub fn conv(&mut self, shape: ImageShape, out_c: usize, k: usize, stride: usize, pad: usize) -> Conv2d {
        let fan_in = shape.c * k * k;
        let w = self.alloc_uniform(out_c * fan_in, (6.0 / fan_in as f64).sqrt());
        Conv2d {
            input: shape,
            out_c,
            k,
            stride,
            pad,
            w,
        }
    }

    pub fn batch_norm(&mut self, channels: usize, spatial: usize) -> Layer {
        let gamma = self.alloc_const(channels, 1.0);
        let beta = self.alloc_const(channels, 0.0);
        let mean = self.alloc_buffer(channels, 0.0);
        let var = self.alloc_buffer(channels, 1.0);
        Layer::BatchNorm(BatchNorm {
            channels,
            spatial,
            gamma,
            beta,
            mean,
            var,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ImageShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub inp: usize,
    pub out: usize,
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn weights<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.out, self.inp), &p[self.w..self.w + self.out * self.inp])
            .expect("weight slice sized at build time")
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[self.b..self.b + self.out])
    }

    pub fn apply(&self, p: &[f64], x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weights(p).t()) + self.bias(p)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, p: &[f64], x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, grads: &mut [f64]) -> Array2<f64> {
        let dw = dy.t().dot(&x);
        for (g, d) in grads[self.w..self.w + self.out * self.inp].iter_mut().zip(dw.iter()) {
            *g += d;
        }
        for (g, d) in grads[self.b..self.b + self.out].iter_mut().zip(dy.sum_axis(Axis(0)).iter()) {
            *g += d;
        }
        dy.dot(&self.weights(p))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub input: ImageShape,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub w: usize,
}

impl Conv2d {
    pub fn output_shape(&self) -> ImageShape {
        let out = |n: usize| (n + 2 * self.pad - self.k) / self.stride + 1;
        ImageShape {
            c: self.out_c,
            h: out(self.input.h),
            w: out(self.input.w),
        }
    }

    fn patch_len(&self) -> usize {
        self.input.c * self.k * self.k
    }

    fn weights<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        let len = self.out_c * self.patch_len();
        ArrayView2::from_shape((self.out_c, self.patch_len()), &p[self.w..self.w + len])
            .expect("weight slice sized at build time")
    }

    fn im2col(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let ImageShape { c, h, w } = self.input;
        let out = self.output_shape();
        let hw_out = out.h * out.w;
        let mut cols = Array2::zeros((x.nrows() * hw_out, self.patch_len()));
        let (k, stride, pad) = (self.k, self.stride as isize, self.pad as isize);
        for (b, sample) in x.rows().into_iter().enumerate() {
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let mut row = cols.row_mut(b * hw_out + oy * out.w + ox);
                    for ch in 0..c {
                        for ky in 0..k {
                            let iy = oy as isize * stride + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox as isize * stride + kx as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                row[(ch * k + ky) * k + kx] = sample[(ch * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, batch: usize) -> Array2<f64> {
        let ImageShape { c, h, w } = self.input;
        let out = self.output_shape();
        let hw_out = out.h * out.w;
        let mut dx = Array2::zeros((batch, self.input.len()));
        let (k, stride, pad) = (self.k, self.stride as isize, self.pad as isize);
        for (b, mut sample) in dx.rows_mut().into_iter().enumerate() {
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let row = dcols.row(b * hw_out + oy * out.w + ox);
                    for ch in 0..c {
                        for ky in 0..k {
                            let iy = oy as isize * stride + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox as isize * stride + kx as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                sample[(ch * h + iy as usize) * w + ix as usize] += row[(ch * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn forward(&self, p: &[f64], x: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let out = self.output_shape();
        let hw_out = out.h * out.w;
        let cols = self.im2col(x);
        let y = cols.dot(&self.weights(p).t()); // (B*hw, out_c)
        let mut result = Array2::zeros((x.nrows(), out.len()));
        for (b, mut row) in result.rows_mut().into_iter().enumerate() {
            let block = y.slice(s![b * hw_out..(b + 1) * hw_out, ..]);
            for oc in 0..self.out_c {
                row.slice_mut(s![oc * hw_out..(oc + 1) * hw_out]).assign(&block.column(oc));
            }
        }
        (result, cols)
    }

    fn backward(&self, p: &[f64], cols: &Array2<f64>, dy: ArrayView2<'_, f64>, grads: &mut [f64]) -> Array2<f64> {
        let out = self.output_shape();
        let hw_out = out.h * out.w;
        let batch = dy.nrows();
        let mut dy_mat = Array2::zeros((batch * hw_out, self.out_c));
        for (b, row) in dy.rows().into_iter().enumerate() {
            let mut block = dy_mat.slice_mut(s![b * hw_out..(b + 1) * hw_out, ..]);
            for oc in 0..self.out_c {
                block.column_mut(oc).assign(&row.slice(s![oc * hw_out..(oc + 1) * hw_out]));
            }
        }
        let dw = dy_mat.t().dot(cols);
        let len = self.out_c * self.patch_len();
        for (g, d) in grads[self.w..self.w + len].iter_mut().zip(dw.iter()) {
            *g += d;
        }
        let dcols = dy_mat.dot(&self.weights(p));
        self.col2im(&dcols, batch)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub channels: usize,
    /// Values per channel per sample (`h * w`, or 1 for vectors).
    pub spatial: usize,
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

impl BatchNorm {
    fn normalize_with(&self, p: &[f64], x: ArrayView2<'_, f64>, mean: &[f64], var: &[f64]) -> (Array2<f64>, Array2<f64>) {
        let mut xhat = x.to_owned();
        let mut y = Array2::zeros(x.raw_dim());
        for ch in 0..self.channels {
            let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
            let (g, b) = (p[self.gamma + ch], p[self.beta + ch]);
            let cols = s![.., ch * self.spatial..(ch + 1) * self.spatial];
            xhat.slice_mut(cols).mapv_inplace(|v| (v - mean[ch]) * inv);
            y.slice_mut(cols).assign(&xhat.slice(cols).mapv(|v| g * v + b));
        }
        (y, xhat)
    }

    fn batch_stats(&self, x: ArrayView2<'_, f64>) -> (Vec<f64>, Vec<f64>) {
        let count = (x.nrows() * self.spatial) as f64;
        (0..self.channels)
            .map(|ch| {
                let block = x.slice(s![.., ch * self.spatial..(ch + 1) * self.spatial]);
                let mean = block.sum() / count;
                let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
                (mean, var)
            })
            .unzip()
    }

    fn backward(&self, p: &[f64], xhat: &Array2<f64>, inv_std: &[f64], dy: ArrayView2<'_, f64>, grads: &mut [f64]) -> Array2<f64> {
        let count = (dy.nrows() * self.spatial) as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for ch in 0..self.channels {
            let cols = s![.., ch * self.spatial..(ch + 1) * self.spatial];
            let dyc = dy.slice(cols);
            let xh = xhat.slice(cols);
            let dbeta = dyc.sum();
            let dgamma = (&dyc * &xh).sum();
            grads[self.beta + ch] += dbeta;
            grads[self.gamma + ch] += dgamma;
            let g = p[self.gamma + ch];
            let scale = g * inv_std[ch] / count;
            dx.slice_mut(cols)
                .assign(&((&dyc * count - dbeta - &(&xh * dgamma)) * scale));
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Linear(Linear),
    Relu,
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    GlobalAvgPool { channels: usize, spatial: usize },
    /// `relu(main(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual { main: Vec<Layer>, shortcut: Vec<Layer> },
}

/// What a layer keeps from its training forward pass.
#[derive(Debug)]
pub(crate) enum Cache {
    Input(Array2<f64>),
    Mask(Array2<bool>),
    Cols(Array2<f64>),
    Norm { xhat: Array2<f64>, inv_std: Vec<f64> },
    Pool,
    Residual { main: Vec<Cache>, shortcut: Vec<Cache>, mask: Array2<bool> },
}

impl Layer {
    pub fn forward_eval(&self, p: &[f64], buffers: &[f64], x: Array2<f64>) -> Array2<f64> {
        match self {
            Layer::Linear(l) => l.apply(p, x.view()),
            Layer::Relu => x.mapv_into(|v| v.max(0.0)),
            Layer::Conv2d(c) => c.forward(p, x.view()).0,
            Layer::BatchNorm(bn) => {
                let mean = &buffers[bn.mean..bn.mean + bn.channels];
                let var = &buffers[bn.var..bn.var + bn.channels];
                bn.normalize_with(p, x.view(), mean, var).0
            }
            Layer::GlobalAvgPool { channels, spatial } => avg_pool(&x, *channels, *spatial),
            Layer::Residual { main, shortcut } => {
                let short = run_eval(shortcut, p, buffers, x.clone());
                let y = run_eval(main, p, buffers, x) + short;
                y.mapv_into(|v| v.max(0.0))
            }
        }
    }

    /// Training-mode forward. Batch-norm layers use batch statistics and
    /// update their running estimates in `buffers`.
    pub fn forward_train(&self, p: &[f64], buffers: &mut [f64], x: Array2<f64>) -> (Array2<f64>, Cache) {
        match self {
            Layer::Linear(l) => {
                let y = l.apply(p, x.view());
                (y, Cache::Input(x))
            }
            Layer::Relu => {
                let mask = x.mapv(|v| v > 0.0);
                (x.mapv_into(|v| v.max(0.0)), Cache::Mask(mask))
            }
            Layer::Conv2d(c) => {
                let (y, cols) = c.forward(p, x.view());
                (y, Cache::Cols(cols))
            }
            Layer::BatchNorm(bn) => {
                let (mean, var) = bn.batch_stats(x.view());
                let (y, xhat) = bn.normalize_with(p, x.view(), &mean, &var);
                let count = (x.nrows() * bn.spatial) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for ch in 0..bn.channels {
                    let rm = &mut buffers[bn.mean + ch];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch];
                    let rv = &mut buffers[bn.var + ch];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ch] * unbias;
                }
                let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (y, Cache::Norm { xhat, inv_std })
            }
            Layer::GlobalAvgPool { channels, spatial } => (avg_pool(&x, *channels, *spatial), Cache::Pool),
            Layer::Residual { main, shortcut } => {
                let (short, short_caches) = run_train(shortcut, p, buffers, x.clone());
                let (y, main_caches) = run_train(main, p, buffers, x);
                let y = y + short;
                let mask = y.mapv(|v| v > 0.0);
                (
                    y.mapv_into(|v| v.max(0.0)),
                    Cache::Residual {
                        main: main_caches,
                        shortcut: short_caches,
                        mask,
                    },
                )
            }
        }
    }

    pub fn backward(&self, p: &[f64], cache: Cache, dy: Array2<f64>, grads: &mut [f64]) -> Array2<f64> {
        match (self, cache) {
            (Layer::Linear(l), Cache::Input(x)) => l.backward(p, x.view(), dy.view(), grads),
            (Layer::Relu, Cache::Mask(mask)) => apply_mask(dy, &mask),
            (Layer::Conv2d(c), Cache::Cols(cols)) => c.backward(p, &cols, dy.view(), grads),
            (Layer::BatchNorm(bn), Cache::Norm { xhat, inv_std }) => bn.backward(p, &xhat, &inv_std, dy.view(), grads),
            (Layer::GlobalAvgPool { channels, spatial }, Cache::Pool) => {
                let mut dx = Array2::zeros((dy.nrows(), channels * spatial));
                let scale = 1.0 / *spatial as f64;
                for ch in 0..*channels {
                    for (mut row, g) in dx.rows_mut().into_iter().zip(dy.column(ch)) {
                        row.slice_mut(s![ch * spatial..(ch + 1) * spatial]).fill(g * scale);
                    }
                }
                dx
            }
            (Layer::Residual { main, shortcut }, Cache::Residual { main: mc, shortcut: sc, mask }) => {
                let dy = apply_mask(dy, &mask);
                let d_short = back_sequence(shortcut, p, sc, dy.clone(), grads);
                back_sequence(main, p, mc, dy, grads) + d_short
            }
            _ => unreachable!("cache does not belong to this layer"),
        }
    }
}

fn apply_mask(mut dy: Array2<f64>, mask: &Array2<bool>) -> Array2<f64> {
    dy.zip_mut_with(mask, |g, &m| {
        if !m {
            *g = 0.0;
        }
    });
    dy
}

fn avg_pool(x: &Array2<f64>, channels: usize, spatial: usize) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), channels));
    for (mut o, row) in out.rows_mut().into_iter().zip(x.rows()) {
        for ch in 0..channels {
            o[ch] = row.slice(s![ch * spatial..(ch + 1) * spatial]).sum() / spatial as f64;
        }
    }
    out
}

pub(crate) fn run_eval(layers: &[Layer], p: &[f64], buffers: &[f64], x: Array2<f64>) -> Array2<f64> {
    layers.iter().fold(x, |h, l| l.forward_eval(p, buffers, h))
}

pub(crate) fn run_train(layers: &[Layer], p: &[f64], buffers: &mut [f64], x: Array2<f64>) -> (Array2<f64>, Vec<Cache>) {
    let mut caches = Vec::with_capacity(layers.len());
    let mut h = x;
    for l in layers {
        let (y, c) = l.forward_train(p, buffers, h);
        caches.push(c);
        h = y;
    }
    (h, caches)
}

pub(crate) fn back_sequence(layers: &[Layer], p: &[f64], caches: Vec<Cache>, dy: Array2<f64>, grads: &mut [f64]) -> Array2<f64> {
    layers
        .iter()
        .zip(caches)
        .rev()
        .fold(dy, |g, (l, c)| l.backward(p, c, g, grads))
}
