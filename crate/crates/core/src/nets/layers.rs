use rand::Rng;
use rand_distr::StandardNormal;

use super::{Mode, Param, Tensor};
use crate::error::{CirkdError, Result};

/// Same-padded square convolution in NHWC layout. A 1x1 kernel is a
/// per-pixel affine map.
///
/// Weights are stored `[out][kh][kw][in]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn zeroed(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        assert!(stride >= 1);
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            weight: Param::zeros(vec![out_ch, kernel, kernel, in_ch]),
            bias: Param::zeros(vec![out_ch]),
            cache: None,
        }
    }

    /// He-normal weights, zero bias.
    pub fn he<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeroed(in_ch, out_ch, kernel, stride);
        let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
        for w in conv.weight.value.iter_mut() {
            *w = std * rng.sample::<f64, _>(StandardNormal);
        }
        conv
    }

    fn out_size(&self, n: usize) -> usize {
        let pad = self.kernel / 2;
        (n + 2 * pad - self.kernel) / self.stride + 1
    }

    fn geometry(&self, x: &Tensor) -> Geometry {
        Geometry {
            kernel: self.kernel,
            stride: self.stride,
            in_h: x.h,
            in_w: x.w,
            in_ch: x.c,
            out_h: self.out_size(x.h),
            out_w: self.out_size(x.w),
            out_ch: self.out_ch,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.c != self.in_ch {
            return Err(CirkdError::shape(
                "Conv2d::forward",
                format!("{} input channels, expected {}", x.c, self.in_ch),
            ));
        }
        let geo = self.geometry(x);
        let mut out = Tensor::zeros(x.n, geo.out_h, geo.out_w, self.out_ch);
        for px in out.data.chunks_exact_mut(self.out_ch) {
            px.copy_from_slice(&self.bias.value);
        }
        let w = &self.weight.value;
        let cin = self.in_ch;
        for b in 0..x.n {
            geo.for_each_tap(b, |out_idx, in_idx, tap| {
                let xin = &x.data[in_idx..in_idx + cin];
                for o in 0..geo.out_ch {
                    let wo = (o * geo.taps() + tap) * cin;
                    let mut acc = 0.0;
                    for (a, b) in w[wo..wo + cin].iter().zip(xin) {
                        acc += a * b;
                    }
                    out.data[out_idx + o] += acc;
                }
            });
        }
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| CirkdError::State("Conv2d::backward called without a cached forward".into()))?;
        let geo = self.geometry(&x);
        let expected = [x.n, geo.out_h, geo.out_w, self.out_ch];
        if grad_out.shape() != expected {
            return Err(CirkdError::shape(
                "Conv2d::backward",
                format!("gradient {:?}, expected {expected:?}", grad_out.shape()),
            ));
        }
        for px in grad_out.data.chunks_exact(self.out_ch) {
            for (db, g) in self.bias.grad.iter_mut().zip(px) {
                *db += g;
            }
        }
        let mut grad_in = Tensor::zeros(x.n, x.h, x.w, x.c);
        let cin = self.in_ch;
        let weight = &self.weight.value;
        let wgrad = &mut self.weight.grad;
        for b in 0..x.n {
            geo.for_each_tap(b, |out_idx, in_idx, tap| {
                let xin = &x.data[in_idx..in_idx + cin];
                for o in 0..geo.out_ch {
                    let g = grad_out.data[out_idx + o];
                    if g == 0.0 {
                        continue;
                    }
                    let wo = (o * geo.taps() + tap) * cin;
                    for (dw, xv) in wgrad[wo..wo + cin].iter_mut().zip(xin) {
                        *dw += g * xv;
                    }
                    for (dx, wv) in grad_in.data[in_idx..in_idx + cin].iter_mut().zip(&weight[wo..wo + cin]) {
                        *dx += g * wv;
                    }
                }
            });
        }
        Ok(grad_in)
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    kernel: usize,
    stride: usize,
    in_h: usize,
    in_w: usize,
    in_ch: usize,
    out_h: usize,
    out_w: usize,
    out_ch: usize,
}

impl Geometry {
    #[inline]
    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Calls `f(out_index, in_index, tap)` for every in-bounds (output pixel,
    /// kernel tap) pair of image `b`. Indices point at channel vectors; `tap`
    /// is `kh * kernel + kw`.
    #[inline]
    fn for_each_tap(&self, b: usize, mut f: impl FnMut(usize, usize, usize)) {
        let pad = self.kernel / 2;
        for oh in 0..self.out_h {
            for ow in 0..self.out_w {
                let out_idx = ((b * self.out_h + oh) * self.out_w + ow) * self.out_ch;
                for kh in 0..self.kernel {
                    let Some(ih) = (oh * self.stride + kh).checked_sub(pad) else { continue };
                    if ih >= self.in_h {
                        continue;
                    }
                    for kw in 0..self.kernel {
                        let Some(iw) = (ow * self.stride + kw).checked_sub(pad) else { continue };
                        if iw >= self.in_w {
                            continue;
                        }
                        let in_idx = ((b * self.in_h + ih) * self.in_w + iw) * self.in_ch;
                        f(out_idx, in_idx, kh * self.kernel + kw);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let mask: Vec<bool> = out
            .data
            .iter_mut()
            .map(|v| {
                let on = *v > 0.0;
                if !on {
                    *v = 0.0;
                }
                on
            })
            .collect();
        self.mask = Some(mask);
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| CirkdError::State("Relu::backward called without a cached forward".into()))?;
        if mask.len() != grad_out.data.len() {
            return Err(CirkdError::shape("Relu::backward", "gradient size differs from forward input"));
        }
        let mut g = grad_out.clone();
        for (v, on) in g.data.iter_mut().zip(mask) {
            if !on {
                *v = 0.0;
            }
        }
        Ok(g)
    }
}

/// Per-channel batch normalization over all `N * H * W` positions.
///
/// Running statistics follow `r <- momentum * r + (1 - momentum) * batch`
/// and use the biased batch variance.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![channels], vec![1.0; channels]),
            beta: Param::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.channels;
        if x.c != c {
            return Err(CirkdError::shape(
                "BatchNorm::forward",
                format!("{} channels, expected {c}", x.c),
            ));
        }
        let m = x.n * x.h * x.w;
        let (mean, var) = match mode {
            Mode::Train => {
                if m == 0 {
                    return Err(CirkdError::Param("batch norm over an empty batch".into()));
                }
                let mut mean = vec![0.0; c];
                for px in x.data.chunks_exact(c) {
                    for (s, v) in mean.iter_mut().zip(px) {
                        *s += v;
                    }
                }
                mean.iter_mut().for_each(|s| *s /= m as f64);
                let mut var = vec![0.0; c];
                for px in x.data.chunks_exact(c) {
                    for ((s, v), mu) in var.iter_mut().zip(px).zip(&mean) {
                        *s += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|s| *s /= m as f64);
                for k in 0..c {
                    self.running_mean[k] =
                        self.momentum * self.running_mean[k] + (1.0 - self.momentum) * mean[k];
                    self.running_var[k] =
                        self.momentum * self.running_var[k] + (1.0 - self.momentum) * var[k];
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = x.data.clone();
        for px in x_hat.chunks_exact_mut(c) {
            for k in 0..c {
                px[k] = (px[k] - mean[k]) * inv_std[k];
            }
        }
        let mut out = x.clone();
        for (o, xh) in out.data.chunks_exact_mut(c).zip(x_hat.chunks_exact(c)) {
            for k in 0..c {
                o[k] = self.gamma.value[k] * xh[k] + self.beta.value[k];
            }
        }
        self.cache = Some(BnCache { x_hat, inv_std, mode });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| CirkdError::State("BatchNorm::backward called without a cached forward".into()))?;
        let c = self.channels;
        if grad_out.data.len() != cache.x_hat.len() || grad_out.c != c {
            return Err(CirkdError::shape("BatchNorm::backward", "gradient size differs from forward input"));
        }
        let m = (grad_out.data.len() / c) as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (g, xh) in grad_out.data.chunks_exact(c).zip(cache.x_hat.chunks_exact(c)) {
            for k in 0..c {
                sum_g[k] += g[k];
                sum_gx[k] += g[k] * xh[k];
            }
        }
        for k in 0..c {
            self.beta.grad[k] += sum_g[k];
            self.gamma.grad[k] += sum_gx[k];
        }
        let mut grad_in = grad_out.clone();
        for (gi, xh) in grad_in.data.chunks_exact_mut(c).zip(cache.x_hat.chunks_exact(c)) {
            for k in 0..c {
                let scale = self.gamma.value[k] * cache.inv_std[k];
                gi[k] = match cache.mode {
                    Mode::Train => scale * (gi[k] - sum_g[k] / m - xh[k] * sum_gx[k] / m),
                    Mode::Eval => scale * gi[k],
                };
            }
        }
        Ok(grad_in)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Relu(Relu),
    BatchNorm(BatchNorm),
}

impl Layer {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::BatchNorm(l) => l.forward(x, mode),
        }
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.backward(g),
            Layer::Relu(l) => l.backward(g),
            Layer::BatchNorm(l) => l.backward(g),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Relu(_) => vec![],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::Relu(_) => vec![],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
        }
    }
}

/// A stack of layers run in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        x.check_finite("network input")?;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            cur = layer.forward(&cur, mode)?;
            cur.check_finite(&format!("layer {i} output"))?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let mut cur = g.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Batch-norm running means and variances, layer by layer.
    pub fn buffers(&self) -> Vec<&Vec<f64>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) => Some([&bn.running_mean, &bn.running_var]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::BatchNorm(bn) => Some([&mut bn.running_mean, &mut bn.running_var]),
                _ => None,
            })
            .flatten()
            .collect()
    }
}
