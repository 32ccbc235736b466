use super::{gemm, Act, Param};

/// 2-D convolution without bias, lowered to `im2col` + gemm.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out][in][k][k]`
    pub weight: Param,
    input: Option<Act>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        assert!(kernel > 0 && stride > 0);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::filled(vec![out_channels, in_channels, kernel, kernel], 0.0),
            input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = |d: usize| {
            let padded = d + 2 * self.padding;
            assert!(
                padded >= self.kernel,
                "input {d} smaller than kernel {}",
                self.kernel
            );
            (padded - self.kernel) / self.stride + 1
        };
        (span(h), span(w))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Valid output-column range `[lo, hi)` for kernel offset `kk` on an axis of length `len`.
    fn valid_range(&self, kk: usize, len: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
        let hi = if len + p > kk {
            ((len - 1 + p - kk) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &Act, oh: usize, ow: usize) -> Vec<f32> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let ncols = x.n * oh * ow;
        let mut cols = vec![0.0f32; self.patch_len() * ncols];
        for c in 0..x.c {
            for kh in 0..k {
                let (ylo, yhi) = self.valid_range(kh, x.h, oh);
                for kw in 0..k {
                    let (xlo, xhi) = self.valid_range(kw, x.w, ow);
                    let row = (c * k + kh) * k + kw;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for b in 0..x.n {
                        let src = x.map(c, b);
                        for oy in ylo..yhi {
                            let iy = oy * s + kh - p;
                            let line = &src[iy * x.w..(iy + 1) * x.w];
                            let d = &mut dst[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                            if s == 1 {
                                let ix0 = xlo + kw - p;
                                d[xlo..xhi].copy_from_slice(&line[ix0..ix0 + (xhi - xlo)]);
                            } else {
                                for ox in xlo..xhi {
                                    d[ox] = line[ox * s + kw - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], n: usize, h: usize, w: usize, oh: usize, ow: usize) -> Act {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let ncols = n * oh * ow;
        let mut dx = Act::zeros(self.in_channels, n, h, w);
        let hw = h * w;
        for c in 0..self.in_channels {
            for kh in 0..k {
                let (ylo, yhi) = self.valid_range(kh, h, oh);
                for kw in 0..k {
                    let (xlo, xhi) = self.valid_range(kw, w, ow);
                    let row = (c * k + kh) * k + kw;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for b in 0..n {
                        let base = (c * n + b) * hw;
                        for oy in ylo..yhi {
                            let iy = oy * s + kh - p;
                            let line = &mut dx.data[base + iy * w..base + (iy + 1) * w];
                            let d = &src[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                            for ox in xlo..xhi {
                                line[ox * s + kw - p] += d[ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Act) -> Act {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(x.h, x.w);
        let cols = self.im2col(x, oh, ow);
        let ncols = x.n * oh * ow;
        let mut y = Act::zeros(self.out_channels, x.n, oh, ow);
        gemm(
            self.out_channels,
            self.patch_len(),
            ncols,
            &self.weight.value,
            false,
            &cols,
            false,
            &mut y.data,
            0.0,
        );
        y
    }

    pub fn forward_train(&mut self, x: &Act) -> Act {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    /// Accumulates the weight gradient; returns the input gradient when asked.
    pub fn backward(&mut self, dy: &Act, input_grad: bool) -> Option<Act> {
        let x = self.input.take().expect("conv backward without forward_train");
        let (oh, ow) = (dy.h, dy.w);
        let cols = self.im2col(&x, oh, ow);
        let ncols = x.n * oh * ow;
        let kdim = self.patch_len();
        gemm(
            self.out_channels,
            ncols,
            kdim,
            &dy.data,
            false,
            &cols,
            true,
            &mut self.weight.grad,
            1.0,
        );
        if !input_grad {
            return None;
        }
        let mut dcols = cols;
        gemm(
            kdim,
            self.out_channels,
            ncols,
            &self.weight.value,
            true,
            &dy.data,
            false,
            &mut dcols,
            0.0,
        );
        Some(self.col2im(&dcols, x.n, x.h, x.w, oh, ow))
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

/// Batch normalization over `(N, H, W)` per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::filled(vec![channels], 0.0),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&self, x: &Act) -> Act {
        assert_eq!(x.c, self.channels);
        let mut y = x.clone();
        let len = x.plane_len();
        for c in 0..self.channels {
            let inv = 1.0 / (self.running_var[c] + self.eps).sqrt();
            let scale = self.gamma.value[c] * inv;
            let shift = self.beta.value[c] - self.running_mean[c] * scale;
            for v in &mut y.data[c * len..(c + 1) * len] {
                *v = *v * scale + shift;
            }
        }
        y
    }

    pub fn forward_train(&mut self, x: &Act) -> Act {
        assert_eq!(x.c, self.channels);
        let len = x.plane_len();
        let mut y = x.clone();
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut inv_std = vec![0.0f32; self.channels];
        for c in 0..self.channels {
            let plane = x.plane(c);
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
            let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / len as f64;
            let inv = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[c] = inv as f32;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let xh = &mut xhat[c * len..(c + 1) * len];
            for ((o, h), &v) in y.data[c * len..(c + 1) * len].iter_mut().zip(xh).zip(plane) {
                *h = ((v as f64 - mean) * inv) as f32;
                *o = g * *h + b;
            }
            let unbiased = if len > 1 {
                var * len as f64 / (len - 1) as f64
            } else {
                var
            };
            let m = self.momentum;
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean as f32;
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * unbiased as f32;
        }
        self.cache = Some(BnCache { xhat, inv_std });
        y
    }

    pub fn backward(&mut self, dy: &Act) -> Act {
        let cache = self
            .cache
            .take()
            .expect("batchnorm backward without forward_train");
        let len = dy.plane_len();
        let mut dx = dy.clone();
        for c in 0..self.channels {
            let d = dy.plane(c);
            let xh = &cache.xhat[c * len..(c + 1) * len];
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for (&g, &h) in d.iter().zip(xh) {
                sum_dy += g as f64;
                sum_dy_xhat += (g * h) as f64;
            }
            self.beta.grad[c] += sum_dy as f32;
            self.gamma.grad[c] += sum_dy_xhat as f32;
            let k = self.gamma.value[c] as f64 * cache.inv_std[c] as f64 / len as f64;
            for ((o, &g), &h) in dx.data[c * len..(c + 1) * len].iter_mut().zip(d).zip(xh) {
                *o = (k * (len as f64 * g as f64 - sum_dy - h as f64 * sum_dy_xhat)) as f32;
            }
        }
        dx
    }
}

pub fn relu_inplace(x: &mut Act) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dy` where the ReLU output was not positive.
pub fn relu_backward(dy: &mut Act, output: &Act) {
    assert!(dy.same_shape(output));
    for (g, &o) in dy.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Winning input index per output, plus the input shape.
type PoolArgmax = (Vec<u32>, (usize, usize, usize, usize));

/// Max pooling with square window.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    argmax: Option<PoolArgmax>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            argmax: None,
        }
    }

    fn pool(&self, x: &Act, record: bool) -> (Act, Vec<u32>) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let oh = (x.h + 2 * p - k) / s + 1;
        let ow = (x.w + 2 * p - k) / s + 1;
        let mut y = Act::zeros(x.c, x.n, oh, ow);
        let mut idx = if record {
            vec![0u32; y.data.len()]
        } else {
            Vec::new()
        };
        let hw = x.h * x.w;
        let mut o = 0;
        for cb in 0..x.c * x.n {
            let base = cb * hw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = base;
                    for kh in 0..k {
                        let iy = (oy * s + kh) as isize - p as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let ix = (ox * s + kw) as isize - p as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let i = base + iy as usize * x.w + ix as usize;
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    y.data[o] = best;
                    if record {
                        idx[o] = best_i as u32;
                    }
                    o += 1;
                }
            }
        }
        (y, idx)
    }

    pub fn forward(&self, x: &Act) -> Act {
        self.pool(x, false).0
    }

    pub fn forward_train(&mut self, x: &Act) -> Act {
        let (y, idx) = self.pool(x, true);
        self.argmax = Some((idx, (x.c, x.n, x.h, x.w)));
        y
    }

    pub fn backward(&mut self, dy: &Act) -> Act {
        let (idx, (c, n, h, w)) = self
            .argmax
            .take()
            .expect("maxpool backward without forward_train");
        let mut dx = Act::zeros(c, n, h, w);
        for (&i, &g) in idx.iter().zip(&dy.data) {
            dx.data[i as usize] += g;
        }
        dx
    }
}

/// Spatial mean per channel; output is `[N][C]` row-major.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    shape: Option<(usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn forward(x: &Act) -> Vec<f32> {
        let hw = (x.h * x.w) as f64;
        let mut out = vec![0.0f32; x.n * x.c];
        for c in 0..x.c {
            for b in 0..x.n {
                let s: f64 = x.map(c, b).iter().map(|&v| v as f64).sum();
                out[b * x.c + c] = (s / hw) as f32;
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: &Act) -> Vec<f32> {
        self.shape = Some((x.c, x.n, x.h, x.w));
        Self::forward(x)
    }

    pub fn backward(&mut self, dpooled: &[f32]) -> Act {
        let (c, n, h, w) = self.shape.take().expect("pool backward without forward_train");
        let hw = h * w;
        let mut dx = Act::zeros(c, n, h, w);
        for ci in 0..c {
            for b in 0..n {
                let g = dpooled[b * c + ci] / hw as f32;
                let start = (ci * n + b) * hw;
                dx.data[start..start + hw].fill(g);
            }
        }
        dx
    }
}

/// Fully connected layer on `[N][in]` row-major features.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out][in]`
    pub weight: Param,
    pub bias: Param,
    input: Option<(Vec<f32>, usize)>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::filled(vec![out_features, in_features], 0.0),
            bias: Param::filled(vec![out_features], 0.0),
            input: None,
        }
    }

    pub fn forward(&self, x: &[f32], n: usize) -> Vec<f32> {
        assert_eq!(x.len(), n * self.in_features);
        let mut y = vec![0.0f32; n * self.out_features];
        for row in y.chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            n,
            self.in_features,
            self.out_features,
            x,
            false,
            &self.weight.value,
            true,
            &mut y,
            1.0,
        );
        y
    }

    pub fn forward_train(&mut self, x: &[f32], n: usize) -> Vec<f32> {
        self.input = Some((x.to_vec(), n));
        self.forward(x, n)
    }

    pub fn backward(&mut self, dy: &[f32]) -> Vec<f32> {
        let (x, n) = self.input.take().expect("linear backward without forward_train");
        gemm(
            self.out_features,
            n,
            self.in_features,
            dy,
            true,
            &x,
            false,
            &mut self.weight.grad,
            1.0,
        );
        for row in dy.chunks(self.out_features) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![0.0f32; n * self.in_features];
        gemm(
            n,
            self.out_features,
            self.in_features,
            dy,
            false,
            &self.weight.value,
            false,
            &mut dx,
            0.0,
        );
        dx
    }
}

/// Numerically stable softmax over each row of `[N][K]` logits.
pub fn softmax_rows(logits: &[f32], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

/// Class-weighted mean cross-entropy, normalized by the summed target weights.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(
    logits: &[f32],
    k: usize,
    targets: &[usize],
    class_weights: &[f32],
) -> (f64, Vec<f32>) {
    let n = targets.len();
    assert_eq!(logits.len(), n * k);
    assert_eq!(class_weights.len(), k);
    let probs = softmax_rows(logits, k);
    let total_weight: f64 = targets.iter().map(|&t| class_weights[t] as f64).sum();
    let mut loss = 0.0;
    let mut grad = vec![0.0f32; n * k];
    for (i, &t) in targets.iter().enumerate() {
        let w = class_weights[t] as f64 / total_weight;
        let row = &probs[i * k..(i + 1) * k];
        loss -= w * row[t].max(1e-300).ln();
        for j in 0..k {
            let indicator = if j == t { 1.0 } else { 0.0 };
            grad[i * k + j] = (w * (row[j] - indicator)) as f32;
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_act(rng: &mut ChaCha8Rng, c: usize, n: usize, h: usize, w: usize) -> Act {
        let data = (0..c * n * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Act::from_data(c, n, h, w, data)
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    /// Direct (non-im2col) convolution used as an oracle.
    fn conv_direct(conv: &Conv2d, x: &Act) -> Act {
        let (oh, ow) = conv.output_size(x.h, x.w);
        let mut y = Act::zeros(conv.out_channels, x.n, oh, ow);
        let k = conv.kernel;
        for o in 0..conv.out_channels {
            for b in 0..x.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0f64;
                        for c in 0..conv.in_channels {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let iy = (oy * conv.stride + kh) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kw) as isize - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let wv =
                                        conv.weight.value[((o * conv.in_channels + c) * k + kh) * k + kw];
                                    s += wv as f64 * x.map(c, b)[iy as usize * x.w + ix as usize] as f64;
                                }
                            }
                        }
                        y.data[((o * x.n + b) * oh + oy) * ow + ox] = s as f32;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p, h, w) in &[(3, 1, 1, 6, 5), (3, 2, 1, 7, 6), (7, 2, 3, 9, 9), (1, 2, 0, 5, 4)] {
            let mut conv = Conv2d::new(3, 4, k, s, p);
            for v in &mut conv.weight.value {
                *v = rng.random_range(-0.5..0.5);
            }
            let x = random_act(&mut rng, 3, 2, h, w);
            let got = conv.forward(&x);
            let want = conv_direct(&conv, &x);
            assert!(got.same_shape(&want));
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-4, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    /// Loss L = <r, f(x)>; checks analytic input and parameter gradients
    /// against central differences.
    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1);
        for v in &mut conv.weight.value {
            *v = rng.random_range(-0.5..0.5);
        }
        let x = random_act(&mut rng, 2, 2, 5, 6);
        let y = conv.forward_train(&x);
        let r: Vec<f32> = (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dy = Act::from_data(y.c, y.n, y.h, y.w, r.clone());
        let dx = conv.backward(&dy, true).unwrap();
        let eps = 1e-2f32;
        for i in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd =
                (dot(&conv.forward(&xp).data, &r) - dot(&conv.forward(&xm).data, &r)) / (2.0 * eps as f64);
            assert!(
                (fd - dx.data[i] as f64).abs() < 1e-3,
                "dx[{i}] {fd} vs {}",
                dx.data[i]
            );
        }
        for i in (0..conv.weight.value.len()).step_by(5) {
            let orig = conv.weight.value[i];
            conv.weight.value[i] = orig + eps;
            let lp = dot(&conv.forward(&x).data, &r);
            conv.weight.value[i] = orig - eps;
            let lm = dot(&conv.forward(&x).data, &r);
            conv.weight.value[i] = orig;
            let fd = (lp - lm) / (2.0 * eps as f64);
            assert!((fd - conv.weight.grad[i] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::new(3);
        for (g, b) in bn.gamma.value.iter_mut().zip(bn.beta.value.iter_mut()) {
            *g = rng.random_range(0.5..1.5);
            *b = rng.random_range(-0.5..0.5);
        }
        let x = random_act(&mut rng, 3, 2, 3, 3);
        let r: Vec<f32> = (0..x.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |bn: &BatchNorm2d, x: &Act| {
            let mut probe = bn.clone();
            dot(&probe.forward_train(x).data, &r)
        };
        let mut trained = bn.clone();
        trained.forward_train(&x);
        let dx = trained.backward(&Act::from_data(3, 2, 3, 3, r.clone()));
        let eps = 1e-2f32;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * eps as f64);
            assert!(
                (fd - dx.data[i] as f64).abs() < 2e-3,
                "dx[{i}] {fd} vs {}",
                dx.data[i]
            );
        }
        for c in 0..3 {
            let mut p = bn.clone();
            p.gamma.value[c] += eps;
            let mut m = bn.clone();
            m.gamma.value[c] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps as f64);
            assert!((fd - trained.gamma.grad[c] as f64).abs() < 2e-3);
            let beta_sum: f64 = x
                .plane(c)
                .iter()
                .enumerate()
                .map(|(j, _)| r[c * 18 + j] as f64)
                .sum();
            assert!((beta_sum - trained.beta.grad[c] as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_tracks_running_statistics() {
        let mut bn = BatchNorm2d::new(1);
        let x = Act::from_data(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = bn.forward_train(&x);
        let mean: f32 = y.data.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-6);
        // unbiased variance of 1..4 is 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut pool = MaxPool2d::new(3, 2, 1);
        let x = Act::from_data(1, 1, 4, 4, (0..16).map(|v| v as f32).collect());
        let y = pool.forward_train(&x);
        assert_eq!((y.h, y.w), (2, 2));
        assert_eq!(y.data, vec![5.0, 7.0, 13.0, 15.0]);
        let dx = pool.backward(&Act::from_data(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(dx.data[5], 1.0);
        assert_eq!(dx.data[15], 4.0);
        assert_eq!(dx.data.iter().sum::<f32>(), 10.0);
    }

    #[test]
    fn linear_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut fc = Linear::new(4, 2);
        for v in fc.weight.value.iter_mut().chain(fc.bias.value.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
        }
        let x: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets = [0usize, 1, 1];
        let weights = [1.0f32, 3.0];
        let loss_at =
            |fc: &Linear, x: &[f32]| softmax_cross_entropy(&fc.forward(x, 3), 2, &targets, &weights).0;
        let logits = fc.forward_train(&x, 3);
        let (_, dlogits) = softmax_cross_entropy(&logits, 2, &targets, &weights);
        let dx = fc.backward(&dlogits);
        let eps = 1e-3f32;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (loss_at(&fc, &xp) - loss_at(&fc, &xm)) / (2.0 * eps as f64);
            assert!((fd - dx[i] as f64).abs() < 1e-3);
        }
        for i in 0..fc.weight.value.len() {
            let mut p = fc.clone();
            p.weight.value[i] += eps;
            let mut m = fc.clone();
            m.weight.value[i] -= eps;
            let fd = (loss_at(&p, &x) - loss_at(&m, &x)) / (2.0 * eps as f64);
            assert!((fd - fc.weight.grad[i] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn weighted_cross_entropy_value() {
        // two items, equal logits: each loss is ln 2 regardless of weights
        let (loss, _) = softmax_cross_entropy(&[0.0, 0.0, 0.0, 0.0], 2, &[0, 1], &[1.0, 4.0]);
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn global_pool_backward_spreads_evenly() {
        let mut pool = GlobalAvgPool::default();
        let x = Act::from_data(2, 1, 1, 2, vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(pool.forward_train(&x), vec![2.0, 6.0]);
        let dx = pool.backward(&[1.0, 2.0]);
        assert_eq!(dx.data, vec![0.5, 0.5, 1.0, 1.0]);
    }
}
