//! Minimal channel-last 3x3 convolution with hand-written backward pass,
//! shared by the toy region reasoner and the tiny denoiser.

use rand::Rng;
use rand_distr::StandardNormal;

/// `height x width x channels` activation grid, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Stacks per-pixel channel blocks: each part contributes its channels in order.
    pub fn concat_channels(parts: &[&Tensor3]) -> Self {
        let (h, w) = (parts[0].height, parts[0].width);
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for p in 0..h * w {
            for part in parts {
                debug_assert_eq!((part.height, part.width), (h, w));
                data.extend_from_slice(&part.data[p * part.channels..(p + 1) * part.channels]);
            }
        }
        Self {
            height: h,
            width: w,
            channels,
            data,
        }
    }

    /// A grid whose every pixel holds `values`.
    pub fn broadcast(height: usize, width: usize, values: &[f64]) -> Self {
        let mut data = Vec::with_capacity(height * width * values.len());
        for _ in 0..height * width {
            data.extend_from_slice(values);
        }
        Self {
            height,
            width,
            channels: values.len(),
            data,
        }
    }
}

pub const KERNEL: usize = 3;

/// 3x3 convolution with zero "same" padding and optional dilation.
/// Weights are laid out `[ky][kx][in][out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, dilation: usize) -> Self {
        assert!(dilation >= 1);
        Self {
            in_channels,
            out_channels,
            dilation,
            weight: vec![0.0; KERNEL * KERNEL * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-normal initialisation scaled by `gain`; biases start at zero.
    pub fn random(
        in_channels: usize,
        out_channels: usize,
        dilation: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, dilation);
        let std = gain * (2.0 / (KERNEL * KERNEL * in_channels) as f64).sqrt();
        for w in &mut conv.weight {
            let z: f64 = rng.sample(StandardNormal);
            *w = z * std;
        }
        conv
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn shape(&self) -> [usize; 4] {
        [KERNEL, KERNEL, self.in_channels, self.out_channels]
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }

    /// Reads this layer's parameters from the front of `src`; returns how many were used.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let nw = self.weight.len();
        let nb = self.bias.len();
        self.weight.copy_from_slice(&src[..nw]);
        self.bias.copy_from_slice(&src[nw..nw + nb]);
        nw + nb
    }

    #[inline]
    fn offset(&self, k: usize) -> isize {
        (k as isize - 1) * self.dilation as isize
    }

    pub fn forward(&self, input: &Tensor3) -> Tensor3 {
        assert_eq!(input.channels, self.in_channels, "conv input channels");
        let (h, w) = (input.height, input.width);
        let (ci, co) = (self.in_channels, self.out_channels);
        let mut out = Tensor3::zeros(h, w, co);
        for y in 0..h {
            for x in 0..w {
                let o = &mut out.data[(y * w + x) * co..(y * w + x + 1) * co];
                o.copy_from_slice(&self.bias);
                for ky in 0..KERNEL {
                    let sy = y as isize + self.offset(ky);
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let sx = x as isize + self.offset(kx);
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = &input.data[(sy as usize * w + sx as usize) * ci..][..ci];
                        let wk = &self.weight[(ky * KERNEL + kx) * ci * co..][..ci * co];
                        for (i, &v) in src.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            for (acc, &wt) in o.iter_mut().zip(&wk[i * co..(i + 1) * co]) {
                                *acc += v * wt;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradients of the parameters and (optionally) the input, given the
    /// upstream gradient of the output.
    pub fn backward(
        &self,
        input: &Tensor3,
        grad_out: &Tensor3,
        want_input: bool,
    ) -> (ConvGrad, Option<Tensor3>) {
        let (h, w) = (input.height, input.width);
        let (ci, co) = (self.in_channels, self.out_channels);
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; co];
        let mut gi = want_input.then(|| Tensor3::zeros(h, w, ci));
        for y in 0..h {
            for x in 0..w {
                let go = &grad_out.data[(y * w + x) * co..][..co];
                for (b, g) in gb.iter_mut().zip(go) {
                    *b += g;
                }
                for ky in 0..KERNEL {
                    let sy = y as isize + self.offset(ky);
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let sx = x as isize + self.offset(kx);
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (sy as usize * w + sx as usize) * ci;
                        let kbase = (ky * KERNEL + kx) * ci * co;
                        for i in 0..ci {
                            let v = input.data[base + i];
                            let wrow = kbase + i * co;
                            let mut acc = 0.0;
                            for o in 0..co {
                                gw[wrow + o] += v * go[o];
                                acc += self.weight[wrow + o] * go[o];
                            }
                            if let Some(gi) = gi.as_mut() {
                                gi.data[base + i] += acc;
                            }
                        }
                    }
                }
            }
        }
        (
            ConvGrad {
                weight: gw,
                bias: gb,
            },
            gi,
        )
    }
}

/// Convolution whose trailing input channels hold the same `constant`
/// vector at every pixel. Equivalent to stacking `constant` onto `input` and
/// calling [`Conv2d::forward`], but the constant part is folded into a
/// per-tap bias.
impl Conv2d {
    fn tap_valid(
        &self,
        y: usize,
        x: usize,
        ky: usize,
        kx: usize,
        h: usize,
        w: usize,
    ) -> Option<usize> {
        let sy = y as isize + self.offset(ky);
        let sx = x as isize + self.offset(kx);
        (sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize)
            .then(|| sy as usize * w + sx as usize)
    }

    pub fn forward_with_constant(&self, input: &Tensor3, constant: &[f64]) -> Tensor3 {
        let (h, w) = (input.height, input.width);
        let (ci, co, cv) = (self.in_channels, self.out_channels, input.channels);
        assert_eq!(cv + constant.len(), ci, "conv input channels");
        let mut tap_bias = vec![0.0; KERNEL * KERNEL * co];
        for k in 0..KERNEL * KERNEL {
            for (j, &c) in constant.iter().enumerate() {
                let wrow = &self.weight[(k * ci + cv + j) * co..][..co];
                for (t, &wt) in tap_bias[k * co..(k + 1) * co].iter_mut().zip(wrow) {
                    *t += c * wt;
                }
            }
        }
        let mut out = Tensor3::zeros(h, w, co);
        for y in 0..h {
            for x in 0..w {
                let o = &mut out.data[(y * w + x) * co..(y * w + x + 1) * co];
                o.copy_from_slice(&self.bias);
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let Some(src) = self.tap_valid(y, x, ky, kx, h, w) else {
                            continue;
                        };
                        let k = ky * KERNEL + kx;
                        for (acc, &t) in o.iter_mut().zip(&tap_bias[k * co..(k + 1) * co]) {
                            *acc += t;
                        }
                        let src = &input.data[src * cv..][..cv];
                        for (i, &v) in src.iter().enumerate() {
                            let wrow = &self.weight[(k * ci + i) * co..][..co];
                            for (acc, &wt) in o.iter_mut().zip(wrow) {
                                *acc += v * wt;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Parameter gradients and the gradient of the constant vector for
    /// [`Conv2d::forward_with_constant`].
    pub fn backward_with_constant(
        &self,
        input: &Tensor3,
        constant: &[f64],
        grad_out: &Tensor3,
    ) -> (ConvGrad, Vec<f64>) {
        let (h, w) = (input.height, input.width);
        let (ci, co, cv) = (self.in_channels, self.out_channels, input.channels);
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; co];
        // Upstream gradient summed over the pixels where each tap is in bounds.
        let mut tap_sum = vec![0.0; KERNEL * KERNEL * co];
        for y in 0..h {
            for x in 0..w {
                let go = &grad_out.data[(y * w + x) * co..][..co];
                for (b, g) in gb.iter_mut().zip(go) {
                    *b += g;
                }
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let Some(src) = self.tap_valid(y, x, ky, kx, h, w) else {
                            continue;
                        };
                        let k = ky * KERNEL + kx;
                        for (t, g) in tap_sum[k * co..(k + 1) * co].iter_mut().zip(go) {
                            *t += g;
                        }
                        let src = &input.data[src * cv..][..cv];
                        for (i, &v) in src.iter().enumerate() {
                            for (gwv, g) in gw[(k * ci + i) * co..][..co].iter_mut().zip(go) {
                                *gwv += v * g;
                            }
                        }
                    }
                }
            }
        }
        let mut gc = vec![0.0; constant.len()];
        for k in 0..KERNEL * KERNEL {
            let ts = &tap_sum[k * co..(k + 1) * co];
            for (j, &c) in constant.iter().enumerate() {
                let row = (k * ci + cv + j) * co;
                for o in 0..co {
                    gw[row + o] += c * ts[o];
                    gc[j] += self.weight[row + o] * ts[o];
                }
            }
        }
        (
            ConvGrad {
                weight: gw,
                bias: gb,
            },
            gc,
        )
    }
}

pub fn relu_inplace(t: &mut Tensor3) {
    for v in &mut t.data {
        *v = v.max(0.0);
    }
}

/// Zeroes the upstream gradient wherever the pre-activation was not positive.
pub fn relu_backward(pre: &Tensor3, grad: &mut Tensor3) {
    for (g, &p) in grad.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct gather-style evaluation, indexed independently of the layer code.
    fn naive_conv(c: &Conv2d, x: &Tensor3) -> Tensor3 {
        let mut out = Tensor3::zeros(x.height, x.width, c.out_channels);
        let d = c.dilation as isize;
        for y in 0..x.height as isize {
            for xx in 0..x.width as isize {
                for o in 0..c.out_channels {
                    let mut s = c.bias[o];
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (sy, sx) = (y + dy * d, xx + dx * d);
                            if sy < 0 || sx < 0 || sy >= x.height as isize || sx >= x.width as isize
                            {
                                continue;
                            }
                            for i in 0..c.in_channels {
                                let widx = (((dy + 1) as usize * 3 + (dx + 1) as usize)
                                    * c.in_channels
                                    + i)
                                    * c.out_channels
                                    + o;
                                s += c.weight[widx]
                                    * x.data
                                        [(sy as usize * x.width + sx as usize) * x.channels + i];
                            }
                        }
                    }
                    out.data[(y as usize * x.width + xx as usize) * c.out_channels + o] = s;
                }
            }
        }
        out
    }

    fn random_input(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor3 {
        let mut t = Tensor3::zeros(h, w, c);
        for v in &mut t.data {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        t
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dil in [1, 2, 3] {
            let mut conv = Conv2d::random(3, 4, dil, 1.0, &mut rng);
            conv.bias = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_input(&mut rng, 7, 6, 3);
            let a = conv.forward(&x);
            let b = naive_conv(&conv, &x);
            for (p, q) in a.data.iter().zip(&b.data) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::random(2, 3, 2, 1.0, &mut rng);
        let x = random_input(&mut rng, 5, 5, 2);
        let g = random_input(&mut rng, 5, 5, 3);
        // loss = <g, conv(x)>
        let loss = |c: &Conv2d, x: &Tensor3| -> f64 {
            c.forward(x)
                .data
                .iter()
                .zip(&g.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (grad, gi) = conv.backward(&x, &g, true);
        let gi = gi.unwrap();
        let h = 1e-6;
        for idx in [0, 5, 17, 30, grad.weight.len() - 1] {
            let mut p = conv.clone();
            p.weight[idx] += h;
            let mut m = conv.clone();
            m.weight[idx] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grad.weight[idx]).abs() < 1e-6, "w[{idx}]");
        }
        for idx in [0, 7, 33, 49] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - gi.data[idx]).abs() < 1e-6, "x[{idx}]");
        }
        let bias_sum: f64 = g.data.chunks(3).map(|c| c[1]).sum();
        assert!((grad.bias[1] - bias_sum).abs() < 1e-12);
    }

    #[test]
    fn constant_channels_match_stacked_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::random(5, 4, 2, 1.0, &mut rng);
        let x = random_input(&mut rng, 6, 5, 2);
        let c = [0.3, -1.2, 0.7];
        let stacked = Tensor3::concat_channels(&[&x, &Tensor3::broadcast(6, 5, &c)]);
        let a = conv.forward_with_constant(&x, &c);
        let b = naive_conv(&conv, &stacked);
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-12);
        }
        let g = random_input(&mut rng, 6, 5, 4);
        let (full, gi) = conv.backward(&stacked, &g, true);
        let (part, gc) = conv.backward_with_constant(&x, &c, &g);
        for (p, q) in full.weight.iter().zip(&part.weight) {
            assert!((p - q).abs() < 1e-12);
        }
        assert_eq!(full.bias, part.bias);
        let gi = gi.unwrap();
        for (j, v) in gc.iter().enumerate() {
            let summed: f64 = gi.data.chunks(5).map(|px| px[2 + j]).sum();
            assert!((summed - v).abs() < 1e-12);
        }
    }

    #[test]
    fn stable_activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
    }
}
