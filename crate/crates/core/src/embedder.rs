//! Visual embedder: `c` blocks of (3x3 same-padded convolution, batch
//! normalization, ReLU) applied to every slice, then a flatten and a linear
//! projection to the model width. With `c = 0` the slice pixels are
//! projected directly.
//!
//! Batch statistics are taken over the slices of one sentence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::rng::Rng;
use crate::tensor::{join, DenseArray, Params};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    /// Number of conv blocks (`c`).
    #[serde(default = "one")]
    pub conv_blocks: usize,
    #[serde(default = "three")]
    pub kernel: usize,
    /// Channels produced by each block.
    #[serde(default = "one")]
    pub channels: usize,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            conv_blocks: 1,
            kernel: 3,
            channels: 1,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.channels == 0 {
            return Err(Error::invalid("channel count must be >= 1"));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        if self.conv_blocks == 0 {
            1
        } else {
            self.channels
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    /// `[out_ch, in_ch, k, k]`
    pub weight: DenseArray,
    pub bias: DenseArray,
    pub gamma: DenseArray,
    pub beta: DenseArray,
    pub running_mean: DenseArray,
    pub running_var: DenseArray,
}

/// Per-channel batch mean and unbiased variance from one training forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    input: Vec<f64>,
    n: usize,
    xhat: Vec<f64>,
    /// Per-channel `1 / sqrt(var + eps)` actually used for normalization.
    rstd: Vec<f64>,
    /// Post-affine, pre-ReLU values.
    pre: Vec<f64>,
    mode: Mode,
}

impl ConvBlock {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        Self {
            weight: DenseArray::uniform(&[out_ch, in_ch, k, k], bound, rng),
            bias: DenseArray::zeros(&[out_ch]),
            gamma: DenseArray::filled(&[out_ch], 1.0),
            beta: DenseArray::zeros(&[out_ch]),
            running_mean: DenseArray::zeros(&[out_ch]),
            running_var: DenseArray::filled(&[out_ch], 1.0),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    fn kernel(&self) -> usize {
        self.weight.shape[2]
    }

    /// Same-padded, stride-1 convolution of `n` images `[in_ch, h, w]`.
    fn convolve(&self, x: &[f64], n: usize, h: usize, w: usize) -> Vec<f64> {
        let (ci_n, co_n, k) = (self.in_channels(), self.out_channels(), self.kernel());
        let pad = k / 2;
        let plane = h * w;
        let mut out = vec![0.0; n * co_n * plane];
        for s in 0..n {
            for co in 0..co_n {
                let o = &mut out[(s * co_n + co) * plane..(s * co_n + co + 1) * plane];
                o.fill(self.bias.data[co]);
                for ci in 0..ci_n {
                    let inp = &x[(s * ci_n + ci) * plane..(s * ci_n + ci + 1) * plane];
                    for a in 0..k {
                        for b in 0..k {
                            let wv = self.weight.data[((co * ci_n + ci) * k + a) * k + b];
                            // output (y, x) reads input (y + a - pad, x + b - pad)
                            let y0 = pad.saturating_sub(a);
                            let y1 = (h + pad).saturating_sub(a).min(h);
                            let x0 = pad.saturating_sub(b);
                            let x1 = (w + pad).saturating_sub(b).min(w);
                            if x0 >= x1 {
                                continue;
                            }
                            for y in y0..y1 {
                                let iy = y + a - pad;
                                let orow = &mut o[y * w + x0..y * w + x1];
                                let irow = &inp[iy * w + x0 + b - pad..iy * w + x1 + b - pad];
                                for (ov, iv) in orow.iter_mut().zip(irow) {
                                    *ov += wv * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(
        &self,
        x: &[f64],
        n: usize,
        h: usize,
        w: usize,
        mode: Mode,
    ) -> Result<(Vec<f64>, ConvCache, Option<BatchStats>)> {
        let (ci_n, co_n) = (self.in_channels(), self.out_channels());
        if x.len() != n * ci_n * h * w || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "conv block expects {n}x{ci_n}x{h}x{w} input, got {} values",
                x.len()
            )));
        }
        let plane = h * w;
        let z = self.convolve(x, n, h, w);
        let count = (n * plane) as f64;
        let mut xhat = vec![0.0; z.len()];
        let mut pre = vec![0.0; z.len()];
        let mut rstd = vec![0.0; co_n];
        let mut stats = BatchStats {
            mean: vec![0.0; co_n],
            var: vec![0.0; co_n],
        };
        for co in 0..co_n {
            let planes = || (0..n).map(move |s| (s * co_n + co) * plane);
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for start in planes() {
                        sum += z[start..start + plane].iter().sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut sq = 0.0;
                    for start in planes() {
                        sq += z[start..start + plane]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    let var = sq / count;
                    stats.mean[co] = mean;
                    stats.var[co] = if count > 1.0 { sq / (count - 1.0) } else { var };
                    (mean, var)
                }
                Mode::Eval => (self.running_mean.data[co], self.running_var.data[co]),
            };
            let rs = 1.0 / (var + BN_EPS).sqrt();
            rstd[co] = rs;
            let (g, b) = (self.gamma.data[co], self.beta.data[co]);
            for start in planes() {
                for i in start..start + plane {
                    let xh = (z[i] - mean) * rs;
                    xhat[i] = xh;
                    pre[i] = g * xh + b;
                }
            }
        }
        let y = pre.iter().map(|v| v.max(0.0)).collect();
        let cache = ConvCache {
            input: x.to_vec(),
            n,
            xhat,
            rstd,
            pre,
            mode,
        };
        Ok((y, cache, (mode == Mode::Train).then_some(stats)))
    }

    pub fn backward(&self, c: &ConvCache, dy: &[f64], h: usize, w: usize, grad: &mut ConvBlock) -> Vec<f64> {
        let (ci_n, co_n, k) = (self.in_channels(), self.out_channels(), self.kernel());
        let (n, plane, pad) = (c.n, h * w, k / 2);
        let count = (n * plane) as f64;

        let mut dz = vec![0.0; dy.len()];
        for co in 0..co_n {
            let starts: Vec<usize> = (0..n).map(|s| (s * co_n + co) * plane).collect();
            let g = self.gamma.data[co];
            let (mut sum, mut sum_x) = (0.0, 0.0);
            for &start in &starts {
                for i in start..start + plane {
                    let dpre = if c.pre[i] > 0.0 { dy[i] } else { 0.0 };
                    grad.gamma.data[co] += dpre * c.xhat[i];
                    grad.beta.data[co] += dpre;
                    let dxh = dpre * g;
                    dz[i] = dxh;
                    sum += dxh;
                    sum_x += dxh * c.xhat[i];
                }
            }
            let rs = c.rstd[co];
            for &start in &starts {
                for i in start..start + plane {
                    dz[i] = match c.mode {
                        Mode::Train => rs / count * (count * dz[i] - sum - c.xhat[i] * sum_x),
                        Mode::Eval => rs * dz[i],
                    };
                }
            }
        }

        let mut dx = vec![0.0; c.input.len()];
        for s in 0..n {
            for co in 0..co_n {
                let d = &dz[(s * co_n + co) * plane..(s * co_n + co + 1) * plane];
                grad.bias.data[co] += d.iter().sum::<f64>();
                for ci in 0..ci_n {
                    let inp = &c.input[(s * ci_n + ci) * plane..(s * ci_n + ci + 1) * plane];
                    let dxi = &mut dx[(s * ci_n + ci) * plane..(s * ci_n + ci + 1) * plane];
                    for a in 0..k {
                        for b in 0..k {
                            let widx = ((co * ci_n + ci) * k + a) * k + b;
                            let wv = self.weight.data[widx];
                            let y0 = pad.saturating_sub(a);
                            let y1 = (h + pad).saturating_sub(a).min(h);
                            let x0 = pad.saturating_sub(b);
                            let x1 = (w + pad).saturating_sub(b).min(w);
                            if x0 >= x1 {
                                continue;
                            }
                            let mut gw = 0.0;
                            for y in y0..y1 {
                                let iy = y + a - pad;
                                let drow = &d[y * w + x0..y * w + x1];
                                let lo = iy * w + x0 + b - pad;
                                let hi = iy * w + x1 + b - pad;
                                for ((dv, iv), gx) in drow.iter().zip(&inp[lo..hi]).zip(&mut dxi[lo..hi]) {
                                    gw += dv * iv;
                                    *gx += dv * wv;
                                }
                            }
                            grad.weight.data[widx] += gw;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        for co in 0..self.out_channels() {
            let rm = &mut self.running_mean.data[co];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * stats.mean[co];
            let rv = &mut self.running_var.data[co];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * stats.var[co];
        }
    }
}

impl Params for ConvBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray, bool)) {
        f(&join(prefix, "conv.weight"), &self.weight, true);
        f(&join(prefix, "conv.bias"), &self.bias, true);
        f(&join(prefix, "bn.gamma"), &self.gamma, true);
        f(&join(prefix, "bn.beta"), &self.beta, true);
        f(&join(prefix, "bn.running_mean"), &self.running_mean, false);
        f(&join(prefix, "bn.running_var"), &self.running_var, false);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray, bool)) {
        f(&join(prefix, "conv.weight"), &mut self.weight, true);
        f(&join(prefix, "conv.bias"), &mut self.bias, true);
        f(&join(prefix, "bn.gamma"), &mut self.gamma, true);
        f(&join(prefix, "bn.beta"), &mut self.beta, true);
        f(&join(prefix, "bn.running_mean"), &mut self.running_mean, false);
        f(&join(prefix, "bn.running_var"), &mut self.running_var, false);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    pub height: usize,
    pub window: usize,
    pub blocks: Vec<ConvBlock>,
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct EmbedderCache {
    blocks: Vec<ConvCache>,
    flat: Vec<f64>,
    n: usize,
}

impl Embedder {
    pub fn new(cfg: &EmbedderConfig, height: usize, window: usize, d_model: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.conv_blocks);
        let mut in_ch = 1;
        for _ in 0..cfg.conv_blocks {
            blocks.push(ConvBlock::new(in_ch, cfg.channels, cfg.kernel, rng));
            in_ch = cfg.channels;
        }
        let proj = Linear::new(cfg.out_channels() * height * window, d_model, rng);
        Ok(Self {
            height,
            window,
            blocks,
            proj,
        })
    }

    pub fn d_model(&self) -> usize {
        self.proj.outputs()
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.window
    }

    /// Embeds `n` slices given as `n x (h * w)` pixels; returns `n x d_model`.
    pub fn forward(&self, slices: &[f64], n: usize, mode: Mode) -> Result<(Vec<f64>, EmbedderCache, Vec<BatchStats>)> {
        if slices.len() != n * self.slice_len() {
            return Err(Error::shape(format!(
                "expected {n} slices of {}x{}, got {} values",
                self.height,
                self.window,
                slices.len()
            )));
        }
        let mut x = slices.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut stats = Vec::new();
        for block in &self.blocks {
            let (y, cache, st) = block.forward(&x, n, self.height, self.window, mode)?;
            caches.push(cache);
            stats.extend(st);
            x = y;
        }
        let out = self.proj.forward(&x, n);
        Ok((
            out,
            EmbedderCache {
                blocks: caches,
                flat: x,
                n,
            },
            stats,
        ))
    }

    /// Returns the gradient with respect to the slice pixels.
    pub fn backward(&self, cache: &EmbedderCache, dout: &[f64], grad: &mut Embedder) -> Vec<f64> {
        let mut dx = self.proj.backward(&cache.flat, dout, cache.n, &mut grad.proj);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            dx = block.backward(&cache.blocks[i], &dx, self.height, self.window, &mut grad.blocks[i]);
        }
        dx
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (block, st) in self.blocks.iter_mut().zip(stats) {
            block.update_running(st);
        }
    }
}

impl Params for Embedder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray, bool)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray, bool)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Converts a slice sequence into the `n x (h * w)` input layout.
pub fn slices_to_input(seq: &crate::slicer::SliceSequence) -> Vec<f64> {
    seq.data().iter().map(|&v| v as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, TOL};
    use crate::rng;
    use proptest::prelude::*;

    fn weighted(y: &[f64], r: &[f64]) -> f64 {
        y.iter().zip(r).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut g = rng::seeded(0);
        let block = ConvBlock::new(1, 1, 3, &mut g);
        for mode in [Mode::Train, Mode::Eval] {
            let (y, _, _) = block.forward(&vec![0.0; 2 * 4 * 5], 2, 4, 5, mode).unwrap();
            assert!(y.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_kernel_reduces_to_relu() {
        let mut block = ConvBlock::new(1, 1, 1, &mut rng::seeded(0));
        block.weight.data[0] = 1.0;
        for v in [-0.5, 0.0, 0.75] {
            let (y, _, _) = block.forward(&[v], 1, 1, 1, Mode::Eval).unwrap();
            let expected = v / (1.0 + BN_EPS).sqrt();
            assert!((y[0] - expected.max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let block = ConvBlock::new(1, 1, 3, &mut rng::seeded(0));
        assert!(block.forward(&[0.0; 5], 1, 2, 2, Mode::Eval).is_err());
        let emb = Embedder::new(&EmbedderConfig::default(), 4, 3, 8, &mut rng::seeded(0)).unwrap();
        assert!(emb.forward(&[0.0; 11], 1, Mode::Eval).is_err());
        let bad = EmbedderConfig {
            kernel: 2,
            ..Default::default()
        };
        assert!(Embedder::new(&bad, 4, 3, 8, &mut rng::seeded(0)).is_err());
    }

    /// Direct definition of same-padded convolution, written independently.
    fn conv_reference(block: &ConvBlock, x: &[f64], n: usize, h: usize, w: usize) -> Vec<f64> {
        let (ci_n, co_n, k) = (block.in_channels(), block.out_channels(), block.kernel());
        let p = (k / 2) as isize;
        let mut out = vec![0.0; n * co_n * h * w];
        for s in 0..n {
            for co in 0..co_n {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = block.bias.data[co];
                        for ci in 0..ci_n {
                            for a in 0..k as isize {
                                for b in 0..k as isize {
                                    let (iy, ix) = (y + a - p, xx + b - p);
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wv = block.weight.data[((co * ci_n + ci) * k + a as usize) * k + b as usize];
                                    acc += wv * x[((s * ci_n + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out[((s * co_n + co) * h + y as usize) * w + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn convolution_matches_definition() {
        let mut g = rng::seeded(11);
        let block = ConvBlock::new(2, 3, 3, &mut g);
        let x = DenseArray::uniform(&[2, 2, 5, 4], 1.0, &mut g).data;
        let fast = block.convolve(&x, 2, 5, 4);
        let slow = conv_reference(&block, &x, 2, 5, 4);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, cfg) in [
            (1, EmbedderConfig::default()),
            (
                2,
                EmbedderConfig {
                    conv_blocks: 0,
                    ..Default::default()
                },
            ),
            (
                3,
                EmbedderConfig {
                    conv_blocks: 2,
                    channels: 2,
                    ..Default::default()
                },
            ),
        ] {
            let mut g = rng::seeded(seed);
            let mut emb = Embedder::new(&cfg, 4, 3, 5, &mut g).unwrap();
            for b in &mut emb.blocks {
                b.gamma = DenseArray::uniform(&b.gamma.shape.clone(), 1.5, &mut g);
                b.beta = DenseArray::uniform(&b.beta.shape.clone(), 0.5, &mut g);
                b.running_mean = DenseArray::uniform(&b.beta.shape.clone(), 0.3, &mut g);
            }
            let n = 3;
            let x = DenseArray::uniform(&[n, 12], 1.0, &mut g).data;
            let r = DenseArray::uniform(&[n, 5], 1.0, &mut g).data;
            for mode in [Mode::Train, Mode::Eval] {
                let (_, cache, _) = emb.forward(&x, n, mode).unwrap();
                let mut grad = emb.clone();
                grad.zero();
                let dx = emb.backward(&cache, &r, &mut grad);
                let mut f = |p: &Embedder| weighted(&p.forward(&x, n, mode).unwrap().0, &r);
                let (err, at) = check(&emb, &grad, &mut f);
                assert!(err < TOL, "{cfg:?} {mode:?} {at}: {err}");
                for e in 0..x.len() {
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[e] += 1e-5;
                    xm[e] -= 1e-5;
                    let num = (weighted(&emb.forward(&xp, n, mode).unwrap().0, &r)
                        - weighted(&emb.forward(&xm, n, mode).unwrap().0, &r))
                        / 2e-5;
                    assert!((num - dx[e]).abs() / num.abs().max(1.0) < TOL);
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut g = rng::seeded(4);
        let emb = Embedder::new(&EmbedderConfig::default(), 4, 3, 5, &mut g).unwrap();
        let x = DenseArray::uniform(&[2, 12], 1.0, &mut g).data;
        let (_, cache, _) = emb.forward(&x, 2, Mode::Train).unwrap();
        let mut grad = emb.clone();
        grad.zero();
        emb.backward(&cache, &[0.0; 10], &mut grad);
        grad.visit("", &mut |name, a, _| {
            assert!(a.data.iter().all(|&v| v == 0.0), "{name}")
        });
    }

    #[test]
    fn running_stats_update() {
        let mut g = rng::seeded(5);
        let mut emb = Embedder::new(&EmbedderConfig::default(), 2, 2, 3, &mut g).unwrap();
        let x = DenseArray::uniform(&[2, 4], 1.0, &mut g).data;
        let (_, _, stats) = emb.forward(&x, 2, Mode::Train).unwrap();
        assert_eq!(stats.len(), 1);
        emb.update_running(&stats);
        let b = &emb.blocks[0];
        assert!((b.running_mean.data[0] - 0.1 * stats[0].mean[0]).abs() < 1e-15);
        assert!((b.running_var.data[0] - (0.9 + 0.1 * stats[0].var[0])).abs() < 1e-15);
        assert!(b.running_var.data[0] >= 0.0);
    }

    proptest! {
        #[test]
        fn blocks_preserve_spatial_dims(h in 1usize..9, w in 1usize..9, n in 1usize..4, ch in 1usize..3, seed: u64) {
            let mut g = rng::seeded(seed);
            let block = ConvBlock::new(ch, ch, 3, &mut g);
            let x = DenseArray::uniform(&[n, ch, h, w], 1.0, &mut g).data;
            let (y, _, _) = block.forward(&x, n, h, w, Mode::Train).unwrap();
            prop_assert_eq!(y.len(), n * ch * h * w);
        }

        #[test]
        fn rows_follow_slice_order(seed: u64) {
            let mut g = rng::seeded(seed);
            let emb = Embedder::new(&EmbedderConfig::default(), 3, 2, 4, &mut g).unwrap();
            let x = DenseArray::uniform(&[3, 6], 1.0, &mut g).data;
            let (y, _, _) = emb.forward(&x, 3, Mode::Eval).unwrap();
            let mut xp = x[6..12].to_vec();
            xp.extend_from_slice(&x[12..18]);
            xp.extend_from_slice(&x[..6]);
            let (yp, _, _) = emb.forward(&xp, 3, Mode::Eval).unwrap();
            prop_assert_eq!(&yp[..4], &y[4..8]);
            prop_assert_eq!(&yp[4..8], &y[8..12]);
            prop_assert_eq!(&yp[8..12], &y[..4]);
        }
    }
}
