//! Transformer building blocks with explicit forward caches and hand-written
//! backward passes. Activations are row-major `rows x features` slices.

use crate::rng::Rng;
use crate::tensor::{dot, join, matmul, matmul_a_bt, matmul_acc, matmul_at_b_acc, softmax_inplace, DenseArray, Params};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub w: DenseArray,
    /// `[out]`
    pub b: DenseArray,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            w: DenseArray::uniform(&[inputs, outputs], bound, rng),
            b: DenseArray::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.shape[0]
    }

    pub fn outputs(&self) -> usize {
        self.w.shape[1]
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (i, o) = (self.inputs(), self.outputs());
        let mut y = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            y.extend_from_slice(&self.b.data);
        }
        matmul_acc(x, &self.w.data, rows, i, o, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], rows: usize, grad: &mut Linear) -> Vec<f64> {
        let (i, o) = (self.inputs(), self.outputs());
        matmul_at_b_acc(x, dy, rows, i, o, &mut grad.w.data);
        for r in 0..rows {
            for (g, d) in grad.b.data.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
                *g += d;
            }
        }
        matmul_a_bt(dy, &self.w.data, rows, o, i)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray, bool)) {
        f(&join(prefix, "weight"), &self.w, true);
        f(&join(prefix, "bias"), &self.b, true);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray, bool)) {
        f(&join(prefix, "weight"), &mut self.w, true);
        f(&join(prefix, "bias"), &mut self.b, true);
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: DenseArray,
    pub beta: DenseArray,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: DenseArray::filled(&[d], 1.0),
            beta: DenseArray::zeros(&[d]),
        }
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> (Vec<f64>, LayerNormCache) {
        let d = self.gamma.len();
        let mut y = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * self.gamma.data[j] + self.beta.data[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &[f64], grad: &mut LayerNorm) -> Vec<f64> {
        let d = self.gamma.len();
        let rows = cache.rstd.len();
        let mut dx = vec![0.0; rows * d];
        let mut dxhat = vec![0.0; d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let dyr = &dy[r * d..(r + 1) * d];
            let (mut sum, mut sum_x) = (0.0, 0.0);
            for j in 0..d {
                grad.gamma.data[j] += dyr[j] * xh[j];
                grad.beta.data[j] += dyr[j];
                dxhat[j] = dyr[j] * self.gamma.data[j];
                sum += dxhat[j];
                sum_x += dxhat[j] * xh[j];
            }
            let k = cache.rstd[r] / d as f64;
            for j in 0..d {
                dx[r * d + j] = k * (d as f64 * dxhat[j] - sum - xh[j] * sum_x);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray, bool)) {
        f(&join(prefix, "gamma"), &self.gamma, true);
        f(&join(prefix, "beta"), &self.beta, true);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray, bool)) {
        f(&join(prefix, "gamma"), &mut self.gamma, true);
        f(&join(prefix, "beta"), &mut self.beta, true);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    xq: Vec<f64>,
    xkv: Vec<f64>,
    tq: usize,
    tk: usize,
    /// Projected queries/keys/values split per head: `[heads][t][dh]`.
    qh: Vec<f64>,
    kh: Vec<f64>,
    vh: Vec<f64>,
    /// `[heads][tq][tk]`
    probs: Vec<f64>,
    ctx: Vec<f64>,
}

fn split_heads(x: &[f64], t: usize, heads: usize, dh: usize) -> Vec<f64> {
    let d = heads * dh;
    let mut out = vec![0.0; t * d];
    for h in 0..heads {
        for i in 0..t {
            out[(h * t + i) * dh..(h * t + i + 1) * dh].copy_from_slice(&x[i * d + h * dh..i * d + (h + 1) * dh]);
        }
    }
    out
}

fn merge_heads(x: &[f64], t: usize, heads: usize, dh: usize) -> Vec<f64> {
    let d = heads * dh;
    let mut out = vec![0.0; t * d];
    for h in 0..heads {
        for i in 0..t {
            out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&x[(h * t + i) * dh..(h * t + i + 1) * dh]);
        }
    }
    out
}

impl MultiHeadAttention {
    pub fn new(d: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            heads,
            q: Linear::new(d, d, rng),
            k: Linear::new(d, d, rng),
            v: Linear::new(d, d, rng),
            o: Linear::new(d, d, rng),
        }
    }

    fn d(&self) -> usize {
        self.q.outputs()
    }

    /// Scaled dot-product attention of `tq` query rows over `tk` key/value
    /// rows. With `causal`, query `i` sees keys `0..=i` only.
    pub fn forward(&self, xq: &[f64], tq: usize, xkv: &[f64], tk: usize, causal: bool) -> (Vec<f64>, AttentionCache) {
        let (d, heads) = (self.d(), self.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qh = split_heads(&self.q.forward(xq, tq), tq, heads, dh);
        let kh = split_heads(&self.k.forward(xkv, tk), tk, heads, dh);
        let vh = split_heads(&self.v.forward(xkv, tk), tk, heads, dh);

        let mut probs = vec![0.0; heads * tq * tk];
        let mut ctx_h = vec![0.0; heads * tq * dh];
        for h in 0..heads {
            let q = &qh[h * tq * dh..(h + 1) * tq * dh];
            let k = &kh[h * tk * dh..(h + 1) * tk * dh];
            let v = &vh[h * tk * dh..(h + 1) * tk * dh];
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                let visible = if causal { (i + 1).min(tk) } else { tk };
                for j in 0..visible {
                    row[j] = dot(&q[i * dh..(i + 1) * dh], &k[j * dh..(j + 1) * dh]) * scale;
                }
                softmax_inplace(&mut row[..visible]);
            }
            matmul_acc(p, v, tq, tk, dh, &mut ctx_h[h * tq * dh..(h + 1) * tq * dh]);
        }
        let ctx = merge_heads(&ctx_h, tq, heads, dh);
        let out = self.o.forward(&ctx, tq);
        let cache = AttentionCache {
            xq: xq.to_vec(),
            xkv: xkv.to_vec(),
            tq,
            tk,
            qh,
            kh,
            vh,
            probs,
            ctx,
        };
        (out, cache)
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    pub fn backward(&self, c: &AttentionCache, dout: &[f64], grad: &mut MultiHeadAttention) -> (Vec<f64>, Vec<f64>) {
        let (d, heads, tq, tk) = (self.d(), self.heads, c.tq, c.tk);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dctx = self.o.backward(&c.ctx, dout, tq, &mut grad.o);
        let dctx_h = split_heads(&dctx, tq, heads, dh);

        let mut dqh = vec![0.0; heads * tq * dh];
        let mut dkh = vec![0.0; heads * tk * dh];
        let mut dvh = vec![0.0; heads * tk * dh];
        for h in 0..heads {
            let q = &c.qh[h * tq * dh..(h + 1) * tq * dh];
            let k = &c.kh[h * tk * dh..(h + 1) * tk * dh];
            let v = &c.vh[h * tk * dh..(h + 1) * tk * dh];
            let p = &c.probs[h * tq * tk..(h + 1) * tq * tk];
            let dc = &dctx_h[h * tq * dh..(h + 1) * tq * dh];
            // dP = dC V^T ; dV = P^T dC
            let mut ds = matmul_a_bt(dc, v, tq, dh, tk);
            matmul_at_b_acc(p, dc, tq, tk, dh, &mut dvh[h * tk * dh..(h + 1) * tk * dh]);
            for i in 0..tq {
                let prow = &p[i * tk..(i + 1) * tk];
                let drow = &mut ds[i * tk..(i + 1) * tk];
                let s = dot(prow, drow);
                for (dv, &pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - s) * scale;
                }
            }
            matmul_acc(&ds, k, tq, tk, dh, &mut dqh[h * tq * dh..(h + 1) * tq * dh]);
            matmul_at_b_acc(&ds, q, tq, tk, dh, &mut dkh[h * tk * dh..(h + 1) * tk * dh]);
        }
        let dq = merge_heads(&dqh, tq, heads, dh);
        let dk = merge_heads(&dkh, tk, heads, dh);
        let dv = merge_heads(&dvh, tk, heads, dh);
        let dxq = self.q.backward(&c.xq, &dq, tq, &mut grad.q);
        let mut dxkv = self.k.backward(&c.xkv, &dk, tk, &mut grad.k);
        for (a, b) in dxkv.iter_mut().zip(self.v.backward(&c.xkv, &dv, tk, &mut grad.v)) {
            *a += b;
        }
        (dxq, dxkv)
    }
}

impl Params for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray, bool)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray, bool)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    x: Vec<f64>,
    hidden: Vec<f64>,
    rows: usize,
}

impl FeedForward {
    pub fn new(d: usize, d_ff: usize, rng: &mut Rng) -> Self {
        Self {
            up: Linear::new(d, d_ff, rng),
            down: Linear::new(d_ff, d, rng),
        }
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> (Vec<f64>, FeedForwardCache) {
        let mut hidden = self.up.forward(x, rows);
        for v in hidden.iter_mut() {
            *v = v.max(0.0);
        }
        let y = self.down.forward(&hidden, rows);
        (
            y,
            FeedForwardCache {
                x: x.to_vec(),
                hidden,
                rows,
            },
        )
    }

    pub fn backward(&self, c: &FeedForwardCache, dy: &[f64], grad: &mut FeedForward) -> Vec<f64> {
        let mut dh = self.down.backward(&c.hidden, dy, c.rows, &mut grad.down);
        for (g, &h) in dh.iter_mut().zip(&c.hidden) {
            if h <= 0.0 {
                *g = 0.0;
            }
        }
        self.up.backward(&c.x, &dh, c.rows, &mut grad.up)
    }
}

impl Params for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray, bool)) {
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray, bool)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    /// `[vocab, d]`
    pub table: DenseArray,
}

impl Embedding {
    pub fn new(vocab: usize, d: usize, rng: &mut Rng) -> Self {
        // unit variance after the sqrt(d) input scaling
        let bound = (3.0 / d as f64).sqrt();
        Self {
            table: DenseArray::uniform(&[vocab, d], bound, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.shape[1]
    }

    pub fn vocab(&self) -> usize {
        self.table.shape[0]
    }

    pub fn forward(&self, ids: &[usize]) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&self.table.data[id * d..(id + 1) * d]);
        }
        out
    }

    pub fn backward(&self, ids: &[usize], dy: &[f64], grad: &mut Embedding) {
        let d = self.dim();
        for (r, &id) in ids.iter().enumerate() {
            for (g, v) in grad.table.data[id * d..(id + 1) * d]
                .iter_mut()
                .zip(&dy[r * d..(r + 1) * d])
            {
                *g += v;
            }
        }
    }
}

impl Params for Embedding {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray, bool)) {
        f(&join(prefix, "table"), &self.table, true);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray, bool)) {
        f(&join(prefix, "table"), &mut self.table, true);
    }
}

/// Adds fixed sinusoidal position encodings to `rows x d` activations.
pub fn add_positions(x: &mut [f64], rows: usize, d: usize) {
    for pos in 0..rows {
        for i in 0..d / 2 {
            let freq = (-(2.0 * i as f64) * (10000f64).ln() / d as f64).exp();
            let angle = pos as f64 * freq;
            x[pos * d + 2 * i] += angle.sin();
            x[pos * d + 2 * i + 1] += angle.cos();
        }
    }
}

/// Copy of `x` with every value multiplied by `k`.
pub fn scaled(x: &[f64], k: f64) -> Vec<f64> {
    x.iter().map(|v| v * k).collect()
}

#[allow(dead_code)]
pub(crate) fn linear_reference(l: &Linear, x: &[f64], rows: usize) -> Vec<f64> {
    let mut y = matmul(x, &l.w.data, rows, l.inputs(), l.outputs());
    for r in 0..rows {
        for j in 0..l.outputs() {
            y[r * l.outputs() + j] += l.b.data[j];
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, TOL};
    use crate::rng;

    fn weighted_sum(y: &[f64], r: &[f64]) -> f64 {
        y.iter().zip(r).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn linear_matches_reference_and_gradients() {
        let mut g = rng::seeded(3);
        let l = Linear::new(5, 4, &mut g);
        let x = DenseArray::uniform(&[3, 5], 1.0, &mut g).data;
        let r = DenseArray::uniform(&[3, 4], 1.0, &mut g).data;
        assert_eq!(l.forward(&x, 3), linear_reference(&l, &x, 3));
        let mut grad = l.clone();
        grad.zero();
        l.backward(&x, &r, 3, &mut grad);
        let (err, at) = check(&l, &grad, &mut |p: &Linear| weighted_sum(&p.forward(&x, 3), &r));
        assert!(err < TOL, "{at}: {err}");
    }

    #[test]
    fn layer_norm_gradients() {
        let mut g = rng::seeded(4);
        let mut ln = LayerNorm::new(6);
        ln.gamma = DenseArray::uniform(&[6], 1.5, &mut g);
        ln.beta = DenseArray::uniform(&[6], 0.5, &mut g);
        let x = DenseArray::uniform(&[4, 6], 2.0, &mut g).data;
        let r = DenseArray::uniform(&[4, 6], 1.0, &mut g).data;
        let (_, cache) = ln.forward(&x, 4);
        let mut grad = ln.clone();
        grad.zero();
        let dx = ln.backward(&cache, &r, &mut grad);
        let (err, at) = check(&ln, &grad, &mut |p: &LayerNorm| weighted_sum(&p.forward(&x, 4).0, &r));
        assert!(err < TOL, "{at}: {err}");
        // input gradient
        for e in 0..x.len() {
            let mut xp = x.clone();
            xp[e] += 1e-6;
            let mut xm = x.clone();
            xm[e] -= 1e-6;
            let num = (weighted_sum(&ln.forward(&xp, 4).0, &r) - weighted_sum(&ln.forward(&xm, 4).0, &r)) / 2e-6;
            assert!((num - dx[e]).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_gradients_and_causality() {
        let mut g = rng::seeded(5);
        let att = MultiHeadAttention::new(8, 2, &mut g);
        let xq = DenseArray::uniform(&[3, 8], 1.0, &mut g).data;
        let xkv = DenseArray::uniform(&[5, 8], 1.0, &mut g).data;
        let r = DenseArray::uniform(&[3, 8], 1.0, &mut g).data;
        for causal in [false, true] {
            let (_, cache) = att.forward(&xq, 3, &xkv, 5, causal);
            let mut grad = att.clone();
            grad.zero();
            let (dxq, dxkv) = att.backward(&cache, &r, &mut grad);
            let mut f = |p: &MultiHeadAttention| weighted_sum(&p.forward(&xq, 3, &xkv, 5, causal).0, &r);
            let (err, at) = check(&att, &grad, &mut f);
            assert!(err < TOL, "{at}: {err}");
            let num = |x: &[f64], e: usize, is_q: bool| {
                let mut xp = x.to_vec();
                xp[e] += 1e-6;
                let mut xm = x.to_vec();
                xm[e] -= 1e-6;
                let eval = |v: &[f64]| {
                    let out = if is_q {
                        att.forward(v, 3, &xkv, 5, causal).0
                    } else {
                        att.forward(&xq, 3, v, 5, causal).0
                    };
                    weighted_sum(&out, &r)
                };
                (eval(&xp) - eval(&xm)) / 2e-6
            };
            for e in 0..xq.len() {
                assert!((num(&xq, e, true) - dxq[e]).abs() < 1e-6);
            }
            for e in 0..xkv.len() {
                assert!((num(&xkv, e, false) - dxkv[e]).abs() < 1e-6);
            }
        }
        // causal self-attention: changing row 2 leaves rows 0..2 untouched
        let x = DenseArray::uniform(&[4, 8], 1.0, &mut g).data;
        let mut x2 = x.clone();
        for v in &mut x2[2 * 8..3 * 8] {
            *v += 0.7;
        }
        let a = att.forward(&x, 4, &x, 4, true).0;
        let b = att.forward(&x2, 4, &x2, 4, true).0;
        assert_eq!(&a[..16], &b[..16]);
        assert_ne!(&a[16..24], &b[16..24]);
    }

    #[test]
    fn feed_forward_and_embedding_gradients() {
        let mut g = rng::seeded(6);
        let ff = FeedForward::new(4, 7, &mut g);
        let x = DenseArray::uniform(&[3, 4], 1.0, &mut g).data;
        let r = DenseArray::uniform(&[3, 4], 1.0, &mut g).data;
        let (_, cache) = ff.forward(&x, 3);
        let mut grad = ff.clone();
        grad.zero();
        ff.backward(&cache, &r, &mut grad);
        let (err, at) = check(&ff, &grad, &mut |p: &FeedForward| weighted_sum(&p.forward(&x, 3).0, &r));
        assert!(err < TOL, "{at}: {err}");

        let emb = Embedding::new(5, 3, &mut g);
        let ids = [1, 4, 1];
        let r = DenseArray::uniform(&[3, 3], 1.0, &mut g).data;
        let mut grad = emb.clone();
        grad.zero();
        emb.backward(&ids, &r, &mut grad);
        let (err, at) = check(&emb, &grad, &mut |p: &Embedding| weighted_sum(&p.forward(&ids), &r));
        assert!(err < TOL, "{at}: {err}");
    }

    #[test]
    fn positions_are_bounded() {
        let mut x = vec![0.0; 10 * 8];
        add_positions(&mut x, 10, 8);
        assert!(x.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(x[1], 1.0); // cos(0)
    }
}
