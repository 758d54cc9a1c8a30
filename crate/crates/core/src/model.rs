//! Miniature pre-norm encoder-decoder with two interchangeable source
//! front-ends: the visual embedder over rendered slices, or a token
//! embedding over BPE segments. The target side is always BPE.

use serde::{Deserialize, Serialize};

use crate::embedder::{BatchStats, Embedder, EmbedderCache, EmbedderConfig, Mode};
use crate::error::{Error, Result};
use crate::layers::{
    add_positions, scaled, AttentionCache, Embedding, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, Linear,
    MultiHeadAttention,
};
use crate::render::{RenderConfig, Renderer};
use crate::rng::{self, Rng};
use crate::segmentation::{bpe_apply, bpe_train, BpeModel, Segmenter, TokenSequence, BOS_ID, EOS_ID};
use crate::slicer::{slice_image, SliceConfig};
use crate::tensor::{join, log_softmax, DenseArray, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FrontendConfig {
    Visual {
        #[serde(default)]
        render: RenderConfig,
        #[serde(default)]
        slice: SliceConfig,
        #[serde(default)]
        embedder: EmbedderConfig,
    },
    /// Token embeddings over a source BPE model with `merges` merges.
    Bpe { merges: usize },
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig::Visual {
            render: RenderConfig::default(),
            slice: SliceConfig::default(),
            embedder: EmbedderConfig::default(),
        }
    }
}

impl FrontendConfig {
    pub fn name(&self) -> &'static str {
        match self {
            FrontendConfig::Visual { .. } => "visual",
            FrontendConfig::Bpe { .. } => "bpe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub label_smoothing: f64,
    pub max_len: usize,
    pub target_merges: usize,
    pub seed: u64,
    pub frontend: FrontendConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            label_smoothing: 0.2,
            max_len: 256,
            target_merges: 500,
            seed: 1,
            frontend: FrontendConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::invalid("d_model must be even for sinusoidal positions"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid(format!(
                "label smoothing {} not in [0,1)",
                self.label_smoothing
            )));
        }
        if self.max_len < 2 || self.d_ff == 0 {
            return Err(Error::invalid("max_len must be >= 2 and d_ff >= 1"));
        }
        if let FrontendConfig::Visual {
            render,
            slice,
            embedder,
        } = &self.frontend
        {
            render.validate()?;
            slice.validate()?;
            embedder.validate()?;
        }
        Ok(())
    }
}

/// Encoder input for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceInput {
    /// `n` slices of `h * w` pixels each.
    Pixels {
        data: Vec<f64>,
        n: usize,
    },
    Tokens(Vec<usize>),
}

impl SourceInput {
    pub fn len(&self) -> usize {
        match self {
            SourceInput::Pixels { n, .. } => *n,
            SourceInput::Tokens(ids) => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrontendParams {
    Visual(Embedder),
    Tokens(Embedding),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

/// Every learnable (and persisted) array of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub frontend: FrontendParams,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: LayerNorm,
    pub target_embedding: Embedding,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: LayerNorm,
    pub output: Linear,
}

struct EncoderLayerCache {
    n1: LayerNormCache,
    attn: AttentionCache,
    n2: LayerNormCache,
    ffn: FeedForwardCache,
}

struct DecoderLayerCache {
    n1: LayerNormCache,
    self_attn: AttentionCache,
    n2: LayerNormCache,
    cross: AttentionCache,
    n3: LayerNormCache,
    ffn: FeedForwardCache,
}

enum FrontendCache {
    Visual(EmbedderCache),
    Tokens(Vec<usize>),
}

/// Encoder output plus what backward needs.
pub struct Encoded {
    pub memory: Vec<f64>,
    pub len: usize,
    pub stats: Vec<BatchStats>,
    frontend: FrontendCache,
    layers: Vec<EncoderLayerCache>,
    norm: LayerNormCache,
}

pub struct DecoderPass {
    /// `len x vocab`
    pub logits: Vec<f64>,
    hidden: Vec<f64>,
    layers: Vec<DecoderLayerCache>,
    norm: LayerNormCache,
    len: usize,
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

impl EncoderLayer {
    fn new(d: usize, heads: usize, d_ff: usize, rng: &mut Rng) -> Self {
        Self {
            norm1: LayerNorm::new(d),
            attn: MultiHeadAttention::new(d, heads, rng),
            norm2: LayerNorm::new(d),
            ffn: FeedForward::new(d, d_ff, rng),
        }
    }

    fn forward(&self, x: &[f64], t: usize) -> (Vec<f64>, EncoderLayerCache) {
        let (a_in, n1) = self.norm1.forward(x, t);
        let (a, attn) = self.attn.forward(&a_in, t, &a_in, t, false);
        let mut h = x.to_vec();
        add_into(&mut h, &a);
        let (f_in, n2) = self.norm2.forward(&h, t);
        let (f, ffn) = self.ffn.forward(&f_in, t);
        add_into(&mut h, &f);
        (h, EncoderLayerCache { n1, attn, n2, ffn })
    }

    fn backward(&self, c: &EncoderLayerCache, dy: &[f64], g: &mut EncoderLayer) -> Vec<f64> {
        let df_in = self.ffn.backward(&c.ffn, dy, &mut g.ffn);
        let mut dh = dy.to_vec();
        add_into(&mut dh, &self.norm2.backward(&c.n2, &df_in, &mut g.norm2));
        let (dq, dkv) = self.attn.backward(&c.attn, &dh, &mut g.attn);
        let mut da_in = dq;
        add_into(&mut da_in, &dkv);
        add_into(&mut dh, &self.norm1.backward(&c.n1, &da_in, &mut g.norm1));
        dh
    }
}

impl DecoderLayer {
    fn new(d: usize, heads: usize, d_ff: usize, rng: &mut Rng) -> Self {
        Self {
            norm1: LayerNorm::new(d),
            self_attn: MultiHeadAttention::new(d, heads, rng),
            norm2: LayerNorm::new(d),
            cross_attn: MultiHeadAttention::new(d, heads, rng),
            norm3: LayerNorm::new(d),
            ffn: FeedForward::new(d, d_ff, rng),
        }
    }

    fn forward(&self, x: &[f64], t: usize, memory: &[f64], s: usize) -> (Vec<f64>, DecoderLayerCache) {
        let (a_in, n1) = self.norm1.forward(x, t);
        let (a, self_attn) = self.self_attn.forward(&a_in, t, &a_in, t, true);
        let mut h = x.to_vec();
        add_into(&mut h, &a);
        let (c_in, n2) = self.norm2.forward(&h, t);
        let (c, cross) = self.cross_attn.forward(&c_in, t, memory, s, false);
        add_into(&mut h, &c);
        let (f_in, n3) = self.norm3.forward(&h, t);
        let (f, ffn) = self.ffn.forward(&f_in, t);
        add_into(&mut h, &f);
        (
            h,
            DecoderLayerCache {
                n1,
                self_attn,
                n2,
                cross,
                n3,
                ffn,
            },
        )
    }

    /// Returns `(dL/dx, dL/dmemory)`.
    fn backward(&self, c: &DecoderLayerCache, dy: &[f64], g: &mut DecoderLayer) -> (Vec<f64>, Vec<f64>) {
        let df_in = self.ffn.backward(&c.ffn, dy, &mut g.ffn);
        let mut dh = dy.to_vec();
        add_into(&mut dh, &self.norm3.backward(&c.n3, &df_in, &mut g.norm3));
        let (dc_in, dmem) = self.cross_attn.backward(&c.cross, &dh, &mut g.cross_attn);
        add_into(&mut dh, &self.norm2.backward(&c.n2, &dc_in, &mut g.norm2));
        let (dq, dkv) = self.self_attn.backward(&c.self_attn, &dh, &mut g.self_attn);
        let mut da_in = dq;
        add_into(&mut da_in, &dkv);
        add_into(&mut dh, &self.norm1.backward(&c.n1, &da_in, &mut g.norm1));
        (dh, dmem)
    }
}

/// Shape information the source front-end needs at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceShape {
    Visual {
        height: usize,
        window: usize,
        embedder: EmbedderConfig,
    },
    Tokens {
        vocab: usize,
    },
}

/// Label-smoothed negative log-likelihood of one position and its gradient
/// with respect to the logits.
pub fn smoothed_nll(logits: &[f64], gold: usize, eps: f64) -> (f64, f64, Vec<f64>) {
    let v = logits.len() as f64;
    let logp = log_softmax(logits);
    let mean_nll = -logp.iter().sum::<f64>() / v;
    let gold_lp = logp[gold];
    let loss = (1.0 - eps) * -gold_lp + eps * mean_nll;
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp() - eps / v).collect();
    grad[gold] -= 1.0 - eps;
    (loss, gold_lp, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean label-smoothed loss over target positions.
    pub loss: f64,
    /// Log-probability of each gold next token.
    pub token_logprobs: Vec<f64>,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, source: SourceShape, target_vocab: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        // separate streams keep the decoder identical across front-ends
        let mut front_rng = rng::stream(cfg.seed, 0);
        let mut enc_rng = rng::stream(cfg.seed, 1);
        let mut dec_rng = rng::stream(cfg.seed, 2);
        let frontend = match source {
            SourceShape::Visual {
                height,
                window,
                embedder,
            } => FrontendParams::Visual(Embedder::new(&embedder, height, window, d, &mut front_rng)?),
            SourceShape::Tokens { vocab } => FrontendParams::Tokens(Embedding::new(vocab, d, &mut front_rng)),
        };
        let encoder = (0..cfg.layers)
            .map(|_| EncoderLayer::new(d, cfg.heads, cfg.d_ff, &mut enc_rng))
            .collect();
        let target_embedding = Embedding::new(target_vocab, d, &mut dec_rng);
        let decoder = (0..cfg.layers)
            .map(|_| DecoderLayer::new(d, cfg.heads, cfg.d_ff, &mut dec_rng))
            .collect();
        let output = Linear::new(d, target_vocab, &mut dec_rng);
        Ok(Self {
            frontend,
            encoder,
            encoder_norm: LayerNorm::new(d),
            target_embedding,
            decoder,
            decoder_norm: LayerNorm::new(d),
            output,
        })
    }

    pub fn d_model(&self) -> usize {
        self.target_embedding.dim()
    }

    pub fn target_vocab(&self) -> usize {
        self.output.outputs()
    }

    fn input_scale(&self) -> f64 {
        (self.d_model() as f64).sqrt()
    }

    /// Front-end output before scaling and positions: `len x d`.
    fn frontend_forward(&self, src: &SourceInput, mode: Mode) -> Result<(Vec<f64>, FrontendCache, Vec<BatchStats>)> {
        match (&self.frontend, src) {
            (FrontendParams::Visual(emb), SourceInput::Pixels { data, n }) => {
                let (out, cache, stats) = emb.forward(data, *n, mode)?;
                Ok((out, FrontendCache::Visual(cache), stats))
            }
            (FrontendParams::Tokens(emb), SourceInput::Tokens(ids)) => {
                if let Some(&bad) = ids.iter().find(|&&id| id >= emb.vocab()) {
                    return Err(Error::invalid(format!("source id {bad} outside vocabulary")));
                }
                Ok((emb.forward(ids), FrontendCache::Tokens(ids.clone()), Vec::new()))
            }
            _ => Err(Error::invalid("source input does not match the model front-end")),
        }
    }

    /// Runs the encoder given front-end outputs (`len x d`, unscaled).
    pub fn encode_embedded(&self, embedded: &[f64], len: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.d_model();
        let mut x = scaled(embedded, self.input_scale());
        add_positions(&mut x, len, d);
        let mut h = x;
        for layer in &self.encoder {
            h = layer.forward(&h, len).0;
        }
        let memory = self.encoder_norm.forward(&h, len).0;
        (memory, h)
    }

    pub fn encode(&self, src: &SourceInput, mode: Mode) -> Result<Encoded> {
        if src.is_empty() {
            return Err(Error::invalid("empty source input"));
        }
        let len = src.len();
        let d = self.d_model();
        let (embedded, frontend, stats) = self.frontend_forward(src, mode)?;
        let mut x = scaled(&embedded, self.input_scale());
        add_positions(&mut x, len, d);
        let mut layers = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (y, c) = layer.forward(&x, len);
            layers.push(c);
            x = y;
        }
        let (memory, norm) = self.encoder_norm.forward(&x, len);
        Ok(Encoded {
            memory,
            len,
            stats,
            frontend,
            layers,
            norm,
        })
    }

    /// Teacher-forced decoder over `inputs` attending to `memory`.
    pub fn decode(&self, memory: &[f64], src_len: usize, inputs: &[usize]) -> DecoderPass {
        self.decode_rows(memory, src_len, inputs, false)
    }

    fn decode_rows(&self, memory: &[f64], src_len: usize, inputs: &[usize], last_only: bool) -> DecoderPass {
        let (d, t) = (self.d_model(), inputs.len());
        let mut x = scaled(&self.target_embedding.forward(inputs), self.input_scale());
        add_positions(&mut x, t, d);
        let mut layers = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (y, c) = layer.forward(&x, t, memory, src_len);
            layers.push(c);
            x = y;
        }
        let (hidden, norm) = self.decoder_norm.forward(&x, t);
        let logits = if last_only {
            self.output.forward(&hidden[(t - 1) * d..], 1)
        } else {
            self.output.forward(&hidden, t)
        };
        DecoderPass {
            logits,
            hidden,
            layers,
            norm,
            len: t,
        }
    }

    fn check_target(&self, target: &[usize]) -> Result<()> {
        if target.len() < 2 {
            return Err(Error::invalid("target needs at least BOS and EOS"));
        }
        if let Some(&bad) = target.iter().find(|&&id| id >= self.target_vocab()) {
            return Err(Error::invalid(format!("target id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Label-smoothed loss of `target` (BOS ... EOS) given the source.
    pub fn loss(&self, src: &SourceInput, target: &[usize], eps: f64, mode: Mode) -> Result<LossOutput> {
        self.check_target(target)?;
        let enc = self.encode(src, mode)?;
        let inputs = &target[..target.len() - 1];
        let pass = self.decode(&enc.memory, enc.len, inputs);
        let v = self.target_vocab();
        let mut total = 0.0;
        let mut token_logprobs = Vec::with_capacity(inputs.len());
        for (i, &gold) in target[1..].iter().enumerate() {
            let (l, lp, _) = smoothed_nll(&pass.logits[i * v..(i + 1) * v], gold, eps);
            total += l;
            token_logprobs.push(lp);
        }
        Ok(LossOutput {
            loss: total / inputs.len() as f64,
            token_logprobs,
        })
    }

    /// Accumulates `scale * d(sum of token losses)` into `grad`. Returns the
    /// summed loss, the number of target positions, and batch-norm
    /// statistics from the forward pass.
    pub fn loss_and_grad(
        &self,
        src: &SourceInput,
        target: &[usize],
        eps: f64,
        scale: f64,
        mode: Mode,
        grad: &mut ModelParams,
    ) -> Result<(f64, usize, Vec<BatchStats>)> {
        self.check_target(target)?;
        let d = self.d_model();
        let enc = self.encode(src, mode)?;
        let inputs = &target[..target.len() - 1];
        let t = inputs.len();
        let pass = self.decode(&enc.memory, enc.len, inputs);
        let v = self.target_vocab();

        let mut total = 0.0;
        let mut dlogits = vec![0.0; t * v];
        for (i, &gold) in target[1..].iter().enumerate() {
            let (l, _, g) = smoothed_nll(&pass.logits[i * v..(i + 1) * v], gold, eps);
            total += l;
            for (o, gv) in dlogits[i * v..(i + 1) * v].iter_mut().zip(g) {
                *o = gv * scale;
            }
        }

        let dhidden = self.output.backward(&pass.hidden, &dlogits, pass.len, &mut grad.output);
        let mut dy = self.decoder_norm.backward(&pass.norm, &dhidden, &mut grad.decoder_norm);
        let mut dmemory = vec![0.0; enc.len * d];
        for (i, layer) in self.decoder.iter().enumerate().rev() {
            let (dx, dm) = layer.backward(&pass.layers[i], &dy, &mut grad.decoder[i]);
            add_into(&mut dmemory, &dm);
            dy = dx;
        }
        let k = self.input_scale();
        self.target_embedding
            .backward(inputs, &scaled(&dy, k), &mut grad.target_embedding);

        let mut dx = self.encoder_norm.backward(&enc.norm, &dmemory, &mut grad.encoder_norm);
        for (i, layer) in self.encoder.iter().enumerate().rev() {
            dx = layer.backward(&enc.layers[i], &dx, &mut grad.encoder[i]);
        }
        let dembedded = scaled(&dx, k);
        match (&self.frontend, &enc.frontend, &mut grad.frontend) {
            (FrontendParams::Visual(emb), FrontendCache::Visual(cache), FrontendParams::Visual(g)) => {
                emb.backward(cache, &dembedded, g);
            }
            (FrontendParams::Tokens(emb), FrontendCache::Tokens(ids), FrontendParams::Tokens(g)) => {
                emb.backward(ids, &dembedded, g);
            }
            _ => return Err(Error::invalid("gradient buffer does not match front-end")),
        }
        Ok((total, t, enc.stats))
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) {
        if let FrontendParams::Visual(emb) = &mut self.frontend {
            emb.update_running(stats);
        }
    }

    /// Greedy decoding from BOS until EOS or `max_len` target positions.
    /// Returns the generated ids (without BOS/EOS) and whether decoding was
    /// cut off by `max_len`.
    pub fn greedy(&self, src: &SourceInput, max_len: usize) -> Result<(Vec<usize>, bool)> {
        let enc = self.encode(src, Mode::Eval)?;
        let mut ids = vec![BOS_ID];
        loop {
            if ids.len() > max_len {
                return Ok((ids[1..].to_vec(), true));
            }
            let pass = self.decode_rows(&enc.memory, enc.len, &ids, true);
            let next = argmax(&pass.logits);
            if next == EOS_ID {
                return Ok((ids[1..].to_vec(), false));
            }
            ids.push(next);
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Params for FrontendParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray, bool)) {
        match self {
            FrontendParams::Visual(e) => e.visit(&join(prefix, "visual"), f),
            FrontendParams::Tokens(e) => e.visit(&join(prefix, "tokens"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray, bool)) {
        match self {
            FrontendParams::Visual(e) => e.visit_mut(&join(prefix, "visual"), f),
            FrontendParams::Tokens(e) => e.visit_mut(&join(prefix, "tokens"), f),
        }
    }
}

impl Params for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray, bool)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "self_attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray, bool)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "self_attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

impl Params for DecoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray, bool)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        self.norm3.visit(&join(prefix, "norm3"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray, bool)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.norm3.visit_mut(&join(prefix, "norm3"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

impl Params for ModelParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray, bool)) {
        self.frontend.visit(&join(prefix, "frontend"), f);
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.encoder_norm.visit(&join(prefix, "encoder.norm"), f);
        self.target_embedding.visit(&join(prefix, "target_embedding"), f);
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.decoder_norm.visit(&join(prefix, "decoder.norm"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray, bool)) {
        self.frontend.visit_mut(&join(prefix, "frontend"), f);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.encoder_norm.visit_mut(&join(prefix, "encoder.norm"), f);
        self.target_embedding.visit_mut(&join(prefix, "target_embedding"), f);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.decoder_norm.visit_mut(&join(prefix, "decoder.norm"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// How source sentences become encoder input.
#[derive(Debug, Clone)]
pub enum SourceEncoder {
    Visual { renderer: Renderer, slice: SliceConfig },
    Bpe(BpeModel),
}

impl SourceEncoder {
    pub fn prepare(&self, text: &str) -> Result<SourceInput> {
        match self {
            SourceEncoder::Visual { renderer, slice } => {
                let img = renderer.render_line(text)?;
                let seq = slice_image(&img, *slice);
                Ok(SourceInput::Pixels {
                    data: crate::embedder::slices_to_input(&seq),
                    n: seq.len(),
                })
            }
            SourceEncoder::Bpe(model) => {
                let mut ids = bpe_apply(text, model).ids;
                ids.push(EOS_ID);
                Ok(SourceInput::Tokens(ids))
            }
        }
    }
}

/// A translation result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Translation {
    pub text: String,
    pub ids: Vec<usize>,
    /// Decoding hit `max_len` before producing EOS.
    pub truncated: bool,
}

/// Configuration, parameters and the text-processing state around them.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub source: SourceEncoder,
    pub target: BpeModel,
}

impl Model {
    /// Learns the BPE models from the training corpus and initializes
    /// parameters from `config.seed`.
    pub fn new<S: AsRef<str>>(config: ModelConfig, sources: &[S], targets: &[S]) -> Result<Self> {
        config.validate()?;
        let target = bpe_train(targets.iter().map(|s| s.as_ref()), config.target_merges)?;
        let source_bpe = match &config.frontend {
            FrontendConfig::Bpe { merges } => Some(bpe_train(sources.iter().map(|s| s.as_ref()), *merges)?),
            FrontendConfig::Visual { .. } => None,
        };
        Self::assemble(config, source_bpe, target, None)
    }

    /// Builds a model around already-trained segmenters; `params` are
    /// freshly initialized when `None`.
    pub fn assemble(
        config: ModelConfig,
        source_bpe: Option<BpeModel>,
        target: BpeModel,
        params: Option<ModelParams>,
    ) -> Result<Self> {
        config.validate()?;
        let (source, shape) = match (&config.frontend, source_bpe) {
            (
                FrontendConfig::Visual {
                    render,
                    slice,
                    embedder,
                },
                _,
            ) => {
                let renderer = Renderer::from_config(render)?;
                let shape = SourceShape::Visual {
                    height: renderer.height(),
                    window: slice.window,
                    embedder: *embedder,
                };
                (
                    SourceEncoder::Visual {
                        renderer,
                        slice: *slice,
                    },
                    shape,
                )
            }
            (FrontendConfig::Bpe { .. }, Some(bpe)) => {
                let vocab = bpe.vocab().len();
                (SourceEncoder::Bpe(bpe), SourceShape::Tokens { vocab })
            }
            (FrontendConfig::Bpe { .. }, None) => {
                return Err(Error::invalid("bpe front-end requires a source BPE model"));
            }
        };
        let params = match params {
            Some(p) => p,
            None => ModelParams::init(&config, shape, target.vocab().len())?,
        };
        Ok(Self {
            config,
            params,
            source,
            target,
        })
    }

    pub fn source_bpe(&self) -> Option<&BpeModel> {
        match &self.source {
            SourceEncoder::Bpe(m) => Some(m),
            SourceEncoder::Visual { .. } => None,
        }
    }

    pub fn prepare_source(&self, text: &str) -> Result<SourceInput> {
        let src = self.source.prepare(text)?;
        if src.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "source length {} exceeds max_len {}",
                src.len(),
                self.config.max_len
            )));
        }
        Ok(src)
    }

    pub fn prepare_target(&self, text: &str) -> Result<TokenSequence> {
        let seq = bpe_apply(text, &self.target).with_specials();
        if seq.len() > self.config.max_len + 1 {
            return Err(Error::invalid(format!(
                "target length {} exceeds max_len {}",
                seq.len() - 1,
                self.config.max_len
            )));
        }
        Ok(seq)
    }

    /// Mean label-smoothed loss and per-token gold log-probabilities
    /// (evaluation-mode batch norm).
    pub fn forward_loss(&self, src: &str, tgt: &TokenSequence) -> Result<LossOutput> {
        let input = self.prepare_source(src)?;
        if tgt.len() > self.config.max_len + 1 {
            return Err(Error::invalid("target exceeds max_len"));
        }
        self.params
            .loss(&input, &tgt.ids, self.config.label_smoothing, Mode::Eval)
    }

    pub fn translate(&self, src: &str) -> Result<Translation> {
        let input = self.prepare_source(src)?;
        let (ids, truncated) = self.params.greedy(&input, self.config.max_len)?;
        let text = Segmenter::Bpe(self.target.clone()).decode(&ids);
        Ok(Translation { text, ids, truncated })
    }

    /// Translation for many sentences; the target segmenter is built once.
    pub fn translate_all<S: AsRef<str>>(&self, sources: &[S]) -> Result<Vec<String>> {
        let seg = Segmenter::Bpe(self.target.clone());
        sources
            .iter()
            .map(|s| {
                let input = self.prepare_source(s.as_ref())?;
                let (ids, _) = self.params.greedy(&input, self.config.max_len)?;
                Ok(seg.decode(&ids))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, TOL};

    fn tiny(frontend: FrontendConfig) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 12,
            target_merges: 5,
            seed: 3,
            frontend,
            ..Default::default()
        }
    }

    fn small_visual() -> FrontendConfig {
        FrontendConfig::Visual {
            render: RenderConfig::default(),
            slice: SliceConfig::new(6, 4).unwrap(),
            embedder: EmbedderConfig::default(),
        }
    }

    const SRC: [&str; 3] = ["ab ca", "bc", "abc b"];
    const TGT: [&str; 3] = ["xy z", "zz", "y x"];

    #[test]
    fn smoothed_nll_closed_forms() {
        let v = 7;
        for eps in [0.0, 0.2, 0.5] {
            let (l, _, _) = smoothed_nll(&vec![0.0; v], 3, eps);
            assert!((l - (v as f64).ln()).abs() < 1e-12);
        }
        let logits = [0.3, -1.2, 2.0, 0.0, 0.7];
        let (plain, lp, _) = smoothed_nll(&logits, 2, 0.0);
        assert_eq!(plain, -lp);
        let eps = 0.2;
        let (smooth, _, grad) = smoothed_nll(&logits, 2, eps);
        assert!(smooth >= eps * (logits.len() as f64).ln());
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn zero_logits_give_log_vocab() {
        let mut model = Model::new(tiny(FrontendConfig::Bpe { merges: 3 }), &SRC, &TGT).unwrap();
        model.params.output.w.fill(0.0);
        model.params.output.b.fill(0.0);
        let tgt = model.prepare_target("xy z").unwrap();
        let out = model.forward_loss("ab ca", &tgt).unwrap();
        let v = model.params.target_vocab() as f64;
        assert!((out.loss - v.ln()).abs() < 1e-12);
    }

    #[test]
    fn whole_model_gradients() {
        for frontend in [small_visual(), FrontendConfig::Bpe { merges: 3 }] {
            let model = Model::new(tiny(frontend.clone()), &SRC, &TGT).unwrap();
            let src = model.prepare_source("abc b").unwrap();
            let tgt = model.prepare_target("y x").unwrap().ids;
            let mut grad = model.params.clone();
            grad.zero();
            model
                .params
                .loss_and_grad(&src, &tgt, 0.2, 1.0, Mode::Train, &mut grad)
                .unwrap();
            let n = (tgt.len() - 1) as f64;
            let mut f = |p: &ModelParams| p.loss(&src, &tgt, 0.2, Mode::Train).unwrap().loss * n;
            let (err, at) = check(&model.params, &grad, &mut f);
            assert!(err < TOL, "{}: {at} {err}", frontend.name());
        }
    }

    #[test]
    fn causal_decoder() {
        let model = Model::new(tiny(FrontendConfig::Bpe { merges: 3 }), &SRC, &TGT).unwrap();
        let src = model.prepare_source("ab ca").unwrap();
        let a = model.prepare_target("xy z y").unwrap().ids;
        let enc = model.params.encode(&src, Mode::Eval).unwrap();
        let v = model.params.target_vocab();
        let la = model.params.decode(&enc.memory, enc.len, &a).logits;
        for t in 1..a.len() {
            let mut b = a.clone();
            b[t] = if b[t] == 5 { 6 } else { 5 };
            let lb = model.params.decode(&enc.memory, enc.len, &b).logits;
            assert_eq!(&la[..t * v], &lb[..t * v]);
            assert_ne!(&la[t * v..(t + 1) * v], &lb[t * v..(t + 1) * v]);
        }
    }

    #[test]
    fn decoder_is_shared_across_frontends() {
        let v = Model::new(tiny(small_visual()), &SRC, &TGT).unwrap();
        let b = Model::new(tiny(FrontendConfig::Bpe { merges: 3 }), &SRC, &TGT).unwrap();
        assert_eq!(v.params.decoder, b.params.decoder);
        assert_eq!(v.params.encoder, b.params.encoder);
        let memory: Vec<f64> = (0..3 * 8).map(|i| (i as f64 * 0.37).sin()).collect();
        let ids = v.prepare_target("xy z").unwrap().ids;
        assert_eq!(
            v.params.decode(&memory, 3, &ids).logits,
            b.params.decode(&memory, 3, &ids).logits
        );
    }

    #[test]
    fn rigged_eos_decodes_empty() {
        let mut model = Model::new(tiny(small_visual()), &SRC, &TGT).unwrap();
        model.params.output.b.data[EOS_ID] = 1e6;
        let out = model.translate("ab").unwrap();
        assert_eq!(out.text, "");
        assert!(!out.truncated);
        model.params.output.b.data[EOS_ID] = -1e6;
        let out = model.translate("ab").unwrap();
        assert!(out.truncated);
        assert_eq!(out.ids.len(), model.config.max_len);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny(FrontendConfig::Bpe { merges: 3 });
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny(FrontendConfig::Bpe { merges: 3 });
        cfg.label_smoothing = 1.0;
        assert!(cfg.validate().is_err());
        let cfg = tiny(FrontendConfig::Visual {
            render: RenderConfig::default(),
            slice: SliceConfig { window: 4, stride: 8 },
            embedder: EmbedderConfig::default(),
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn max_len_enforced() {
        let mut cfg = tiny(FrontendConfig::Bpe { merges: 0 });
        cfg.max_len = 3;
        let model = Model::new(cfg, &SRC, &TGT).unwrap();
        assert!(model.prepare_source("abcabc").is_err());
        assert!(model.prepare_target("xyzxyz").is_err());
    }
}
