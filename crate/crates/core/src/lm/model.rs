//! Causal transformer with hand-written gradients.
//!
//! Parameters are stored as `f32` in one flat buffer whose order is fixed by
//! [`Layout`]; all arithmetic runs in `f64`. The network is pre-LayerNorm:
//! token + learned position embeddings, `layers` blocks of multi-head causal
//! self-attention and a GELU MLP, a final LayerNorm, and an output
//! projection tied to the token embedding table.
//!
//! Every position carries the index where its segment starts. Attention is
//! restricted to earlier positions of the same segment and position ids
//! restart at each segment, so a packed sequence computes exactly what its
//! segments would compute on their own.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub window: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl ModelConfig {
    pub fn small(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            window: 256,
            width: 64,
            layers: 2,
            heads: 2,
            ffn: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.vocab_size > 0
            && self.window > 0
            && self.width > 0
            && self.layers > 0
            && self.heads > 0
            && self.ffn > 0
            && self.width % self.heads == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid model config {self:?}")))
        }
    }

    fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wqkv: usize,
    bqkv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Offsets of every tensor inside the flat parameter buffer.
///
/// Order: token embeddings `[vocab, width]`, position embeddings
/// `[window, width]`, then per layer: ln1 gain, ln1 bias, qkv weight
/// `[width, 3*width]`, qkv bias, output weight `[width, width]`, output bias,
/// ln2 gain, ln2 bias, fc1 weight `[width, ffn]`, fc1 bias, fc2 weight
/// `[ffn, width]`, fc2 bias; finally the last LayerNorm gain and bias.
/// Matrices are row-major with the input dimension first.
#[derive(Debug, Clone)]
pub struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let d = c.width;
        let tok_emb = take(c.vocab_size * d);
        let pos_emb = take(c.window * d);
        let layers = (0..c.layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wqkv: take(d * 3 * d),
                bqkv: take(3 * d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * c.ffn),
                b1: take(c.ffn),
                w2: take(c.ffn * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            total: at,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn token_embeddings(&self, c: &ModelConfig) -> std::ops::Range<usize> {
        self.tok_emb..self.tok_emb + c.vocab_size * c.width
    }
}

/// Initialize parameters: LayerNorm gains at 1, biases at 0, weights uniform
/// with standard deviation 0.02 (residual projections scaled by 1/sqrt(2L)).
pub fn init_params(c: &ModelConfig, layout: &Layout, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut p = vec![0f32; layout.total];
    let uniform = |p: &mut [f32], std: f64, rng: &mut ChaCha8Rng| {
        let a = std * 3f64.sqrt();
        for x in p {
            *x = rng.gen_range(-a..a) as f32;
        }
    };
    let d = c.width;
    let resid = 0.02 / (2.0 * c.layers as f64).sqrt();
    uniform(&mut p[layout.tok_emb..layout.tok_emb + c.vocab_size * d], 0.02, rng);
    uniform(&mut p[layout.pos_emb..layout.pos_emb + c.window * d], 0.02, rng);
    for l in &layout.layers {
        p[l.ln1_g..l.ln1_g + d].fill(1.0);
        p[l.ln2_g..l.ln2_g + d].fill(1.0);
        uniform(&mut p[l.wqkv..l.wqkv + 3 * d * d], 0.02, rng);
        uniform(&mut p[l.wo..l.wo + d * d], resid, rng);
        uniform(&mut p[l.w1..l.w1 + d * c.ffn], 0.02, rng);
        uniform(&mut p[l.w2..l.w2 + c.ffn * d], resid, rng);
    }
    p[layout.lnf_g..layout.lnf_g + d].fill(1.0);
    p
}

struct LayerCache {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    a2: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

/// Activations of one forward pass, kept for the backward pass.
pub struct Forward {
    tokens: Vec<u32>,
    seg: Vec<usize>,
    att_off: Vec<usize>,
    layers: Vec<LayerCache>,
    fin_xhat: Vec<f64>,
    fin_rstd: Vec<f64>,
    /// Final normalized hidden states, `[len, width]`.
    out: Vec<f64>,
}

impl Forward {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn hidden(&self, t: usize, width: usize) -> &[f64] {
        &self.out[t * width..(t + 1) * width]
    }
}

/// Segment starts for an unpacked sequence.
pub fn single_segment(len: usize) -> Vec<usize> {
    vec![0; len]
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: ModelConfig,
    layout: Layout,
    pub params: Vec<f32>,
}

impl Transformer {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = init_params(&config, &layout, rng);
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::format(
                "model parameters",
                format!("expected {} values, found {}", layout.total, params.len()),
            ));
        }
        Ok(Self { config, layout, params })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    fn check_input(&self, tokens: &[u32], seg: &[usize]) -> Result<()> {
        if tokens.len() != seg.len() {
            return Err(Error::Mask(format!(
                "{} segment entries for {} tokens",
                seg.len(),
                tokens.len()
            )));
        }
        for (t, (&tok, &s)) in tokens.iter().zip(seg).enumerate() {
            if tok as usize >= self.config.vocab_size {
                return Err(Error::format("token sequence", format!("token id {tok} out of range")));
            }
            if s > t || (t > 0 && s != t && s != seg[t - 1]) {
                return Err(Error::Mask(format!("bad segment start {s} at position {t}")));
            }
            if t - s >= self.config.window {
                return Err(Error::ContextOverflow {
                    needed: t - s + 1,
                    window: self.config.window,
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[u32], seg: &[usize]) -> Result<Forward> {
        self.check_input(tokens, seg)?;
        let c = &self.config;
        let (t_len, d) = (tokens.len(), c.width);
        let p = &self.params;

        let mut att_off = Vec::with_capacity(t_len + 1);
        let mut acc = 0;
        for t in 0..t_len {
            att_off.push(acc);
            acc += t - seg[t] + 1;
        }
        att_off.push(acc);

        let mut x = vec![0f64; t_len * d];
        for t in 0..t_len {
            let e = self.layout.tok_emb + tokens[t] as usize * d;
            let q = self.layout.pos_emb + (t - seg[t]) * d;
            for i in 0..d {
                x[t * d + i] = p[e + i] as f64 + p[q + i] as f64;
            }
        }

        let mut layers = Vec::with_capacity(c.layers);
        for l in &self.layout.layers {
            let (cache, x_out) = self.layer_forward(l, &x, seg, &att_off);
            layers.push(cache);
            x = x_out;
        }

        let mut fin_xhat = vec![0f64; t_len * d];
        let mut fin_rstd = vec![0f64; t_len];
        let mut out = vec![0f64; t_len * d];
        layer_norm(
            &x,
            &p[self.layout.lnf_g..self.layout.lnf_g + d],
            &p[self.layout.lnf_b..self.layout.lnf_b + d],
            d,
            &mut fin_xhat,
            &mut fin_rstd,
            &mut out,
        );
        Ok(Forward {
            tokens: tokens.to_vec(),
            seg: seg.to_vec(),
            att_off,
            layers,
            fin_xhat,
            fin_rstd,
            out,
        })
    }

    fn layer_forward(&self, l: &LayerOffsets, x_in: &[f64], seg: &[usize], att_off: &[usize]) -> (LayerCache, Vec<f64>) {
        let c = &self.config;
        let p = &self.params;
        let (d, f, h_n, hd) = (c.width, c.ffn, c.heads, c.head_dim());
        let t_len = seg.len();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut xhat1 = vec![0f64; t_len * d];
        let mut rstd1 = vec![0f64; t_len];
        let mut a1 = vec![0f64; t_len * d];
        layer_norm(x_in, &p[l.ln1_g..l.ln1_g + d], &p[l.ln1_b..l.ln1_b + d], d, &mut xhat1, &mut rstd1, &mut a1);

        let mut qkv = vec![0f64; t_len * 3 * d];
        linear(&a1, &p[l.wqkv..l.wqkv + 3 * d * d], &p[l.bqkv..l.bqkv + 3 * d], d, 3 * d, &mut qkv);

        let total = att_off[t_len];
        let mut probs = vec![0f64; h_n * total];
        let mut att = vec![0f64; t_len * d];
        for h in 0..h_n {
            let ho = h * hd;
            for t in 0..t_len {
                let s = seg[t];
                let q = &qkv[t * 3 * d + ho..t * 3 * d + ho + hd];
                let row = &mut probs[h * total + att_off[t]..h * total + att_off[t] + (t - s + 1)];
                let mut max = f64::NEG_INFINITY;
                for (j, r) in (s..=t).zip(row.iter_mut()) {
                    let k = &qkv[j * 3 * d + d + ho..j * 3 * d + d + ho + hd];
                    *r = dot(q, k) * scale;
                    max = max.max(*r);
                }
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                let o = &mut att[t * d + ho..t * d + ho + hd];
                for (j, r) in (s..=t).zip(row.iter_mut()) {
                    *r /= sum;
                    let v = &qkv[j * 3 * d + 2 * d + ho..j * 3 * d + 2 * d + ho + hd];
                    axpy(*r, v, o);
                }
            }
        }

        let mut x_mid = vec![0f64; t_len * d];
        linear(&att, &p[l.wo..l.wo + d * d], &p[l.bo..l.bo + d], d, d, &mut x_mid);
        for (m, xi) in x_mid.iter_mut().zip(x_in) {
            *m += xi;
        }

        let mut xhat2 = vec![0f64; t_len * d];
        let mut rstd2 = vec![0f64; t_len];
        let mut a2 = vec![0f64; t_len * d];
        layer_norm(&x_mid, &p[l.ln2_g..l.ln2_g + d], &p[l.ln2_b..l.ln2_b + d], d, &mut xhat2, &mut rstd2, &mut a2);

        let mut h_pre = vec![0f64; t_len * f];
        linear(&a2, &p[l.w1..l.w1 + d * f], &p[l.b1..l.b1 + f], d, f, &mut h_pre);
        let h_act: Vec<f64> = h_pre.iter().map(|&v| gelu(v)).collect();

        let mut x_out = vec![0f64; t_len * d];
        linear(&h_act, &p[l.w2..l.w2 + f * d], &p[l.b2..l.b2 + d], f, d, &mut x_out);
        for (o, m) in x_out.iter_mut().zip(&x_mid) {
            *o += m;
        }

        (
            LayerCache {
                xhat1,
                rstd1,
                a1,
                qkv,
                probs,
                att,
                xhat2,
                rstd2,
                a2,
                h_pre,
                h_act,
            },
            x_out,
        )
    }

    /// Output logits at position `t` (prediction for position `t + 1`).
    pub fn logits_at(&self, fwd: &Forward, t: usize) -> Vec<f64> {
        let d = self.config.width;
        let h = fwd.hidden(t, d);
        let emb = &self.params[self.layout.token_embeddings(&self.config)];
        emb.chunks_exact(d).map(|row| dot_f32(h, row)).collect()
    }

    /// Sum of `-log p(tokens[t] | tokens[seg..t])` over positions `t` with
    /// `targets[t]` set, plus the number of such positions. When `grads` is
    /// given, adds `scale` times the gradient of that sum.
    pub fn target_loss(
        &self,
        tokens: &[u32],
        seg: &[usize],
        targets: &[bool],
        grads: Option<&mut [f64]>,
        scale: f64,
    ) -> Result<(f64, usize)> {
        if targets.len() != tokens.len() {
            return Err(Error::Mask(format!(
                "{} target flags for {} tokens",
                targets.len(),
                tokens.len()
            )));
        }
        for (t, &on) in targets.iter().enumerate() {
            if on && seg.get(t).is_some_and(|&s| s == t) {
                return Err(Error::Mask(format!("target at segment start {t} has no context")));
            }
        }
        let count = targets.iter().filter(|&&b| b).count();
        if count == 0 {
            return Ok((0.0, 0));
        }
        let fwd = self.forward(tokens, seg)?;
        let d = self.config.width;
        let emb_range = self.layout.token_embeddings(&self.config);
        let mut loss = 0.0;
        let mut d_out = grads.as_ref().map(|_| vec![0f64; tokens.len() * d]);
        let mut d_emb_out: Vec<(usize, Vec<f64>)> = Vec::new();
        for t in (1..tokens.len()).filter(|&t| targets[t]) {
            let logits = self.logits_at(&fwd, t - 1);
            let lse = log_sum_exp(&logits);
            loss += lse - logits[tokens[t] as usize];
            if let Some(d_out) = d_out.as_mut() {
                let mut dl: Vec<f64> = logits.iter().map(|&z| (z - lse).exp() * scale).collect();
                dl[tokens[t] as usize] -= scale;
                let dh = &mut d_out[(t - 1) * d..t * d];
                let emb = &self.params[emb_range.clone()];
                for (v, row) in emb.chunks_exact(d).enumerate() {
                    axpy_f32(dl[v], row, dh);
                }
                d_emb_out.push((t - 1, dl));
            }
        }
        if let (Some(grads), Some(d_out)) = (grads, d_out) {
            let ge = &mut grads[emb_range];
            for (pos, dl) in &d_emb_out {
                let h = fwd.hidden(*pos, d);
                for (v, g) in ge.chunks_exact_mut(d).enumerate() {
                    axpy(dl[v], h, g);
                }
            }
            self.backward(&fwd, &d_out, grads);
        }
        Ok((loss, count))
    }

    /// Back-propagate a gradient on the final hidden states into `grads`.
    pub fn backward(&self, fwd: &Forward, d_out: &[f64], grads: &mut [f64]) {
        let c = &self.config;
        let p = &self.params;
        let d = c.width;
        let t_len = fwd.len();
        let lay = &self.layout;

        let mut dx = vec![0f64; t_len * d];
        {
            let (gg, gb) = split_two(grads, lay.lnf_g, lay.lnf_b, d);
            layer_norm_backward(d_out, &fwd.fin_xhat, &fwd.fin_rstd, &p[lay.lnf_g..lay.lnf_g + d], d, &mut dx, gg, gb);
        }
        for (l, cache) in lay.layers.iter().zip(&fwd.layers).rev() {
            dx = self.layer_backward(l, cache, &fwd.seg, &fwd.att_off, dx, grads);
        }
        for t in 0..t_len {
            let e = lay.tok_emb + fwd.tokens[t] as usize * d;
            let q = lay.pos_emb + (t - fwd.seg[t]) * d;
            for i in 0..d {
                grads[e + i] += dx[t * d + i];
                grads[q + i] += dx[t * d + i];
            }
        }
    }

    fn layer_backward(
        &self,
        l: &LayerOffsets,
        cache: &LayerCache,
        seg: &[usize],
        att_off: &[usize],
        d_xout: Vec<f64>,
        grads: &mut [f64],
    ) -> Vec<f64> {
        let c = &self.config;
        let p = &self.params;
        let (d, f, h_n, hd) = (c.width, c.ffn, c.heads, c.head_dim());
        let t_len = seg.len();
        let scale = 1.0 / (hd as f64).sqrt();

        // MLP
        let mut d_xmid = d_xout.clone();
        let mut d_hact = vec![0f64; t_len * f];
        {
            let (gw, gb) = split_two(grads, l.w2, l.b2, f * d);
            linear_backward(&cache.h_act, &p[l.w2..l.w2 + f * d], &d_xout, f, d, &mut d_hact, gw, &mut gb[..d]);
        }
        let d_hpre: Vec<f64> = d_hact
            .iter()
            .zip(&cache.h_pre)
            .map(|(g, &x)| g * gelu_grad(x))
            .collect();
        let mut d_a2 = vec![0f64; t_len * d];
        {
            let (gw, gb) = split_two(grads, l.w1, l.b1, d * f);
            linear_backward(&cache.a2, &p[l.w1..l.w1 + d * f], &d_hpre, d, f, &mut d_a2, gw, &mut gb[..f]);
        }
        {
            let (gg, gb) = split_two(grads, l.ln2_g, l.ln2_b, d);
            layer_norm_backward(&d_a2, &cache.xhat2, &cache.rstd2, &p[l.ln2_g..l.ln2_g + d], d, &mut d_xmid, gg, gb);
        }

        // attention
        let mut d_xin = d_xmid.clone();
        let mut d_att = vec![0f64; t_len * d];
        {
            let (gw, gb) = split_two(grads, l.wo, l.bo, d * d);
            linear_backward(&cache.att, &p[l.wo..l.wo + d * d], &d_xmid, d, d, &mut d_att, gw, &mut gb[..d]);
        }
        let total = att_off[t_len];
        let mut d_qkv = vec![0f64; t_len * 3 * d];
        let mut dp = Vec::new();
        for h in 0..h_n {
            let ho = h * hd;
            for t in 0..t_len {
                let s = seg[t];
                let row = &cache.probs[h * total + att_off[t]..h * total + att_off[t] + (t - s + 1)];
                let d_o = &d_att[t * d + ho..t * d + ho + hd];
                dp.clear();
                let mut weighted = 0.0;
                for (j, &pr) in (s..=t).zip(row) {
                    let v = &cache.qkv[j * 3 * d + 2 * d + ho..j * 3 * d + 2 * d + ho + hd];
                    let g = dot(d_o, v);
                    dp.push(g);
                    weighted += pr * g;
                    axpy(pr, d_o, &mut d_qkv[j * 3 * d + 2 * d + ho..j * 3 * d + 2 * d + ho + hd]);
                }
                for ((j, &pr), &g) in (s..=t).zip(row).zip(&dp) {
                    let ds = pr * (g - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let (qo, ko) = (t * 3 * d + ho, j * 3 * d + d + ho);
                    for i in 0..hd {
                        d_qkv[qo + i] += ds * cache.qkv[ko + i];
                        d_qkv[ko + i] += ds * cache.qkv[qo + i];
                    }
                }
            }
        }
        let mut d_a1 = vec![0f64; t_len * d];
        {
            let (gw, gb) = split_two(grads, l.wqkv, l.bqkv, 3 * d * d);
            linear_backward(&cache.a1, &p[l.wqkv..l.wqkv + 3 * d * d], &d_qkv, d, 3 * d, &mut d_a1, gw, &mut gb[..3 * d]);
        }
        {
            let (gg, gb) = split_two(grads, l.ln1_g, l.ln1_b, d);
            layer_norm_backward(&d_a1, &cache.xhat1, &cache.rstd1, &p[l.ln1_g..l.ln1_g + d], d, &mut d_xin, gg, gb);
        }
        d_xin
    }
}

/// Borrow two disjoint gradient ranges `[a, a+len_a)` and `[b, ..)` where `a < b`
/// and the second range starts right where it is needed by the caller.
fn split_two(grads: &mut [f64], a: usize, b: usize, len_a: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + len_a <= b);
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a..a + len_a], hi)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&x| (x - lse).exp()).collect()
}

// Dot products keep eight independent partial sums so the reduction can be
// vectorized while staying deterministic.
const LANES: usize = 8;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f64>() + tail
}

#[inline]
fn dot_f32(a: &[f64], b: &[f32]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l] as f64;
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, &y)| x * y as f64).sum();
    acc.iter().sum::<f64>() + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn axpy_f32(alpha: f64, x: &[f32], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi as f64;
    }
}

/// `y[t] = x[t] W + b` for every row `t`.
fn linear(x: &[f64], w: &[f32], b: &[f32], n_in: usize, n_out: usize, y: &mut [f64]) {
    for (xr, yr) in x.chunks_exact(n_in).zip(y.chunks_exact_mut(n_out)) {
        for (yo, &bo) in yr.iter_mut().zip(b) {
            *yo = bo as f64;
        }
        for (i, &xi) in xr.iter().enumerate() {
            if xi != 0.0 {
                axpy_f32(xi, &w[i * n_out..(i + 1) * n_out], yr);
            }
        }
    }
}

/// Gradients of [`linear`]; `dx` is overwritten, `dw` and `db` accumulate.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    w: &[f32],
    dy: &[f64],
    n_in: usize,
    n_out: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    for ((xr, dyr), dxr) in x
        .chunks_exact(n_in)
        .zip(dy.chunks_exact(n_out))
        .zip(dx.chunks_exact_mut(n_in))
    {
        axpy(1.0, dyr, db);
        for i in 0..n_in {
            dxr[i] = dot_f32(dyr, &w[i * n_out..(i + 1) * n_out]);
            if xr[i] != 0.0 {
                axpy(xr[i], dyr, &mut dw[i * n_out..(i + 1) * n_out]);
            }
        }
    }
}

fn layer_norm(x: &[f64], g: &[f32], b: &[f32], d: usize, xhat: &mut [f64], rstd: &mut [f64], y: &mut [f64]) {
    for (t, xr) in x.chunks_exact(d).enumerate() {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        for i in 0..d {
            let h = (xr[i] - mean) * r;
            xhat[t * d + i] = h;
            y[t * d + i] = h * g[i] as f64 + b[i] as f64;
        }
    }
}

/// Accumulates into `dx`, `dg`, `db`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    g: &[f32],
    d: usize,
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    let mut dxhat = vec![0f64; d];
    for (t, dyr) in dy.chunks_exact(d).enumerate() {
        let xh = &xhat[t * d..(t + 1) * d];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..d {
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i] as f64;
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d /= d as f64;
        mean_dx /= d as f64;
        for i in 0..d {
            dx[t * d + i] += rstd[t] * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
