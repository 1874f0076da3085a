//! Toy decoder-only transformer: LLaMA-style blocks (RMSNorm, multi-head
//! causal attention, gated SiLU MLP, no biases), masked and dense forward
//! passes, Gram capture at the four per-block layer inputs, perplexity,
//! parameter counting, and a minimal Adam trainer.

use crate::data::{CalibrationSet, Corpus};
use crate::error::{Error, Result};
use crate::genome::Genome;
use crate::numerics::Matrix;
use crate::util::{derive_rng, sha256_hex};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// Positional encoding family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalMode {
    AbsoluteLearned,
    Rotary,
}

/// Architecture description of the toy model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub positional_mode: PositionalMode,
    pub rms_eps: f64,
}

impl ModelConfig {
    /// The default desk-scale configuration used across tests and the CLI.
    pub fn toy() -> Self {
        ModelConfig {
            depth: 4,
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            d_mlp: 128,
            vocab_size: crate::data::BYTE_VOCAB as usize,
            max_seq_len: 64,
            positional_mode: PositionalMode::AbsoluteLearned,
            rms_eps: 1e-5,
        }
    }

    pub fn rotary(&self) -> bool {
        self.positional_mode == PositionalMode::Rotary
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::ShapeMismatch(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        for (name, v) in [
            ("depth", self.depth),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::ShapeMismatch(format!("{name} must be >= 1")));
            }
        }
        if self.rotary() && !self.head_dim.is_multiple_of(2) {
            return Err(Error::ShapeMismatch("rotary mode requires an even head_dim".to_string()));
        }
        Ok(())
    }

    /// Stable identity of the architecture, stored in genomes and manifests.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialization cannot fail");
        sha256_hex(&json)[..16].to_string()
    }
}

/// Dense row-major f32 weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl WMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        WMat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len());
        WMat { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Widen to an f64 [`Matrix`] for solver-side math.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|v| *v as f64).collect())
    }

    /// Narrow an f64 [`Matrix`] back to weights.
    pub fn from_matrix(m: &Matrix) -> WMat {
        WMat { rows: m.rows(), cols: m.cols(), data: m.data().iter().map(|v| *v as f32).collect() }
    }
}

/// One transformer block's seven projections and two norm gains.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub w_q: WMat,
    pub w_k: WMat,
    pub w_v: WMat,
    pub w_o: WMat,
    pub w_u: WMat,
    pub w_g: WMat,
    pub w_d: WMat,
    pub norm_attn: Vec<f32>,
    pub norm_mlp: Vec<f32>,
}

/// Full model: embedding, optional learned positions, blocks, final norm,
/// output projection (stored d_model x vocab).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embed: WMat,
    pub pos: Option<WMat>,
    pub blocks: Vec<BlockWeights>,
    pub norm_final: Vec<f32>,
    pub w_out: WMat,
}

impl ModelWeights {
    /// Total stored scalars, the `full`-scope count of the identity genome.
    pub fn scalar_count(&self) -> u64 {
        self.tensor_entries().iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// All tensors in the fixed (name, data) order used by the optimizer and
    /// the checkpoint format.
    pub fn tensor_entries(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = Vec::new();
        out.push(("embed.weight".to_string(), &self.embed.data));
        if let Some(pos) = &self.pos {
            out.push(("pos.weight".to_string(), &pos.data));
        }
        for (ix, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{ix}.w_q"), &b.w_q.data));
            out.push((format!("block{ix}.w_k"), &b.w_k.data));
            out.push((format!("block{ix}.w_v"), &b.w_v.data));
            out.push((format!("block{ix}.w_o"), &b.w_o.data));
            out.push((format!("block{ix}.w_u"), &b.w_u.data));
            out.push((format!("block{ix}.w_g"), &b.w_g.data));
            out.push((format!("block{ix}.w_d"), &b.w_d.data));
            out.push((format!("block{ix}.norm_attn"), &b.norm_attn));
            out.push((format!("block{ix}.norm_mlp"), &b.norm_mlp));
        }
        out.push(("norm_final".to_string(), &self.norm_final));
        out.push(("output.weight".to_string(), &self.w_out.data));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        out.push(&mut self.embed.data);
        if let Some(pos) = &mut self.pos {
            out.push(&mut pos.data);
        }
        for b in &mut self.blocks {
            out.push(&mut b.w_q.data);
            out.push(&mut b.w_k.data);
            out.push(&mut b.w_v.data);
            out.push(&mut b.w_o.data);
            out.push(&mut b.w_u.data);
            out.push(&mut b.w_g.data);
            out.push(&mut b.w_d.data);
            out.push(&mut b.norm_attn);
            out.push(&mut b.norm_mlp);
        }
        out.push(&mut self.norm_final);
        out.push(&mut self.w_out.data);
        out
    }
}

/// Seeded random initialization: small normal weights, residual projections
/// damped by depth, unit norm gains.
pub fn init_weights(config: &ModelConfig, seed: u64) -> ModelWeights {
    let d = config.d_model;
    let proj_std = 1.0 / (d as f64).sqrt();
    let resid_std = proj_std / (2.0 * config.depth as f64).sqrt();
    let mat = |rng: &mut ChaCha12Rng, rows: usize, cols: usize, std: f64| {
        let mut m = WMat::zeros(rows, cols);
        fill_normal(rng, std, &mut m.data);
        m
    };
    let mut rng = derive_rng(seed, &["weight-init"]);
    let embed = mat(&mut rng, config.vocab_size, d, 0.02);
    let pos = match config.positional_mode {
        PositionalMode::AbsoluteLearned => Some(mat(&mut rng, config.max_seq_len, d, 0.02)),
        PositionalMode::Rotary => None,
    };
    let m_dim = config.n_heads * config.head_dim;
    let blocks = (0..config.depth)
        .map(|_| BlockWeights {
            w_q: mat(&mut rng, m_dim, d, proj_std),
            w_k: mat(&mut rng, m_dim, d, proj_std),
            w_v: mat(&mut rng, m_dim, d, proj_std),
            w_o: mat(&mut rng, d, m_dim, resid_std),
            w_u: mat(&mut rng, config.d_mlp, d, proj_std),
            w_g: mat(&mut rng, config.d_mlp, d, proj_std),
            w_d: mat(&mut rng, d, config.d_mlp, resid_std),
            norm_attn: vec![1.0; d],
            norm_mlp: vec![1.0; d],
        })
        .collect();
    ModelWeights {
        embed,
        pos,
        blocks,
        norm_final: vec![1.0; d],
        w_out: mat(&mut rng, d, config.vocab_size, proj_std),
    }
}

fn fill_normal(rng: &mut ChaCha12Rng, std: f64, out: &mut [f32]) {
    let mut i = 0;
    while i < out.len() {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        out[i] = (r * theta.cos() * std) as f32;
        if i + 1 < out.len() {
            out[i + 1] = (r * theta.sin() * std) as f32;
        }
        i += 2;
    }
}

/// Forward arithmetic precision. Weights are stored in f32 either way; the
/// f64 mode widens them exactly and narrows nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

/// Element type the forward pass is generic over.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
        }
    };
}
impl_scalar!(f32);
impl_scalar!(f64);

/// The four per-block activation capture points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TapPoint {
    QkvInput,
    OInput,
    UgInput,
    DInput,
}

/// Capture-point selection for [`capture_grams`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInputTap {
    pub points: Vec<TapPoint>,
}

impl LayerInputTap {
    pub fn all() -> Self {
        LayerInputTap {
            points: vec![TapPoint::QkvInput, TapPoint::OInput, TapPoint::UgInput, TapPoint::DInput],
        }
    }
}

/// Accumulated Gram matrices for one block. Unselected taps stay 0x0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGrams {
    pub g_qkv: Matrix,
    pub g_o: Matrix,
    pub g_ug: Matrix,
    pub g_d: Matrix,
}

/// Per-block Gram statistics plus the number of token positions summed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramSet {
    pub per_block: Vec<BlockGrams>,
    pub token_count: u64,
    pub damping: f64,
}

fn accumulate_outer(g: &mut Matrix, x: &[f64]) {
    if g.rows() == 0 {
        return;
    }
    debug_assert_eq!(g.rows(), x.len());
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = g.row_mut(i);
        for (gj, &xj) in row.iter_mut().zip(x) {
            *gj += xi * xj;
        }
    }
}

/// One block's view for the shared forward kernel: weights, per-head dims,
/// attention scale, rotary tables, and optional masks.
pub(crate) struct BlockCtx<'a> {
    pub weights: &'a BlockWeights,
    pub head_dims: Vec<usize>,
    pub scale: f64,
    pub rope: Option<Vec<Vec<f64>>>,
    pub attn_mask: Option<Vec<bool>>,
    pub mlp_mask: Option<Vec<bool>>,
}

static FORWARD_PASSES: AtomicU64 = AtomicU64::new(0);

/// Number of inference forward passes executed so far in this process.
/// Used to assert that budget-rejected candidates never run the model.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.load(Ordering::Relaxed)
}

pub(crate) fn rms_norm<S: Scalar>(x: &[S], gain: &[f32], eps: f64) -> Vec<S> {
    let mut ss = S::zero();
    for v in x {
        ss += *v * *v;
    }
    let r = (ss / S::from_f64(x.len() as f64) + S::from_f64(eps)).sqrt();
    x.iter().zip(gain).map(|(v, g)| *v / r * S::from_f32(*g)).collect()
}

/// `out[r] = row_r(w) . x`, skipping masked rows (their output stays zero).
pub(crate) fn matvec_rows<S: Scalar>(w: &WMat, x: &[S], mask: Option<&[bool]>) -> Vec<S> {
    debug_assert_eq!(w.cols, x.len());
    let mut out = vec![S::zero(); w.rows];
    for r in 0..w.rows {
        if let Some(m) = mask {
            if !m[r] {
                continue;
            }
        }
        let row = w.row(r);
        let mut acc = S::zero();
        for (wv, xv) in row.iter().zip(x) {
            acc += S::from_f32(*wv) * *xv;
        }
        out[r] = acc;
    }
    out
}

fn softmax_in_place<S: Scalar>(scores: &mut [S]) {
    let mut mx = scores[0];
    for s in &scores[1..] {
        if *s > mx {
            mx = *s;
        }
    }
    let mut sum = S::zero();
    for s in scores.iter_mut() {
        *s = (*s - mx).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s = *s / sum;
    }
}

pub(crate) fn silu<S: Scalar>(v: S) -> S {
    v / (S::one() + (-v).exp())
}

fn apply_rope<S: Scalar>(vec: &mut [S], freqs: &[f64], pos: usize) {
    debug_assert_eq!(vec.len(), freqs.len() * 2);
    for (i, f) in freqs.iter().enumerate() {
        let (sin, cos) = (pos as f64 * f).sin_cos();
        let (sin, cos) = (S::from_f64(sin), S::from_f64(cos));
        let a = vec[2 * i];
        let b = vec[2 * i + 1];
        vec[2 * i] = a * cos - b * sin;
        vec[2 * i + 1] = a * sin + b * cos;
    }
}

/// Rotary frequency table for the full head: pair `i` rotates at
/// `10000^(-2i/head_dim)` per position.
pub(crate) fn rope_freqs(head_dim: usize) -> Vec<f64> {
    (0..head_dim / 2).map(|i| 10000f64.powf(-2.0 * i as f64 / head_dim as f64)).collect()
}

/// Shared forward kernel over an explicit block list; the masked, dense, and
/// extracted paths all run through here so they stay numerically identical.
#[allow(clippy::too_many_arguments)]
pub(crate) fn transformer_forward<S: Scalar>(
    embed: &WMat,
    pos: Option<&WMat>,
    norm_final: &[f32],
    w_out: &WMat,
    blocks: &[BlockCtx],
    eps: f64,
    max_seq_len: usize,
    tokens: &[u32],
    mut sinks: Option<&mut [BlockGrams]>,
) -> Result<Matrix> {
    if tokens.len() > max_seq_len {
        return Err(Error::ShapeMismatch(format!(
            "sequence length {} exceeds max_seq_len {max_seq_len}",
            tokens.len()
        )));
    }
    for &t in tokens {
        if t as usize >= embed.rows {
            return Err(Error::TokenOutOfRange { id: t, vocab: embed.rows });
        }
    }
    FORWARD_PASSES.fetch_add(1, Ordering::Relaxed);
    let d = embed.cols;
    let t_len = tokens.len();
    let mut x: Vec<Vec<S>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            let mut row: Vec<S> = embed.row(t as usize).iter().map(|v| S::from_f32(*v)).collect();
            if let Some(ptab) = pos {
                for (r, pv) in row.iter_mut().zip(ptab.row(p)) {
                    *r += S::from_f32(*pv);
                }
            }
            row
        })
        .collect();

    for (bix, ctx) in blocks.iter().enumerate() {
        let bw = ctx.weights;
        // attention half
        let h1: Vec<Vec<S>> = x.iter().map(|row| rms_norm(row, &bw.norm_attn, eps)).collect();
        let mask = ctx.attn_mask.as_deref();
        let mut q: Vec<Vec<S>> = h1.iter().map(|h| matvec_rows(&bw.w_q, h, mask)).collect();
        let mut k: Vec<Vec<S>> = h1.iter().map(|h| matvec_rows(&bw.w_k, h, mask)).collect();
        let v: Vec<Vec<S>> = h1.iter().map(|h| matvec_rows(&bw.w_v, h, mask)).collect();
        if let Some(rope) = &ctx.rope {
            for p in 0..t_len {
                let mut off = 0;
                for (h, &hd) in ctx.head_dims.iter().enumerate() {
                    apply_rope(&mut q[p][off..off + hd], &rope[h], p);
                    apply_rope(&mut k[p][off..off + hd], &rope[h], p);
                    off += hd;
                }
            }
        }
        let m_dim: usize = ctx.head_dims.iter().sum();
        let scale = S::from_f64(ctx.scale);
        let mut attn = vec![vec![S::zero(); m_dim]; t_len];
        let mut off = 0;
        for &hd in &ctx.head_dims {
            let mut scores: Vec<S> = Vec::with_capacity(t_len);
            for t in 0..t_len {
                scores.clear();
                for j in 0..=t {
                    let mut dot = S::zero();
                    for (qv, kv) in q[t][off..off + hd].iter().zip(&k[j][off..off + hd]) {
                        dot += *qv * *kv;
                    }
                    scores.push(dot * scale);
                }
                softmax_in_place(&mut scores);
                let out_row = &mut attn[t][off..off + hd];
                for (j, p) in scores.iter().enumerate() {
                    for (o, vv) in out_row.iter_mut().zip(&v[j][off..off + hd]) {
                        *o += *p * *vv;
                    }
                }
            }
            off += hd;
        }
        let mut h2s: Vec<Vec<S>> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let o = matvec_rows(&bw.w_o, &attn[t], None);
            for (xv, ov) in x[t].iter_mut().zip(&o) {
                *xv += *ov;
            }
            h2s.push(rms_norm(&x[t], &bw.norm_mlp, eps));
        }
        // MLP half
        let mlp_mask = ctx.mlp_mask.as_deref();
        for t in 0..t_len {
            let u = matvec_rows(&bw.w_u, &h2s[t], mlp_mask);
            let g = matvec_rows(&bw.w_g, &h2s[t], mlp_mask);
            let act: Vec<S> = u.iter().zip(&g).map(|(uv, gv)| silu(*gv) * *uv).collect();
            let dvec = matvec_rows(&bw.w_d, &act, None);
            for (xv, dv) in x[t].iter_mut().zip(&dvec) {
                *xv += *dv;
            }
            if let Some(sink) = sinks.as_deref_mut().map(|s| &mut s[bix]) {
                let to_f64 = |v: &[S]| v.iter().map(|s| s.to_f64()).collect::<Vec<_>>();
                accumulate_outer(&mut sink.g_qkv, &to_f64(&h1[t]));
                accumulate_outer(&mut sink.g_o, &to_f64(&attn[t]));
                accumulate_outer(&mut sink.g_ug, &to_f64(&h2s[t]));
                accumulate_outer(&mut sink.g_d, &to_f64(&act));
            }
        }
    }

    let vocab = w_out.cols;
    let mut logits = Matrix::zeros(t_len, vocab);
    for t in 0..t_len {
        let hf = rms_norm(&x[t], norm_final, eps);
        let mut row = vec![S::zero(); vocab];
        for (d_ix, hv) in hf.iter().enumerate().take(d) {
            let wrow = w_out.row(d_ix);
            for (lv, wv) in row.iter_mut().zip(wrow) {
                *lv += *hv * S::from_f32(*wv);
            }
        }
        for (out, lv) in logits.row_mut(t).iter_mut().zip(&row) {
            *out = lv.to_f64();
        }
    }
    Ok(logits)
}

/// Build the per-block forward contexts for a (possibly masked) model.
fn model_block_ctxs<'a>(
    weights: &'a ModelWeights,
    config: &ModelConfig,
    genome: Option<&Genome>,
) -> Result<Vec<BlockCtx<'a>>> {
    if weights.blocks.len() != config.depth {
        return Err(Error::ShapeMismatch(format!(
            "{} blocks stored, config depth {}",
            weights.blocks.len(),
            config.depth
        )));
    }
    if let Some(g) = genome {
        if g.config_fingerprint != config.fingerprint() {
            return Err(Error::ConfigMismatch {
                a: g.config_fingerprint.clone(),
                b: config.fingerprint(),
            });
        }
        if g.blocks.len() != config.depth {
            return Err(Error::ShapeMismatch(format!(
                "genome has {} blocks, config depth {}",
                g.blocks.len(),
                config.depth
            )));
        }
    }
    let scale = 1.0 / (config.head_dim as f64).sqrt();
    let rope = config.rotary().then(|| vec![rope_freqs(config.head_dim); config.n_heads]);
    let mut ctxs = Vec::with_capacity(config.depth);
    for (bix, bw) in weights.blocks.iter().enumerate() {
        let bg = genome.map(|g| &g.blocks[bix]);
        if let Some(bg) = bg {
            if !bg.kept {
                continue;
            }
        }
        ctxs.push(BlockCtx {
            weights: bw,
            head_dims: vec![config.head_dim; config.n_heads],
            scale,
            rope: rope.clone(),
            attn_mask: bg.map(|b| b.attn_mask_flat()),
            mlp_mask: bg.map(|b| b.mlp_mask.bits().to_vec()),
        });
    }
    Ok(ctxs)
}

/// Dense (genome = None) or masked forward pass in f32; returns logits as an
/// f64 matrix of shape positions x vocab.
pub fn forward_logits(
    weights: &ModelWeights,
    config: &ModelConfig,
    tokens: &[u32],
    genome: Option<&Genome>,
) -> Result<Matrix> {
    forward_logits_prec(weights, config, tokens, genome, Precision::F32)
}

/// [`forward_logits`] with an explicit arithmetic precision.
pub fn forward_logits_prec(
    weights: &ModelWeights,
    config: &ModelConfig,
    tokens: &[u32],
    genome: Option<&Genome>,
    prec: Precision,
) -> Result<Matrix> {
    let ctxs = model_block_ctxs(weights, config, genome)?;
    match prec {
        Precision::F32 => transformer_forward::<f32>(
            &weights.embed,
            weights.pos.as_ref(),
            &weights.norm_final,
            &weights.w_out,
            &ctxs,
            config.rms_eps,
            config.max_seq_len,
            tokens,
            None,
        ),
        Precision::F64 => transformer_forward::<f64>(
            &weights.embed,
            weights.pos.as_ref(),
            &weights.norm_final,
            &weights.w_out,
            &ctxs,
            config.rms_eps,
            config.max_seq_len,
            tokens,
            None,
        ),
    }
}

/// Mean NLL contribution of one sequence's next-token predictions:
/// row `t` of the logits predicts `tokens[t + 1]`.
pub fn nll_from_logits(logits: &Matrix, tokens: &[u32]) -> (f64, usize) {
    let mut total = 0.0;
    let mut n = 0;
    for t in 0..tokens.len().saturating_sub(1) {
        let row = logits.row(t);
        let target = tokens[t + 1] as usize;
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[target];
        n += 1;
    }
    (total, n)
}

/// exp of the mean token-level negative log-likelihood over all next-token
/// predictions in the evaluation set.
pub fn perplexity(
    weights: &ModelWeights,
    config: &ModelConfig,
    eval_set: &[Vec<u32>],
    genome: Option<&Genome>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for seq in eval_set {
        if seq.len() < 2 {
            continue;
        }
        let logits = forward_logits(weights, config, seq, genome)?;
        let (nll, count) = nll_from_logits(&logits, seq);
        total += nll;
        n += count;
    }
    if n == 0 {
        return Err(Error::EmptyEvalSet);
    }
    Ok((total / n as f64).exp())
}

/// Which layers count: searched blocks only, or everything stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountScope {
    BlocksOnly,
    Full,
}

/// Exact retained-parameter count for a genome.
pub fn param_count(config: &ModelConfig, genome: &Genome, scope: CountScope) -> u64 {
    let d = config.d_model as u64;
    let mut count = 0u64;
    for block in &genome.blocks {
        if !block.kept {
            continue;
        }
        let attn_kept = block.attn_kept() as u64;
        let mlp_kept = block.mlp_mask.popcount() as u64;
        count += 4 * attn_kept * d + 3 * mlp_kept * d + 2 * d;
    }
    if scope == CountScope::Full {
        let v = config.vocab_size as u64;
        count += v * d + d * v + d;
        if config.positional_mode == PositionalMode::AbsoluteLearned {
            count += config.max_seq_len as u64 * d;
        }
    }
    count
}

/// Blocks-only parameter count of the all-ones genome (the budget
/// denominator).
pub fn full_block_param_count(config: &ModelConfig) -> u64 {
    let d = config.d_model as u64;
    let m = (config.n_heads * config.head_dim) as u64;
    let p = config.d_mlp as u64;
    config.depth as u64 * (4 * m * d + 3 * p * d + 2 * d)
}

/// Calibration sequences are folded in fixed-size chunks so the Gram sums
/// are independent of worker count.
pub const GRAM_CHUNK: usize = 16;

fn empty_block_grams(config: &ModelConfig, taps: &LayerInputTap) -> Vec<BlockGrams> {
    let d = config.d_model;
    let m = config.n_heads * config.head_dim;
    let p = config.d_mlp;
    let want = |t: TapPoint, n: usize| {
        if taps.points.contains(&t) {
            Matrix::zeros(n, n)
        } else {
            Matrix::zeros(0, 0)
        }
    };
    (0..config.depth)
        .map(|_| BlockGrams {
            g_qkv: want(TapPoint::QkvInput, d),
            g_o: want(TapPoint::OInput, m),
            g_ug: want(TapPoint::UgInput, d),
            g_d: want(TapPoint::DInput, p),
        })
        .collect()
}

fn add_block_grams(into: &mut [BlockGrams], from: &[BlockGrams]) {
    for (a, b) in into.iter_mut().zip(from) {
        for (ga, gb) in [
            (&mut a.g_qkv, &b.g_qkv),
            (&mut a.g_o, &b.g_o),
            (&mut a.g_ug, &b.g_ug),
            (&mut a.g_d, &b.g_d),
        ] {
            if ga.rows() > 0 {
                *ga = ga.add(gb);
            }
        }
    }
}

/// Accumulate `sum x x^T` over every token position of the calibration set
/// at the selected dense-model capture points.
pub fn capture_grams(
    weights: &ModelWeights,
    config: &ModelConfig,
    calib: &CalibrationSet,
    taps: &LayerInputTap,
) -> Result<GramSet> {
    let chunks: Vec<&[Vec<u32>]> = calib.sequences.chunks(GRAM_CHUNK).collect();
    let partials: Vec<Result<Vec<BlockGrams>>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut acc = empty_block_grams(config, taps);
            for seq in *chunk {
                let ctxs = model_block_ctxs(weights, config, None)?;
                transformer_forward::<f32>(
                    &weights.embed,
                    weights.pos.as_ref(),
                    &weights.norm_final,
                    &weights.w_out,
                    &ctxs,
                    config.rms_eps,
                    config.max_seq_len,
                    seq,
                    Some(&mut acc),
                )?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = empty_block_grams(config, taps);
    for partial in partials {
        add_block_grams(&mut total, &partial?);
    }
    let token_count: u64 = calib.sequences.iter().map(|s| s.len() as u64).sum();
    Ok(GramSet { per_block: total, token_count, damping: 0.0 })
}

/// Trainer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for TrainerSettings {
    fn default() -> Self {
        TrainerSettings { steps: 200, batch: 4, lr: 1e-3, seq_len: 32, seed: 42 }
    }
}

/// Per-step mean cross-entropy, recorded for reporting and the
/// loss-decreased postcondition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

struct GradBlock {
    w_q: Vec<f32>,
    w_k: Vec<f32>,
    w_v: Vec<f32>,
    w_o: Vec<f32>,
    w_u: Vec<f32>,
    w_g: Vec<f32>,
    w_d: Vec<f32>,
    norm_attn: Vec<f32>,
    norm_mlp: Vec<f32>,
}

struct GradModel {
    embed: Vec<f32>,
    pos: Option<Vec<f32>>,
    blocks: Vec<GradBlock>,
    norm_final: Vec<f32>,
    w_out: Vec<f32>,
}

impl GradModel {
    fn zeros_like(w: &ModelWeights) -> Self {
        GradModel {
            embed: vec![0.0; w.embed.data.len()],
            pos: w.pos.as_ref().map(|p| vec![0.0; p.data.len()]),
            blocks: w
                .blocks
                .iter()
                .map(|b| GradBlock {
                    w_q: vec![0.0; b.w_q.data.len()],
                    w_k: vec![0.0; b.w_k.data.len()],
                    w_v: vec![0.0; b.w_v.data.len()],
                    w_o: vec![0.0; b.w_o.data.len()],
                    w_u: vec![0.0; b.w_u.data.len()],
                    w_g: vec![0.0; b.w_g.data.len()],
                    w_d: vec![0.0; b.w_d.data.len()],
                    norm_attn: vec![0.0; b.norm_attn.len()],
                    norm_mlp: vec![0.0; b.norm_mlp.len()],
                })
                .collect(),
            norm_final: vec![0.0; w.norm_final.len()],
            w_out: vec![0.0; w.w_out.data.len()],
        }
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        out.push(&mut self.embed);
        if let Some(pos) = &mut self.pos {
            out.push(pos);
        }
        for b in &mut self.blocks {
            out.push(&mut b.w_q);
            out.push(&mut b.w_k);
            out.push(&mut b.w_v);
            out.push(&mut b.w_o);
            out.push(&mut b.w_u);
            out.push(&mut b.w_g);
            out.push(&mut b.w_d);
            out.push(&mut b.norm_attn);
            out.push(&mut b.norm_mlp);
        }
        out.push(&mut self.norm_final);
        out.push(&mut self.w_out);
        out
    }
}

fn rms_backward(x: &[f32], gain: &[f32], dy: &[f32], eps: f64, dx: &mut [f32], dgain: &mut [f32]) {
    let d = x.len();
    let ms: f64 = x.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>() / d as f64;
    let r = (ms + eps).sqrt();
    let r3 = r * r * r;
    let mut inner = 0.0f64;
    for i in 0..d {
        inner += dy[i] as f64 * gain[i] as f64 * x[i] as f64;
    }
    for i in 0..d {
        let s = dy[i] as f64 * gain[i] as f64;
        dx[i] = (s / r - x[i] as f64 * inner / (d as f64 * r3)) as f32;
        dgain[i] += (dy[i] as f64 * x[i] as f64 / r) as f32;
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Forward with caches plus backward for one sequence; accumulates into
/// `grads` and returns (summed CE, prediction count).
#[allow(clippy::needless_range_loop)]
fn train_sequence(
    w: &ModelWeights,
    config: &ModelConfig,
    tokens: &[u32],
    grads: &mut GradModel,
    inv_total_preds: f32,
) -> (f64, usize) {
    let d = config.d_model;
    let m_dim = config.n_heads * config.head_dim;
    let hd = config.head_dim;
    let p_dim = config.d_mlp;
    let t_len = tokens.len();
    let vocab = config.vocab_size;
    let eps = config.rms_eps;
    let scale = 1.0 / (hd as f32).sqrt();
    let rope = config.rotary().then(|| rope_freqs(hd));

    // forward, caching intermediates
    let mut x0: Vec<Vec<f32>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            let mut row = w.embed.row(t as usize).to_vec();
            if let Some(ptab) = &w.pos {
                for (r, pv) in row.iter_mut().zip(ptab.row(p)) {
                    *r += *pv;
                }
            }
            row
        })
        .collect();
    let mut xs: Vec<Vec<Vec<f32>>> = Vec::with_capacity(config.depth + 1);
    let mut h1s = Vec::with_capacity(config.depth);
    let mut qs = Vec::with_capacity(config.depth);
    let mut ks = Vec::with_capacity(config.depth);
    let mut vs = Vec::with_capacity(config.depth);
    let mut probs_all = Vec::with_capacity(config.depth);
    let mut attns = Vec::with_capacity(config.depth);
    let mut xmids = Vec::with_capacity(config.depth);
    let mut h2s_all = Vec::with_capacity(config.depth);
    let mut us = Vec::with_capacity(config.depth);
    let mut gs = Vec::with_capacity(config.depth);
    let mut acts = Vec::with_capacity(config.depth);

    let matvec = |wm: &WMat, x: &[f32]| -> Vec<f32> {
        let mut out = vec![0.0f32; wm.rows];
        for r in 0..wm.rows {
            let mut acc = 0.0f32;
            for (wv, xv) in wm.row(r).iter().zip(x) {
                acc += wv * xv;
            }
            out[r] = acc;
        }
        out
    };

    for bw in &w.blocks {
        let h1: Vec<Vec<f32>> = x0.iter().map(|r| rms_norm(r, &bw.norm_attn, eps)).collect();
        let mut q: Vec<Vec<f32>> = h1.iter().map(|h| matvec(&bw.w_q, h)).collect();
        let mut k: Vec<Vec<f32>> = h1.iter().map(|h| matvec(&bw.w_k, h)).collect();
        let v: Vec<Vec<f32>> = h1.iter().map(|h| matvec(&bw.w_v, h)).collect();
        if let Some(freqs) = &rope {
            for p in 0..t_len {
                for h in 0..config.n_heads {
                    apply_rope(&mut q[p][h * hd..(h + 1) * hd], freqs, p);
                    apply_rope(&mut k[p][h * hd..(h + 1) * hd], freqs, p);
                }
            }
        }
        // probs[h][t] holds the softmax row over 0..=t
        let mut probs: Vec<Vec<Vec<f32>>> = vec![Vec::with_capacity(t_len); config.n_heads];
        let mut attn = vec![vec![0.0f32; m_dim]; t_len];
        for h in 0..config.n_heads {
            let off = h * hd;
            for t in 0..t_len {
                let mut row: Vec<f32> = (0..=t)
                    .map(|j| {
                        let mut dot = 0.0f32;
                        for (qv, kv) in q[t][off..off + hd].iter().zip(&k[j][off..off + hd]) {
                            dot += qv * kv;
                        }
                        dot * scale
                    })
                    .collect();
                softmax_in_place(&mut row);
                for (j, p) in row.iter().enumerate() {
                    for dl in 0..hd {
                        attn[t][off + dl] += p * v[j][off + dl];
                    }
                }
                probs[h].push(row);
            }
        }
        let mut xmid = x0.clone();
        for t in 0..t_len {
            let o = matvec(&bw.w_o, &attn[t]);
            for (xv, ov) in xmid[t].iter_mut().zip(&o) {
                *xv += *ov;
            }
        }
        let h2: Vec<Vec<f32>> = xmid.iter().map(|r| rms_norm(r, &bw.norm_mlp, eps)).collect();
        let u: Vec<Vec<f32>> = h2.iter().map(|h| matvec(&bw.w_u, h)).collect();
        let g: Vec<Vec<f32>> = h2.iter().map(|h| matvec(&bw.w_g, h)).collect();
        let act: Vec<Vec<f32>> = u
            .iter()
            .zip(&g)
            .map(|(ur, gr)| ur.iter().zip(gr).map(|(uv, gv)| silu(*gv) * uv).collect())
            .collect();
        let mut xout = xmid.clone();
        for t in 0..t_len {
            let dv = matvec(&bw.w_d, &act[t]);
            for (xv, dvv) in xout[t].iter_mut().zip(&dv) {
                *xv += *dvv;
            }
        }
        xs.push(x0);
        h1s.push(h1);
        qs.push(q);
        ks.push(k);
        vs.push(v);
        probs_all.push(probs);
        attns.push(attn);
        xmids.push(xmid);
        h2s_all.push(h2);
        us.push(u);
        gs.push(g);
        acts.push(act);
        x0 = xout;
    }
    let x_last = x0;
    let hf: Vec<Vec<f32>> = x_last.iter().map(|r| rms_norm(r, &w.norm_final, eps)).collect();

    // loss and logit gradients
    let n_preds = t_len - 1;
    let mut loss_sum = 0.0f64;
    let mut dhf = vec![vec![0.0f32; d]; t_len];
    for t in 0..n_preds {
        let mut logits = vec![0.0f32; vocab];
        for d_ix in 0..d {
            let hv = hf[t][d_ix];
            for (lv, wv) in logits.iter_mut().zip(w.w_out.row(d_ix)) {
                *lv += hv * wv;
            }
        }
        let target = tokens[t + 1] as usize;
        let mx = logits.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b));
        let mut sum = 0.0f64;
        for l in &logits {
            sum += ((l - mx) as f64).exp();
        }
        let lse = mx as f64 + sum.ln();
        loss_sum += lse - logits[target] as f64;
        // dlogits = (softmax - onehot) * inv_total_preds
        for v_ix in 0..vocab {
            let p = (((logits[v_ix] - mx) as f64).exp() / sum) as f32;
            let dl = (p - if v_ix == target { 1.0 } else { 0.0 }) * inv_total_preds;
            if dl == 0.0 {
                continue;
            }
            for d_ix in 0..d {
                grads.w_out[d_ix * vocab + v_ix] += hf[t][d_ix] * dl;
                dhf[t][d_ix] += w.w_out.get(d_ix, v_ix) * dl;
            }
        }
    }

    // final norm backward
    let mut dx = vec![vec![0.0f32; d]; t_len];
    for t in 0..t_len {
        let mut dxt = vec![0.0f32; d];
        rms_backward(&x_last[t], &w.norm_final, &dhf[t], eps, &mut dxt, &mut grads.norm_final);
        dx[t] = dxt;
    }

    // blocks in reverse
    for bix in (0..config.depth).rev() {
        let bw = &w.blocks[bix];
        let gb = &mut grads.blocks[bix];
        let xmid = &xmids[bix];
        let h2 = &h2s_all[bix];
        let u = &us[bix];
        let g = &gs[bix];
        let act = &acts[bix];
        // dx is the gradient at x_out = x_mid + W_D act
        let mut dxmid = dx.clone();
        for t in 0..t_len {
            // dact, dW_D
            let mut dact = vec![0.0f32; p_dim];
            for d_ix in 0..d {
                let dv = dx[t][d_ix];
                if dv == 0.0 {
                    continue;
                }
                let row = &mut gb.w_d[d_ix * p_dim..(d_ix + 1) * p_dim];
                for p_ix in 0..p_dim {
                    row[p_ix] += dv * act[t][p_ix];
                    dact[p_ix] += bw.w_d.get(d_ix, p_ix) * dv;
                }
            }
            // through act = silu(g) * u
            let mut du = vec![0.0f32; p_dim];
            let mut dg = vec![0.0f32; p_dim];
            for p_ix in 0..p_dim {
                let gv = g[t][p_ix];
                let s = sigmoid(gv);
                du[p_ix] = dact[p_ix] * gv * s;
                dg[p_ix] = dact[p_ix] * u[t][p_ix] * s * (1.0 + gv * (1.0 - s));
            }
            // dW_U, dW_G, dh2
            let mut dh2 = vec![0.0f32; d];
            for p_ix in 0..p_dim {
                let (duv, dgv) = (du[p_ix], dg[p_ix]);
                if duv != 0.0 {
                    let row = &mut gb.w_u[p_ix * d..(p_ix + 1) * d];
                    for d_ix in 0..d {
                        row[d_ix] += duv * h2[t][d_ix];
                        dh2[d_ix] += bw.w_u.get(p_ix, d_ix) * duv;
                    }
                }
                if dgv != 0.0 {
                    let row = &mut gb.w_g[p_ix * d..(p_ix + 1) * d];
                    for d_ix in 0..d {
                        row[d_ix] += dgv * h2[t][d_ix];
                        dh2[d_ix] += bw.w_g.get(p_ix, d_ix) * dgv;
                    }
                }
            }
            let mut dxm = vec![0.0f32; d];
            rms_backward(&xmid[t], &bw.norm_mlp, &dh2, eps, &mut dxm, &mut gb.norm_mlp);
            for d_ix in 0..d {
                dxmid[t][d_ix] += dxm[d_ix];
            }
        }
        // attention half: x_mid = x_in + W_O attn
        let attn = &attns[bix];
        let h1 = &h1s[bix];
        let (q, k, v) = (&qs[bix], &ks[bix], &vs[bix]);
        let probs = &probs_all[bix];
        let mut dattn = vec![vec![0.0f32; m_dim]; t_len];
        for t in 0..t_len {
            for d_ix in 0..d {
                let dv = dxmid[t][d_ix];
                if dv == 0.0 {
                    continue;
                }
                let row = &mut gb.w_o[d_ix * m_dim..(d_ix + 1) * m_dim];
                for m_ix in 0..m_dim {
                    row[m_ix] += dv * attn[t][m_ix];
                    dattn[t][m_ix] += bw.w_o.get(d_ix, m_ix) * dv;
                }
            }
        }
        let mut dq = vec![vec![0.0f32; m_dim]; t_len];
        let mut dk = vec![vec![0.0f32; m_dim]; t_len];
        let mut dvv = vec![vec![0.0f32; m_dim]; t_len];
        for h in 0..config.n_heads {
            let off = h * hd;
            for t in 0..t_len {
                let prow = &probs[h][t];
                // dp_j and dv accumulation
                let mut dp: Vec<f32> = vec![0.0; t + 1];
                for j in 0..=t {
                    let mut acc = 0.0f32;
                    for dl in 0..hd {
                        acc += dattn[t][off + dl] * v[j][off + dl];
                        dvv[j][off + dl] += prow[j] * dattn[t][off + dl];
                    }
                    dp[j] = acc;
                }
                // softmax backward
                let dot: f32 = prow.iter().zip(&dp).map(|(p, dpv)| p * dpv).sum();
                for j in 0..=t {
                    let dscore = prow[j] * (dp[j] - dot) * scale;
                    if dscore == 0.0 {
                        continue;
                    }
                    for dl in 0..hd {
                        dq[t][off + dl] += dscore * k[j][off + dl];
                        dk[j][off + dl] += dscore * q[t][off + dl];
                    }
                }
            }
        }
        if let Some(freqs) = &rope {
            // rotation is orthogonal; the gradient rotates back
            for p in 0..t_len {
                for h in 0..config.n_heads {
                    let off = h * hd;
                    for (i, f) in freqs.iter().enumerate() {
                        let (sin, cos) = (p as f64 * f).sin_cos();
                        let (sin, cos) = (sin as f32, cos as f32);
                        for grad in [&mut dq[p], &mut dk[p]] {
                            let a = grad[off + 2 * i];
                            let b = grad[off + 2 * i + 1];
                            grad[off + 2 * i] = a * cos + b * sin;
                            grad[off + 2 * i + 1] = -a * sin + b * cos;
                        }
                    }
                }
            }
        }
        // projections back to h1
        let x_in = &xs[bix];
        for t in 0..t_len {
            let mut dh1 = vec![0.0f32; d];
            for (wm, gm, dout) in [
                (&bw.w_q, &mut gb.w_q, &dq[t]),
                (&bw.w_k, &mut gb.w_k, &dk[t]),
                (&bw.w_v, &mut gb.w_v, &dvv[t]),
            ] {
                for m_ix in 0..m_dim {
                    let dv = dout[m_ix];
                    if dv == 0.0 {
                        continue;
                    }
                    let row = &mut gm[m_ix * d..(m_ix + 1) * d];
                    for d_ix in 0..d {
                        row[d_ix] += dv * h1[t][d_ix];
                        dh1[d_ix] += wm.get(m_ix, d_ix) * dv;
                    }
                }
            }
            let mut dxin = vec![0.0f32; d];
            rms_backward(&x_in[t], &bw.norm_attn, &dh1, eps, &mut dxin, &mut gb.norm_attn);
            for d_ix in 0..d {
                dxmid[t][d_ix] += dxin[d_ix];
            }
        }
        dx = dxmid;
    }

    // embedding (and positional) gradients
    for (t, &tok) in tokens.iter().enumerate() {
        let row = &mut grads.embed[tok as usize * d..(tok as usize + 1) * d];
        for d_ix in 0..d {
            row[d_ix] += dx[t][d_ix];
        }
        if let Some(pg) = &mut grads.pos {
            let prow = &mut pg[t * d..(t + 1) * d];
            for d_ix in 0..d {
                prow[d_ix] += dx[t][d_ix];
            }
        }
    }
    (loss_sum, n_preds)
}

struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u32,
}

impl AdamState {
    fn new(w: &ModelWeights) -> Self {
        let sizes: Vec<usize> = w.tensor_entries().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            m: sizes.iter().map(|s| vec![0.0; *s]).collect(),
            v: sizes.iter().map(|s| vec![0.0; *s]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, w: &mut ModelWeights, g: &mut GradModel, lr: f32) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.99;
        const EPS: f32 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        let weights = w.tensors_mut();
        let grads = g.tensors_mut();
        for (((wt, gt), mt), vt) in weights.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v)
        {
            for i in 0..wt.len() {
                let gv = gt[i];
                mt[i] = B1 * mt[i] + (1.0 - B1) * gv;
                vt[i] = B2 * vt[i] + (1.0 - B2) * gv * gv;
                let mhat = mt[i] / bc1;
                let vhat = vt[i] / bc2;
                wt[i] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

/// Train the toy model on a corpus with Adam; deterministic per seed.
pub fn train_toy_lm(
    config: &ModelConfig,
    corpus: &Corpus,
    settings: &TrainerSettings,
) -> Result<(ModelWeights, TrainReport)> {
    config.validate()?;
    if corpus.len() < settings.seq_len {
        return Err(Error::CorpusTooShort { have: corpus.len(), need: settings.seq_len });
    }
    for &id in &corpus.ids {
        if id as usize >= config.vocab_size {
            return Err(Error::TokenOutOfRange { id, vocab: config.vocab_size });
        }
    }
    assert!(settings.seq_len >= 2 && settings.seq_len <= config.max_seq_len);
    let mut weights = init_weights(config, settings.seed);
    let mut grads = GradModel::zeros_like(&weights);
    let mut adam = AdamState::new(&weights);
    let mut rng = derive_rng(settings.seed, &["train-batches"]);
    let max_start = corpus.len() - settings.seq_len;
    let mut losses = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        grads.zero();
        let total_preds = (settings.batch * (settings.seq_len - 1)) as f32;
        let mut loss_sum = 0.0f64;
        let mut preds = 0usize;
        for _ in 0..settings.batch {
            let start = rng.gen_range(0..=max_start);
            let seq = &corpus.ids[start..start + settings.seq_len];
            let (l, n) = train_sequence(&weights, config, seq, &mut grads, 1.0 / total_preds);
            loss_sum += l;
            preds += n;
        }
        let loss = loss_sum / preds as f64;
        if !loss.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        losses.push(loss);
        adam.step(&mut weights, &mut grads, settings.lr as f32);
    }
    Ok((weights, TrainReport { losses }))
}
