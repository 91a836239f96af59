//! Decoder-only transformer over the byte vocabulary: pre-norm parallel
//! blocks (`x + attn(ln(x)) + mlp(ln(x))`), rotary multi-query attention,
//! SwiGLU MLP, untied output projection. The backward pass is hand-derived.
//!
//! All weight matrices are stored `in x out`, so a projection is `y = x W`.
//! Sequences of a batch are packed into one token matrix; attention runs per
//! segment, projections run over the whole pack.

use std::fmt::Debug;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::TrainingBatch;
use crate::token::{TokenId, MASK, VOCAB_SIZE};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
/// Upper clamp on p in the unlikelihood term `-log(1 - p)`.
pub const UNLIKELIHOOD_MAX_P: f64 = 1.0 - 1e-6;
pub const ACTIVATION: &str = "swiglu";

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("head_dim {0} is odd; rotary embeddings need pairs")]
    OddHeadDim(usize),
    #[error("sequence of {len} positions exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("batch has no nonzero loss weights")]
    NoTrainableTokens,
    #[error("token id {0} outside the vocabulary")]
    TokenOutOfRange(TokenId),
    #[error("empty input sequence")]
    EmptySequence,
    #[error("parameter vector has {got} values, config needs {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

/// Float type the model can run in. `f32` for training, `f64` for gradient checks.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    /// `C = alpha * A B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Every index reached through the strides must be in bounds and `c`
    /// must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[inline]
fn s<T: Scalar>(x: f64) -> T {
    T::from(x).expect("representable constant")
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
struct Mat<'a, T> {
    data: &'a [T],
    rs: usize,
    cs: usize,
}

/// Row-major `? x cols` matrix.
fn rm<T>(data: &[T], cols: usize) -> Mat<'_, T> {
    Mat { data, rs: cols, cs: 1 }
}

/// Transpose of a row-major `? x cols` matrix.
fn tr<T>(data: &[T], cols: usize) -> Mat<'_, T> {
    Mat { data, rs: 1, cs: cols }
}

fn assert_fits(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    assert!((rows - 1) * rs + (cols - 1) * cs < len, "gemm view out of bounds");
}

/// `C[m x n] = alpha * A[m x k] B[k x n] + beta * C`, C row-major with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(m: usize, k: usize, n: usize, alpha: T, a: Mat<T>, b: Mat<T>, beta: T, c: &mut [T], rsc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    assert_fits(c.len(), m, n, rsc, 1);
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * rsc..i * rsc + n] {
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    assert_fits(a.data.len(), m, k, a.rs, a.cs);
    assert_fits(b.data.len(), k, n, b.rs, b.cs);
    // SAFETY: bounds checked above; `c` is a unique borrow so it cannot alias.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    #[serde(default = "one")]
    pub kv_heads: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    pub max_seq: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Hidden width of the gated MLP.
    pub d_ff: usize,
}

fn one() -> usize {
    1
}
fn default_vocab() -> usize {
    VOCAB_SIZE
}
fn default_rope_base() -> f64 {
    10000.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(64, 2, 4, 256)
    }
}

impl ModelConfig {
    /// Multi-query config with `head_dim = d_model / n_heads` and `d_ff = 4 d_model`.
    pub fn new(d_model: usize, n_layers: usize, n_heads: usize, max_seq: usize) -> Self {
        ModelConfig {
            d_model,
            n_layers,
            n_heads,
            head_dim: d_model / n_heads.max(1),
            kv_heads: 1,
            vocab: VOCAB_SIZE,
            max_seq,
            rope_base: default_rope_base(),
            d_ff: 4 * d_model,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_seq == 0 || self.d_ff == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.n_heads * self.head_dim != self.d_model {
            return bad(format!("n_heads {} x head_dim {} != d_model {}", self.n_heads, self.head_dim, self.d_model));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(ModelError::OddHeadDim(self.head_dim));
        }
        if self.kv_heads == 0 || self.kv_heads > self.n_heads || !self.n_heads.is_multiple_of(self.kv_heads) {
            return bad(format!("kv_heads {} must divide n_heads {}", self.kv_heads, self.n_heads));
        }
        if self.vocab < VOCAB_SIZE {
            return bad(format!("vocab {} smaller than the byte vocabulary {VOCAB_SIZE}", self.vocab));
        }
        if !(self.rope_base > 1.0) {
            return bad(format!("rope_base must exceed 1, got {}", self.rope_base));
        }
        Ok(())
    }

    fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }
}

#[derive(Debug, Clone)]
pub struct LayerOffsets {
    pub ln_gain: usize,
    pub ln_bias: usize,
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
    pub gate: usize,
    pub up: usize,
    pub down: usize,
}

/// Start of every tensor in the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Offsets {
    pub embed: usize,
    pub layers: Vec<LayerOffsets>,
    pub final_gain: usize,
    pub final_bias: usize,
    pub unembed: usize,
    pub total: usize,
}

impl Offsets {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, v, f, kvd) = (cfg.d_model, cfg.vocab, cfg.d_ff, cfg.kv_dim());
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let embed = take(v * d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerOffsets {
                ln_gain: take(d),
                ln_bias: take(d),
                q: take(d * d),
                k: take(d * kvd),
                v: take(d * kvd),
                o: take(d * d),
                gate: take(d * f),
                up: take(d * f),
                down: take(f * d),
            })
            .collect();
        let final_gain = take(d);
        let final_bias = take(d);
        let unembed = take(d * v);
        Offsets { embed, layers, final_gain, final_bias, unembed, total: at }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Tensor names, shapes and offsets in declaration order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let o = Offsets::new(cfg);
    let (d, v, f, kvd) = (cfg.d_model, cfg.vocab, cfg.d_ff, cfg.kv_dim());
    let t = |name: String, shape: Vec<usize>, offset| TensorSpec { name, shape, offset };
    let mut out = vec![t("embed".into(), vec![v, d], o.embed)];
    for (l, lo) in o.layers.iter().enumerate() {
        let p = format!("layers.{l}");
        out.push(t(format!("{p}.ln.gain"), vec![d], lo.ln_gain));
        out.push(t(format!("{p}.ln.bias"), vec![d], lo.ln_bias));
        out.push(t(format!("{p}.attn.q"), vec![d, d], lo.q));
        out.push(t(format!("{p}.attn.k"), vec![d, kvd], lo.k));
        out.push(t(format!("{p}.attn.v"), vec![d, kvd], lo.v));
        out.push(t(format!("{p}.attn.o"), vec![d, d], lo.o));
        out.push(t(format!("{p}.mlp.gate"), vec![d, f], lo.gate));
        out.push(t(format!("{p}.mlp.up"), vec![d, f], lo.up));
        out.push(t(format!("{p}.mlp.down"), vec![f, d], lo.down));
    }
    out.push(t("final_ln.gain".into(), vec![d], o.final_gain));
    out.push(t("final_ln.bias".into(), vec![d], o.final_bias));
    out.push(t("unembed".into(), vec![d, v], o.unembed));
    out
}

/// Flat parameter vector plus the config that gives it shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    pub data: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        ModelParams { cfg: cfg.clone(), data: vec![T::zero(); Offsets::new(cfg).total] }
    }

    pub fn from_data(cfg: ModelConfig, data: Vec<T>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let expected = Offsets::new(&cfg).total;
        if data.len() != expected {
            return Err(ModelError::ShapeMismatch { expected, got: data.len() });
        }
        Ok(ModelParams { cfg, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn layout(&self) -> Vec<TensorSpec> {
        param_layout(&self.cfg)
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        let spec = self.layout().into_iter().find(|t| t.name == name)?;
        Some(&self.data[spec.offset..spec.offset + spec.numel()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let spec = self.layout().into_iter().find(|t| t.name == name)?;
        Some(&mut self.data[spec.offset..spec.offset + spec.numel()])
    }

    /// `(tensor name, index within tensor)` for a flat index.
    pub fn locate(&self, flat: usize) -> Option<(String, usize)> {
        self.layout()
            .into_iter()
            .find(|t| flat >= t.offset && flat < t.offset + t.numel())
            .map(|t| (t.name.clone(), flat - t.offset))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            cfg: self.cfg.clone(),
            data: self.data.iter().map(|v| U::from(*v).expect("finite parameter")).collect(),
        }
    }
}

/// Gaussian(0, 0.02) matrices and embeddings, unit gains, zero biases.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    cfg.validate()?;
    let o = Offsets::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut data: Vec<T> = (0..o.total).map(|_| s(normal.sample(&mut rng))).collect();
    let d = cfg.d_model;
    let mut set = |start: usize, v: f64| data[start..start + d].iter_mut().for_each(|x| *x = s(v));
    for lo in &o.layers {
        set(lo.ln_gain, 1.0);
        set(lo.ln_bias, 0.0);
    }
    set(o.final_gain, 1.0);
    set(o.final_bias, 0.0);
    Ok(ModelParams { cfg: cfg.clone(), data })
}

fn inv_freqs(head_dim: usize, base: f64) -> Vec<f64> {
    (0..head_dim / 2).map(|j| base.powf(-((2 * j) as f64) / head_dim as f64)).collect()
}

/// Rotates pairs `(x[2j], x[2j+1])` of one head vector by `position / base^(2j/len)`.
pub fn rope_rotate<T: Scalar>(v: &[T], position: usize, base: f64) -> Result<Vec<T>, ModelError> {
    if !v.len().is_multiple_of(2) {
        return Err(ModelError::OddHeadDim(v.len()));
    }
    let table = RopeTable::new(v.len(), position + 1, base);
    let mut out = v.to_vec();
    table.rotate(&mut out, position, false);
    Ok(out)
}

struct RopeTable<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    fn new(head_dim: usize, positions: usize, base: f64) -> Self {
        let freqs = inv_freqs(head_dim, base);
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for p in 0..positions {
            for f in &freqs {
                let a = p as f64 * f;
                cos.push(s(a.cos()));
                sin.push(s(a.sin()));
            }
        }
        RopeTable { half, cos, sin }
    }

    /// In-place rotation of one head vector; `inverse` applies the transpose.
    fn rotate(&self, x: &mut [T], pos: usize, inverse: bool) {
        let cs = &self.cos[pos * self.half..(pos + 1) * self.half];
        let sn = &self.sin[pos * self.half..(pos + 1) * self.half];
        for j in 0..self.half {
            let (c, s) = (cs[j], if inverse { -sn[j] } else { sn[j] });
            let (a, b) = (x[2 * j], x[2 * j + 1]);
            x[2 * j] = a * c - b * s;
            x[2 * j + 1] = a * s + b * c;
        }
    }

    /// Rotates every head block of a packed `n x width` matrix.
    fn rotate_rows(&self, m: &mut [T], width: usize, head_dim: usize, pos: &[usize], inverse: bool) {
        for (t, row) in m.chunks_mut(width).enumerate() {
            for head in row.chunks_mut(head_dim) {
                self.rotate(head, pos[t], inverse);
            }
        }
    }
}

fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], d: usize, xhat: &mut [T], rstd: &mut [T], y: &mut [T]) {
    let inv_d = s::<T>(1.0 / d as f64);
    for (t, row) in x.chunks(d).enumerate() {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let r = T::one() / (var + s(LN_EPS)).sqrt();
        rstd[t] = r;
        for i in 0..d {
            let xh = (row[i] - mean) * r;
            xhat[t * d + i] = xh;
            y[t * d + i] = gain[i] * xh + bias[i];
        }
    }
}

/// Accumulates parameter grads and adds the input grad into `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    d: usize,
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let inv_d = s::<T>(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for t in 0..rstd.len() {
        let (dyr, xh) = (&dy[t * d..(t + 1) * d], &xhat[t * d..(t + 1) * d]);
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for i in 0..d {
            dgain[i] = dgain[i] + dyr[i] * xh[i];
            dbias[i] = dbias[i] + dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            m1 = m1 + dxhat[i];
            m2 = m2 + dxhat[i] * xh[i];
        }
        m1 = m1 * inv_d;
        m2 = m2 * inv_d;
        for i in 0..d {
            dx[t * d + i] = dx[t * d + i] + rstd[t] * (dxhat[i] - m1 - xh[i] * m2);
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Token stream plus the segment boundaries of the sequences packed into it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PackedBatch {
    /// Model inputs with FCM positions already replaced by MASK.
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub weights: Vec<f32>,
    /// `(start, len)` of each sequence.
    pub segments: Vec<(usize, usize)>,
}

impl PackedBatch {
    /// Appends a sequence with explicit input/target channels.
    pub fn push(&mut self, inputs: &[TokenId], targets: &[TokenId], weights: &[f32]) {
        assert!(inputs.len() == targets.len() && targets.len() == weights.len());
        if inputs.is_empty() {
            return;
        }
        self.segments.push((self.inputs.len(), inputs.len()));
        self.inputs.extend_from_slice(inputs);
        self.targets.extend_from_slice(targets);
        self.weights.extend_from_slice(weights);
    }

    /// Shifts each row: inputs `ids[..n-1]` (FCM applied), targets `ids[1..]`.
    pub fn from_batch(batch: &TrainingBatch) -> Self {
        let mut p = PackedBatch::default();
        for r in 0..batch.rows {
            let row = batch.row(r);
            let n = row.tokens.len();
            if n < 2 {
                continue;
            }
            let inputs: Vec<TokenId> = (0..n - 1).map(|i| if row.fcm[i] { MASK } else { row.tokens[i] }).collect();
            p.push(&inputs, &row.tokens[1..], &row.weights[1..]);
        }
        p
    }

    pub fn trainable_tokens(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }

    fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        if self.inputs.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        for &(_, n) in &self.segments {
            if n > cfg.max_seq {
                return Err(ModelError::SequenceTooLong { len: n, max: cfg.max_seq });
            }
        }
        for &t in self.inputs.iter().chain(&self.targets) {
            if t as usize >= cfg.vocab {
                return Err(ModelError::TokenOutOfRange(t));
            }
        }
        Ok(())
    }
}

struct LayerCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    h: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
}

struct Cache<T> {
    layers: Vec<LayerCache<T>>,
    xhat_f: Vec<T>,
    rstd_f: Vec<T>,
    hf: Vec<T>,
    positions: Vec<usize>,
    /// Offset of each segment's `heads x n x n` block in `probs`.
    prob_offsets: Vec<usize>,
    rope: RopeTable<T>,
}

/// Logits for every position plus the activations needed by backward.
pub struct ForwardOutput<T> {
    pub logits: Vec<T>,
    pub positions: usize,
    pub vocab: usize,
    cache: Cache<T>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn row(&self, t: usize) -> &[T] {
        &self.logits[t * self.vocab..(t + 1) * self.vocab]
    }
}

impl<T> Debug for ForwardOutput<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardOutput").field("positions", &self.positions).field("vocab", &self.vocab).finish()
    }
}

/// Forward pass over one sequence; `fcm[i]` feeds MASK instead of `tokens[i]`.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[TokenId],
    fcm: &[bool],
) -> Result<ForwardOutput<T>, ModelError> {
    assert_eq!(tokens.len(), fcm.len());
    let inputs: Vec<TokenId> = tokens.iter().zip(fcm).map(|(&t, &m)| if m { MASK } else { t }).collect();
    let mut packed = PackedBatch::default();
    let zeros = vec![0.0; inputs.len()];
    packed.push(&inputs, &inputs, &zeros);
    packed.check(&params.cfg)?;
    Ok(run_forward(params, &packed))
}

fn run_forward<T: Scalar>(params: &ModelParams<T>, packed: &PackedBatch) -> ForwardOutput<T> {
    let cfg = &params.cfg;
    let o = Offsets::new(cfg);
    let w = &params.data;
    let (d, f, v, hd) = (cfg.d_model, cfg.d_ff, cfg.vocab, cfg.head_dim);
    let (nh, kvd) = (cfg.n_heads, cfg.kv_dim());
    let group = cfg.n_heads / cfg.kv_heads;
    let n = packed.inputs.len();
    let scale: T = s(1.0 / (hd as f64).sqrt());

    let mut positions = vec![0; n];
    let mut prob_offsets = Vec::with_capacity(packed.segments.len());
    let mut prob_len = 0;
    let mut longest = 0;
    for &(start, len) in &packed.segments {
        for i in 0..len {
            positions[start + i] = i;
        }
        prob_offsets.push(prob_len);
        prob_len += nh * len * len;
        longest = longest.max(len);
    }
    let rope = RopeTable::new(hd, longest, cfg.rope_base);

    let mut x = vec![T::zero(); n * d];
    for (t, &id) in packed.inputs.iter().enumerate() {
        let e = o.embed + id as usize * d;
        x[t * d..(t + 1) * d].copy_from_slice(&w[e..e + d]);
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lo in &o.layers {
        let mut c = LayerCache {
            xhat: vec![T::zero(); n * d],
            rstd: vec![T::zero(); n],
            h: vec![T::zero(); n * d],
            q: vec![T::zero(); n * d],
            k: vec![T::zero(); n * kvd],
            v: vec![T::zero(); n * kvd],
            probs: vec![T::zero(); prob_len],
            ctx: vec![T::zero(); n * d],
            gate: vec![T::zero(); n * f],
            up: vec![T::zero(); n * f],
            act: vec![T::zero(); n * f],
        };
        layer_norm(
            &x,
            &w[lo.ln_gain..lo.ln_gain + d],
            &w[lo.ln_bias..lo.ln_bias + d],
            d,
            &mut c.xhat,
            &mut c.rstd,
            &mut c.h,
        );
        let one = T::one();
        let zero = T::zero();
        gemm(n, d, d, one, rm(&c.h, d), rm(&w[lo.q..], d), zero, &mut c.q, d);
        gemm(n, d, kvd, one, rm(&c.h, d), rm(&w[lo.k..], kvd), zero, &mut c.k, kvd);
        gemm(n, d, kvd, one, rm(&c.h, d), rm(&w[lo.v..], kvd), zero, &mut c.v, kvd);
        rope.rotate_rows(&mut c.q, d, hd, &positions, false);
        rope.rotate_rows(&mut c.k, kvd, hd, &positions, false);

        for (si, &(start, len)) in packed.segments.iter().enumerate() {
            for head in 0..nh {
                let g = head / group;
                let po = prob_offsets[si] + head * len * len;
                let p = &mut c.probs[po..po + len * len];
                let qa = Mat { data: &c.q[start * d + head * hd..], rs: d, cs: 1 };
                let kt = Mat { data: &c.k[start * kvd + g * hd..], rs: 1, cs: kvd };
                gemm(len, hd, len, scale, qa, kt, zero, p, len);
                for t in 0..len {
                    let r = &mut p[t * len..(t + 1) * len];
                    let m = r[..=t].iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let mut sum = T::zero();
                    for e in &mut r[..=t] {
                        *e = (*e - m).exp();
                        sum = sum + *e;
                    }
                    for e in &mut r[..=t] {
                        *e = *e / sum;
                    }
                    for e in &mut r[t + 1..] {
                        *e = T::zero();
                    }
                }
                let va = Mat { data: &c.v[start * kvd + g * hd..], rs: kvd, cs: 1 };
                gemm(len, len, hd, one, rm(p, len), va, zero, &mut c.ctx[start * d + head * hd..], d);
            }
        }
        gemm(n, d, f, one, rm(&c.h, d), rm(&w[lo.gate..], f), zero, &mut c.gate, f);
        gemm(n, d, f, one, rm(&c.h, d), rm(&w[lo.up..], f), zero, &mut c.up, f);
        for i in 0..n * f {
            let g = c.gate[i];
            c.act[i] = g * sigmoid(g) * c.up[i];
        }
        gemm(n, d, d, one, rm(&c.ctx, d), rm(&w[lo.o..], d), one, &mut x, d);
        gemm(n, f, d, one, rm(&c.act, f), rm(&w[lo.down..], d), one, &mut x, d);
        layers.push(c);
    }

    let mut xhat_f = vec![T::zero(); n * d];
    let mut rstd_f = vec![T::zero(); n];
    let mut hf = vec![T::zero(); n * d];
    layer_norm(
        &x,
        &w[o.final_gain..o.final_gain + d],
        &w[o.final_bias..o.final_bias + d],
        d,
        &mut xhat_f,
        &mut rstd_f,
        &mut hf,
    );
    let mut logits = vec![T::zero(); n * v];
    gemm(n, d, v, T::one(), rm(&hf, d), rm(&w[o.unembed..], v), T::zero(), &mut logits, v);

    ForwardOutput {
        logits,
        positions: n,
        vocab: v,
        cache: Cache { layers, xhat_f, rstd_f, hf, positions, prob_offsets, rope },
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    m + row.iter().fold(T::zero(), |a, &z| a + (z - m).exp()).ln()
}

/// Weighted loss over logits, normalized by the number of nonzero weights.
///
/// Weight `w > 0` adds `w * -log p(target)`; `w < 0` adds `|w| * -log(1 - p(target))`
/// with p clamped to at most `1 - 1e-6`. Returns the loss and, if requested, dL/dlogits.
pub fn masked_loss<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[TokenId],
    weights: &[f32],
    want_grad: bool,
) -> Result<(f64, Option<Vec<T>>), ModelError> {
    let count = weights.iter().filter(|&&w| w != 0.0).count();
    if count == 0 {
        return Err(ModelError::NoTrainableTokens);
    }
    let inv_count = 1.0 / count as f64;
    let mut grad = want_grad.then(|| vec![T::zero(); logits.len()]);
    let mut total = 0.0f64;
    for (t, (&y, &wt)) in targets.iter().zip(weights).enumerate() {
        if wt == 0.0 {
            continue;
        }
        let row = &logits[t * vocab..(t + 1) * vocab];
        let lse = log_sum_exp(row);
        let y = y as usize;
        let logp = (row[y] - lse).to_f64().expect("finite");
        let w = (wt as f64).abs();
        if wt > 0.0 {
            total += -w * logp;
            if let Some(g) = grad.as_mut() {
                let scale: T = s(w * inv_count);
                let gr = &mut g[t * vocab..(t + 1) * vocab];
                for (gv, &z) in gr.iter_mut().zip(row) {
                    *gv = (z - lse).exp() * scale;
                }
                gr[y] = gr[y] - scale;
            }
        } else {
            let p = logp.exp();
            if p > UNLIKELIHOOD_MAX_P {
                // Clamped region: constant loss, zero gradient.
                total += -w * (1.0 - UNLIKELIHOOD_MAX_P).ln();
                continue;
            }
            total += -w * (-p).ln_1p();
            if let Some(g) = grad.as_mut() {
                // d/dz_v of -log(1 - p_y) = p_y (delta_vy - p_v) / (1 - p_y)
                let py: T = (row[y] - lse).exp();
                let coef = py / (T::one() - py) * s(w * inv_count);
                let gr = &mut g[t * vocab..(t + 1) * vocab];
                for (gv, &z) in gr.iter_mut().zip(row) {
                    *gv = -coef * (z - lse).exp();
                }
                gr[y] = gr[y] + coef;
            }
        }
    }
    Ok((total * inv_count, grad))
}

/// Mean weighted loss of a packed batch without gradients.
pub fn packed_loss<T: Scalar>(params: &ModelParams<T>, packed: &PackedBatch) -> Result<f64, ModelError> {
    if packed.trainable_tokens() == 0 {
        return Err(ModelError::NoTrainableTokens);
    }
    packed.check(&params.cfg)?;
    let out = run_forward(params, packed);
    Ok(masked_loss(&out.logits, out.vocab, &packed.targets, &packed.weights, false)?.0)
}

pub fn batch_loss<T: Scalar>(params: &ModelParams<T>, batch: &TrainingBatch) -> Result<f64, ModelError> {
    packed_loss(params, &PackedBatch::from_batch(batch))
}

/// Loss for one sequence given separate input and target channels.
pub fn sequence_loss<T: Scalar>(
    params: &ModelParams<T>,
    inputs: &[TokenId],
    targets: &[TokenId],
    weights: &[f32],
) -> Result<f64, ModelError> {
    let mut p = PackedBatch::default();
    p.push(inputs, targets, weights);
    packed_loss(params, &p)
}

pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    batch: &TrainingBatch,
) -> Result<(f64, ModelParams<T>), ModelError> {
    packed_loss_and_grads(params, &PackedBatch::from_batch(batch))
}

pub fn packed_loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    packed: &PackedBatch,
) -> Result<(f64, ModelParams<T>), ModelError> {
    if packed.trainable_tokens() == 0 {
        return Err(ModelError::NoTrainableTokens);
    }
    packed.check(&params.cfg)?;
    let out = run_forward(params, packed);
    let (loss, dlogits) = masked_loss(&out.logits, out.vocab, &packed.targets, &packed.weights, true)?;
    let grads = backward(params, packed, &out, &dlogits.expect("requested"));
    Ok((loss, grads))
}

fn backward<T: Scalar>(
    params: &ModelParams<T>,
    packed: &PackedBatch,
    out: &ForwardOutput<T>,
    dlogits: &[T],
) -> ModelParams<T> {
    let cfg = &params.cfg;
    let o = Offsets::new(cfg);
    let w = &params.data;
    let cache = &out.cache;
    let (d, f, v, hd) = (cfg.d_model, cfg.d_ff, cfg.vocab, cfg.head_dim);
    let (nh, kvd) = (cfg.n_heads, cfg.kv_dim());
    let group = cfg.n_heads / cfg.kv_heads;
    let n = packed.inputs.len();
    let scale: T = s(1.0 / (hd as f64).sqrt());
    let (one, zero) = (T::one(), T::zero());
    let mut g = vec![T::zero(); o.total];

    // unembed and final norm
    gemm(d, n, v, one, tr(&cache.hf, d), rm(dlogits, v), zero, &mut g[o.unembed..], v);
    let mut dhf = vec![zero; n * d];
    gemm(n, v, d, one, rm(dlogits, v), tr(&w[o.unembed..o.unembed + d * v], v), zero, &mut dhf, d);
    let mut dx = vec![zero; n * d];
    {
        let (gg, gb) = split_pair(&mut g, o.final_gain, o.final_bias, d);
        layer_norm_backward(&dhf, &cache.xhat_f, &cache.rstd_f, &w[o.final_gain..o.final_gain + d], d, gg, gb, &mut dx);
    }

    let mut dh = vec![zero; n * d];
    let mut dact = vec![zero; n * f];
    let mut dgate = vec![zero; n * f];
    let mut dup = vec![zero; n * f];
    let mut dctx = vec![zero; n * d];
    let mut dq = vec![zero; n * d];
    let mut dk = vec![zero; n * kvd];
    let mut dv = vec![zero; n * kvd];
    let longest = packed.segments.iter().map(|s| s.1).max().unwrap_or(0);
    let mut dp = vec![zero; longest * longest];

    for (lo, c) in o.layers.iter().zip(&cache.layers).rev() {
        // MLP branch
        gemm(f, n, d, one, tr(&c.act, f), rm(&dx, d), zero, &mut g[lo.down..], d);
        gemm(n, d, f, one, rm(&dx, d), tr(&w[lo.down..lo.down + f * d], d), zero, &mut dact, f);
        for i in 0..n * f {
            let gt = c.gate[i];
            let sg = sigmoid(gt);
            dup[i] = dact[i] * gt * sg;
            dgate[i] = dact[i] * c.up[i] * sg * (one + gt * (one - sg));
        }
        gemm(d, n, f, one, tr(&c.h, d), rm(&dgate, f), zero, &mut g[lo.gate..], f);
        gemm(d, n, f, one, tr(&c.h, d), rm(&dup, f), zero, &mut g[lo.up..], f);
        gemm(n, f, d, one, rm(&dgate, f), tr(&w[lo.gate..lo.gate + d * f], f), zero, &mut dh, d);
        gemm(n, f, d, one, rm(&dup, f), tr(&w[lo.up..lo.up + d * f], f), one, &mut dh, d);

        // attention branch
        gemm(d, n, d, one, tr(&c.ctx, d), rm(&dx, d), zero, &mut g[lo.o..], d);
        gemm(n, d, d, one, rm(&dx, d), tr(&w[lo.o..lo.o + d * d], d), zero, &mut dctx, d);
        dq.iter_mut().for_each(|x| *x = zero);
        dk.iter_mut().for_each(|x| *x = zero);
        dv.iter_mut().for_each(|x| *x = zero);
        for (si, &(start, len)) in packed.segments.iter().enumerate() {
            for head in 0..nh {
                let gi = head / group;
                let po = cache.prob_offsets[si] + head * len * len;
                let p = &c.probs[po..po + len * len];
                let dpm = &mut dp[..len * len];
                let qo = start * d + head * hd;
                let ko = start * kvd + gi * hd;
                let dctx_h = Mat { data: &dctx[qo..], rs: d, cs: 1 };
                gemm(len, hd, len, one, dctx_h, Mat { data: &c.v[ko..], rs: 1, cs: kvd }, zero, dpm, len);
                gemm(len, len, hd, one, tr(p, len), dctx_h, one, &mut dv[ko..], kvd);
                for t in 0..len {
                    let pr = &p[t * len..(t + 1) * len];
                    let dr = &mut dpm[t * len..(t + 1) * len];
                    let dot = (0..=t).fold(zero, |a, u| a + pr[u] * dr[u]);
                    for u in 0..len {
                        dr[u] = pr[u] * (dr[u] - dot);
                    }
                }
                gemm(
                    len,
                    len,
                    hd,
                    scale,
                    rm(dpm, len),
                    Mat { data: &c.k[ko..], rs: kvd, cs: 1 },
                    one,
                    &mut dq[qo..],
                    d,
                );
                gemm(
                    len,
                    len,
                    hd,
                    scale,
                    tr(dpm, len),
                    Mat { data: &c.q[qo..], rs: d, cs: 1 },
                    one,
                    &mut dk[ko..],
                    kvd,
                );
            }
        }
        cache.rope.rotate_rows(&mut dq, d, hd, &cache.positions, true);
        cache.rope.rotate_rows(&mut dk, kvd, hd, &cache.positions, true);
        gemm(d, n, d, one, tr(&c.h, d), rm(&dq, d), zero, &mut g[lo.q..], d);
        gemm(d, n, kvd, one, tr(&c.h, d), rm(&dk, kvd), zero, &mut g[lo.k..], kvd);
        gemm(d, n, kvd, one, tr(&c.h, d), rm(&dv, kvd), zero, &mut g[lo.v..], kvd);
        gemm(n, d, d, one, rm(&dq, d), tr(&w[lo.q..lo.q + d * d], d), one, &mut dh, d);
        gemm(n, kvd, d, one, rm(&dk, kvd), tr(&w[lo.k..lo.k + d * kvd], kvd), one, &mut dh, d);
        gemm(n, kvd, d, one, rm(&dv, kvd), tr(&w[lo.v..lo.v + d * kvd], kvd), one, &mut dh, d);

        // shared pre-norm; residual gradient already sits in dx
        let (gg, gb) = split_pair(&mut g, lo.ln_gain, lo.ln_bias, d);
        layer_norm_backward(&dh, &c.xhat, &c.rstd, &w[lo.ln_gain..lo.ln_gain + d], d, gg, gb, &mut dx);
    }

    for (t, &id) in packed.inputs.iter().enumerate() {
        let e = o.embed + id as usize * d;
        for i in 0..d {
            g[e + i] = g[e + i] + dx[t * d + i];
        }
    }
    ModelParams { cfg: cfg.clone(), data: g }
}

/// Two disjoint `d`-long windows of `g` (gain first, bias second).
fn split_pair<T>(g: &mut [T], a: usize, b: usize, d: usize) -> (&mut [T], &mut [T]) {
    assert!(a + d <= b);
    let (left, right) = g.split_at_mut(b);
    (&mut left[a..a + d], &mut right[..d])
}

/// Logits for the position after the last token.
pub fn next_token_logits<T: Scalar>(params: &ModelParams<T>, tokens: &[TokenId]) -> Result<Vec<T>, ModelError> {
    let out = forward(params, tokens, &vec![false; tokens.len()])?;
    Ok(out.row(out.positions - 1).to_vec())
}

/// `log p(tokens[i+1] | tokens[..=i])` for every `i`.
pub fn token_logprobs<T: Scalar>(params: &ModelParams<T>, tokens: &[TokenId]) -> Result<Vec<f64>, ModelError> {
    if tokens.len() < 2 {
        return Ok(Vec::new());
    }
    let inputs = &tokens[..tokens.len() - 1];
    let out = forward(params, inputs, &vec![false; inputs.len()])?;
    Ok((0..inputs.len())
        .map(|t| {
            let row = out.row(t);
            (row[tokens[t + 1] as usize] - log_sum_exp(row)).to_f64().expect("finite")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::{BOS, EOS};
    use rand::Rng;

    fn small(kv: usize) -> ModelConfig {
        let mut c = ModelConfig::new(16, 2, 4, 32);
        c.kv_heads = kv;
        c.d_ff = 24;
        c
    }

    fn random_tokens(n: usize, seed: u64) -> Vec<TokenId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..256)).collect()
    }

    #[test]
    fn layout_is_contiguous() {
        let cfg = small(1);
        let layout = param_layout(&cfg);
        let mut at = 0;
        for t in &layout {
            assert_eq!(t.offset, at, "{}", t.name);
            at += t.numel();
        }
        assert_eq!(at, Offsets::new(&cfg).total);
        assert_eq!(layout.len(), 1 + 9 * cfg.n_layers + 3);
        assert_eq!(layout[0].name, "embed");
        assert_eq!(layout.last().unwrap().name, "unembed");
    }

    #[test]
    fn config_validation() {
        let mut c = small(1);
        c.head_dim = 5;
        c.n_heads = 3;
        c.d_model = 15;
        assert_eq!(c.validate(), Err(ModelError::OddHeadDim(5)));
        let mut c = small(3);
        assert!(c.validate().is_err());
        c.kv_heads = 2;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn init_determinism_and_stats() {
        let cfg = ModelConfig::new(64, 2, 4, 64);
        let a: ModelParams<f32> = init_params(&cfg, 7).unwrap();
        let b: ModelParams<f32> = init_params(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c: ModelParams<f32> = init_params(&cfg, 8).unwrap();
        assert_ne!(a, c);
        assert!(a.tensor("layers.0.ln.gain").unwrap().iter().all(|&g| g == 1.0));
        assert!(a.tensor("final_ln.gain").unwrap().iter().all(|&g| g == 1.0));
        assert!(a.tensor("layers.1.ln.bias").unwrap().iter().all(|&g| g == 0.0));
        let emb = a.tensor("embed").unwrap();
        let n = 100_000.min(emb.len());
        let mean = emb[..n].iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * 0.02 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn rope_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(rope_rotate(&q, 0, 10000.0).unwrap(), q);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for pos in [1, 7, 100] {
            assert!((norm(&rope_rotate(&q, pos, 10000.0).unwrap()) - norm(&q)).abs() < 1e-6);
        }
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for delta in [0usize, 3, 11] {
            let base = dot(&rope_rotate(&q, delta, 1e4).unwrap(), &rope_rotate(&k, 0, 1e4).unwrap());
            for m in [5usize, 20, 40] {
                let other = dot(&rope_rotate(&q, m + delta, 1e4).unwrap(), &rope_rotate(&k, m, 1e4).unwrap());
                assert!((base - other).abs() < 1e-9, "{base} vs {other}");
            }
        }
        assert_eq!(rope_rotate(&q[..5], 1, 1e4), Err(ModelError::OddHeadDim(5)));
    }

    #[test]
    fn softmax_rows_and_causality() {
        let cfg = small(1);
        let p: ModelParams<f64> = init_params(&cfg, 3).unwrap();
        let toks = random_tokens(12, 4);
        let out = forward(&p, &toks, &[false; 12]).unwrap();
        for t in 0..12 {
            let row = out.row(t);
            let lse = log_sum_exp(row);
            let sum: f64 = row.iter().map(|z| (z - lse).exp()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        let mut pert = toks.clone();
        pert[7] = (pert[7] + 1) % 256;
        let out2 = forward(&p, &pert, &[false; 12]).unwrap();
        assert_eq!(out.logits[..7 * cfg.vocab], out2.logits[..7 * cfg.vocab]);
        assert_ne!(out.logits[7 * cfg.vocab..], out2.logits[7 * cfg.vocab..]);
    }

    #[test]
    fn too_long_and_out_of_range() {
        let cfg = small(1);
        let p: ModelParams<f32> = init_params(&cfg, 0).unwrap();
        let toks = random_tokens(33, 0);
        assert_eq!(forward(&p, &toks, &[false; 33]).unwrap_err(), ModelError::SequenceTooLong { len: 33, max: 32 });
        assert_eq!(forward(&p, &[999], &[false]).unwrap_err(), ModelError::TokenOutOfRange(999));
    }

    #[test]
    fn fcm_feeds_mask_embedding() {
        let cfg = small(1);
        let p: ModelParams<f64> = init_params(&cfg, 3).unwrap();
        let toks = random_tokens(8, 5);
        let mut fcm = [false; 8];
        fcm[3] = true;
        let a = forward(&p, &toks, &fcm).unwrap();
        let mut masked = toks.clone();
        masked[3] = MASK;
        let b = forward(&p, &masked, &[false; 8]).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn mqa_matches_mha_with_duplicated_kv() {
        let mqa_cfg = small(1);
        let mha_cfg = small(4);
        let mqa: ModelParams<f64> = init_params(&mqa_cfg, 11).unwrap();
        let mut mha: ModelParams<f64> = ModelParams::zeros(&mha_cfg);
        let (d, hd) = (16, 4);
        for t in mqa.layout() {
            let src = mqa.tensor(&t.name).unwrap();
            if t.name.ends_with("attn.k") || t.name.ends_with("attn.v") {
                let dst = mha.tensor_mut(&t.name).unwrap();
                for r in 0..d {
                    for h in 0..4 {
                        dst[r * d + h * hd..r * d + (h + 1) * hd].copy_from_slice(&src[r * hd..(r + 1) * hd]);
                    }
                }
            } else {
                mha.tensor_mut(&t.name).unwrap().copy_from_slice(src);
            }
        }
        let toks = random_tokens(10, 9);
        let a = forward(&mqa, &toks, &[false; 10]).unwrap();
        let b = forward(&mha, &toks, &[false; 10]).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn packing_matches_separate_sequences() {
        let cfg = small(1);
        let p: ModelParams<f64> = init_params(&cfg, 2).unwrap();
        let a = random_tokens(6, 1);
        let b = random_tokens(9, 2);
        let mut packed = PackedBatch::default();
        packed.push(&a, &a, &[0.0; 6]);
        packed.push(&b, &b, &[0.0; 9]);
        let out = run_forward(&p, &packed);
        let fa = forward(&p, &a, &[false; 6]).unwrap();
        let fb = forward(&p, &b, &[false; 9]).unwrap();
        let v = cfg.vocab;
        for (x, y) in out.logits[..6 * v].iter().zip(&fa.logits) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in out.logits[6 * v..].iter().zip(&fb.logits) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn no_trainable_tokens() {
        let cfg = small(1);
        let p: ModelParams<f32> = init_params(&cfg, 0).unwrap();
        let toks = [BOS, 65, 66, EOS];
        assert_eq!(sequence_loss(&p, &toks[..3], &toks[1..], &[0.0; 3]).unwrap_err(), ModelError::NoTrainableTokens);
    }

    #[test]
    fn unlikelihood_clamp_is_finite() {
        let mut logits = vec![0.0f64; VOCAB_SIZE];
        logits[5] = 100.0;
        let (loss, grad) = masked_loss(&logits, VOCAB_SIZE, &[5], &[-1.0], true).unwrap();
        assert!((loss - -(1e-6f64).ln()).abs() < 1e-9);
        assert!(grad.unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small(1);
        let p: ModelParams<f32> = init_params(&cfg, 5).unwrap();
        let toks = random_tokens(20, 3);
        let a = forward(&p, &toks, &[false; 20]).unwrap();
        let b = forward(&p, &toks, &[false; 20]).unwrap();
        assert_eq!(a.logits, b.logits);
    }
}
