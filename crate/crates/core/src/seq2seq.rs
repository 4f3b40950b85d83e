//! Attention encoder-decoder over frame symbols.
//!
//! Embedding -> bidirectional GRU encoder -> GRU decoder fed with the previous
//! token embedding and the previous attention context -> single-head
//! inner-product attention -> affine output layer over `[state; context]`.
//! Gradients are exact: the forward pass keeps its activations and the
//! backward pass walks them in reverse.

use crate::error::{Error, Result};
use crate::hash::hash_hex;
use crate::math::{log_softmax_in_place, sigmoid};
use crate::rng::Rng;
use crate::types::{TokenId, TokenSeq, Utterance, Vocab};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub attention_dim: usize,
    pub vocab: Vocab,
    pub obs_alphabet_size: usize,
    /// Mass spread uniformly over the vocabulary in the training target.
    pub label_smoothing: f64,
}

impl ModelConfig {
    pub fn new(vocab: Vocab, obs_alphabet_size: usize) -> Self {
        ModelConfig {
            embed_dim: 16,
            encoder_hidden: 32,
            decoder_hidden: 32,
            attention_dim: 16,
            vocab,
            obs_alphabet_size,
            label_smoothing: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_dim,
            self.encoder_hidden,
            self.decoder_hidden,
            self.attention_dim,
            self.obs_alphabet_size,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidModel("all dimensions must be at least 1".into()));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::InvalidModel(format!(
                "label_smoothing {} outside [0, 0.5)",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    /// Stable textual form; the basis of [`ModelConfig::hash`].
    pub fn canonical(&self) -> String {
        format!(
            "embed_dim={};encoder_hidden={};decoder_hidden={};attention_dim={};obs_alphabet_size={};label_smoothing={:?};eos={};vocab={}",
            self.embed_dim,
            self.encoder_hidden,
            self.decoder_hidden,
            self.attention_dim,
            self.obs_alphabet_size,
            self.label_smoothing,
            self.vocab.eos_id(),
            self.vocab.tokens().join(","),
        )
    }

    pub fn hash(&self) -> String {
        hash_hex(self.canonical().as_bytes())
    }

    fn annotation_dim(&self) -> usize {
        2 * self.encoder_hidden
    }

    fn decoder_input_dim(&self) -> usize {
        self.embed_dim + self.annotation_dim()
    }

    fn output_input_dim(&self) -> usize {
        self.decoder_hidden + self.annotation_dim()
    }

    /// `(name, shape)` for every tensor, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (e, h, d, a) = (
            self.embed_dim,
            self.encoder_hidden,
            self.decoder_hidden,
            self.attention_dim,
        );
        let v = self.vocab.size();
        vec![
            ("enc.embed", vec![self.obs_alphabet_size, e]),
            ("enc.fwd.w", vec![3 * h, e]),
            ("enc.fwd.u", vec![3 * h, h]),
            ("enc.fwd.b", vec![3 * h]),
            ("enc.bwd.w", vec![3 * h, e]),
            ("enc.bwd.u", vec![3 * h, h]),
            ("enc.bwd.b", vec![3 * h]),
            ("att.key", vec![a, 2 * h]),
            ("att.query", vec![a, d]),
            ("dec.embed", vec![v, e]),
            ("dec.w", vec![3 * d, self.decoder_input_dim()]),
            ("dec.u", vec![3 * d, d]),
            ("dec.b", vec![3 * d]),
            ("out.w", vec![v, self.output_input_dim()]),
            ("out.b", vec![v]),
        ]
    }
}

// Tensor indices into `ModelConfig::tensor_shapes`.
const ENC_EMBED: usize = 0;
const ENC_FWD: usize = 1;
const ENC_BWD: usize = 4;
const ATT_KEY: usize = 7;
const ATT_QUERY: usize = 8;
const DEC_EMBED: usize = 9;
const DEC_GRU: usize = 10;
const OUT_W: usize = 13;
const OUT_B: usize = 14;
const N_TENSORS: usize = 15;

fn offsets(config: &ModelConfig) -> ([usize; N_TENSORS + 1], [&'static str; N_TENSORS]) {
    let mut off = [0usize; N_TENSORS + 1];
    let mut names = [""; N_TENSORS];
    for (i, (name, shape)) in config.tensor_shapes().into_iter().enumerate() {
        names[i] = name;
        off[i + 1] = off[i] + shape.iter().product::<usize>();
    }
    (off, names)
}

/// Flat parameter storage with named row-major tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    config: ModelConfig,
    offsets: [usize; N_TENSORS + 1],
    data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (offsets, _) = offsets(config);
        Ok(ParamVector {
            config: config.clone(),
            offsets,
            data: vec![0.0; offsets[N_TENSORS]],
        })
    }

    /// Uniform(-0.08, 0.08) everywhere except a zero output bias.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = ParamVector::zeros(config)?;
        for v in p.data.iter_mut() {
            *v = rng.uniform(-0.08, 0.08);
        }
        p.tensor_mut_at(OUT_B).fill(0.0);
        Ok(p)
    }

    /// Builds parameters from named tensors; every tensor of the layout must be
    /// present exactly once with the expected shape and finite values.
    pub fn from_tensors(
        config: &ModelConfig,
        tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut p = ParamVector::zeros(config)?;
        let shapes = config.tensor_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::InvalidModel(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (name, shape, values) in tensors {
            let idx = shapes
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::InvalidModel(format!("unknown tensor `{name}`")))?;
            if shapes[idx].1 != shape {
                return Err(Error::InvalidModel(format!("tensor `{name}` has wrong shape")));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("tensor `{name}` has non-finite entries")));
            }
            let dst = p.tensor_mut_at(idx);
            if dst.len() != values.len() {
                return Err(Error::ShapeMismatch {
                    expected: dst.len(),
                    found: values.len(),
                });
            }
            dst.copy_from_slice(&values);
        }
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn total_count(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn tensor_at(&self, i: usize) -> &[f64] {
        &self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    fn tensor_mut_at(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let (_, names) = offsets(&self.config);
        names.iter().position(|n| *n == name).map(|i| self.tensor_at(i))
    }

    /// `(name, shape, values)` in storage order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        self.config
            .tensor_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| (name, shape, self.tensor_at(i)))
            .collect()
    }

    fn check_same_shape(&self, other: &ParamVector) -> Result<()> {
        if self.data.len() != other.data.len() || self.config != other.config {
            return Err(Error::ShapeMismatch {
                expected: self.data.len(),
                found: other.data.len(),
            });
        }
        Ok(())
    }

    /// `self <- self - lr * grad`.
    pub fn sgd_update(&mut self, grad: &ParamVector, lr: f64) -> Result<()> {
        self.check_same_shape(grad)?;
        for (p, g) in self.data.iter_mut().zip(&grad.data) {
            *p -= lr * g;
        }
        Ok(())
    }

    /// `self <- self + scale * other`.
    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (p, g) in self.data.iter_mut().zip(&other.data) {
            *p += scale * g;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    fn check_finite(&self) -> Result<()> {
        let (_, names) = offsets(&self.config);
        for (i, name) in names.iter().enumerate() {
            if self.tensor_at(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { tensor: name });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CheckpointTag {
    A,
    B,
    C,
}

impl CheckpointTag {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointTag::A => "A",
            CheckpointTag::B => "B",
            CheckpointTag::C => "C",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" | "a" => Some(CheckpointTag::A),
            "B" | "b" => Some(CheckpointTag::B),
            "C" | "c" => Some(CheckpointTag::C),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    pub step: u64,
    pub dev_cer: f64,
    pub config_hash: String,
    pub tag: Option<CheckpointTag>,
}

impl Checkpoint {
    pub fn new(params: ParamVector, step: u64, dev_cer: f64, tag: Option<CheckpointTag>) -> Self {
        let config_hash = params.config().hash();
        Checkpoint {
            params,
            step,
            dev_cer,
            config_hash,
            tag,
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out += W x` for row-major `W` with `x.len()` columns.
#[inline]
fn gemv_acc(out: &mut [f64], w: &[f64], x: &[f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(x.len())) {
        *o += dot(row, x);
    }
}

/// `out += W^T dy`.
#[inline]
fn gemv_t_acc(out: &mut [f64], w: &[f64], dy: &[f64]) {
    for (row, &g) in w.chunks_exact(out.len()).zip(dy) {
        if g != 0.0 {
            axpy(out, g, row);
        }
    }
}

/// `dW += dy x^T`.
#[inline]
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    for (row, &g) in dw.chunks_exact_mut(x.len()).zip(dy) {
        if g != 0.0 {
            axpy(row, g, x);
        }
    }
}

struct Gru<'a> {
    w: &'a [f64],
    u: &'a [f64],
    b: &'a [f64],
    hidden: usize,
}

struct GruCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    /// `U_n h_prev`, before the reset gate.
    un: Vec<f64>,
}

impl Gru<'_> {
    fn step(&self, x: &[f64], h_prev: &[f64]) -> (Vec<f64>, GruCache) {
        let h = self.hidden;
        let mut a = self.b.to_vec();
        gemv_acc(&mut a, self.w, x);
        let mut c = vec![0.0; 3 * h];
        gemv_acc(&mut c, self.u, h_prev);
        let r: Vec<f64> = (0..h).map(|i| sigmoid(a[i] + c[i])).collect();
        let z: Vec<f64> = (0..h).map(|i| sigmoid(a[h + i] + c[h + i])).collect();
        let un = c[2 * h..].to_vec();
        let n: Vec<f64> = (0..h).map(|i| libm::tanh(a[2 * h + i] + r[i] * un[i])).collect();
        let out: Vec<f64> = (0..h).map(|i| (1.0 - z[i]) * n[i] + z[i] * h_prev[i]).collect();
        let cache = GruCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            r,
            z,
            n,
            un,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients into `(dw, du, db)`, writes the input
    /// gradient into `dx` and returns the gradient w.r.t. `h_prev`.
    fn backward(
        &self,
        cache: &GruCache,
        dh: &[f64],
        dw: &mut [f64],
        du: &mut [f64],
        db: &mut [f64],
        dx: &mut [f64],
    ) -> Vec<f64> {
        let h = self.hidden;
        let mut da = vec![0.0; 3 * h];
        let mut dc = vec![0.0; 3 * h];
        let mut dh_prev = vec![0.0; h];
        for i in 0..h {
            let (r, z, n) = (cache.r[i], cache.z[i], cache.n[i]);
            let dn = dh[i] * (1.0 - z);
            let dz = dh[i] * (cache.h_prev[i] - n);
            dh_prev[i] = dh[i] * z;
            let dn_pre = dn * (1.0 - n * n);
            let dr = dn_pre * cache.un[i];
            let dr_pre = dr * r * (1.0 - r);
            let dz_pre = dz * z * (1.0 - z);
            da[i] = dr_pre;
            da[h + i] = dz_pre;
            da[2 * h + i] = dn_pre;
            dc[i] = dr_pre;
            dc[h + i] = dz_pre;
            dc[2 * h + i] = dn_pre * r;
        }
        outer_acc(dw, &da, &cache.x);
        outer_acc(du, &dc, &cache.h_prev);
        axpy(db, 1.0, &da);
        dx.fill(0.0);
        gemv_t_acc(dx, self.w, &da);
        gemv_t_acc(&mut dh_prev, self.u, &dc);
        dh_prev
    }
}

/// Read-only view of the parameters with tensor slices resolved.
struct Net<'a> {
    cfg: &'a ModelConfig,
    p: &'a ParamVector,
}

impl<'a> Net<'a> {
    fn new(p: &'a ParamVector) -> Self {
        Net { cfg: &p.config, p }
    }

    fn gru(&self, first: usize, hidden: usize) -> Gru<'a> {
        Gru {
            w: self.p.tensor_at(first),
            u: self.p.tensor_at(first + 1),
            b: self.p.tensor_at(first + 2),
            hidden,
        }
    }

    fn embed_obs(&self, sym: u32) -> &'a [f64] {
        let e = self.cfg.embed_dim;
        &self.p.tensor_at(ENC_EMBED)[sym as usize * e..(sym as usize + 1) * e]
    }

    fn embed_tok(&self, tok: TokenId) -> &'a [f64] {
        let e = self.cfg.embed_dim;
        &self.p.tensor_at(DEC_EMBED)[tok as usize * e..(tok as usize + 1) * e]
    }
}

struct EncoderCache {
    fwd: Vec<GruCache>,
    /// `bwd[t]` is the backward-direction step that consumed frame `t`.
    bwd: Vec<GruCache>,
}

/// Encoder output for one utterance: annotations `[fwd; bwd]` per frame and
/// their attention keys.
#[derive(Debug, Clone)]
pub struct EncodedUtterance {
    len: usize,
    annotations: Vec<f64>,
    keys: Vec<f64>,
}

fn check_frames(cfg: &ModelConfig, frames: &[u32]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::InvalidUtterance("utterance has no frames".into()));
    }
    if let Some(f) = frames.iter().find(|&&f| f as usize >= cfg.obs_alphabet_size) {
        return Err(Error::InvalidUtterance(format!(
            "frame symbol {f} outside alphabet of size {}",
            cfg.obs_alphabet_size
        )));
    }
    Ok(())
}

fn encode_impl(net: &Net, frames: &[u32], keep: bool) -> (EncodedUtterance, Option<EncoderCache>) {
    let cfg = net.cfg;
    let h = cfg.encoder_hidden;
    let ad = cfg.annotation_dim();
    let t_len = frames.len();
    let fwd = net.gru(ENC_FWD, h);
    let bwd = net.gru(ENC_BWD, h);
    let mut annotations = vec![0.0; t_len * ad];
    let mut cache = keep.then(|| EncoderCache {
        fwd: Vec::with_capacity(t_len),
        bwd: Vec::with_capacity(t_len),
    });
    let mut state = vec![0.0; h];
    for (t, &f) in frames.iter().enumerate() {
        let (next, c) = fwd.step(net.embed_obs(f), &state);
        annotations[t * ad..t * ad + h].copy_from_slice(&next);
        state = next;
        if let Some(cache) = cache.as_mut() {
            cache.fwd.push(c);
        }
    }
    let mut state = vec![0.0; h];
    let mut bwd_caches = Vec::with_capacity(if keep { t_len } else { 0 });
    for t in (0..t_len).rev() {
        let (next, c) = bwd.step(net.embed_obs(frames[t]), &state);
        annotations[t * ad + h..(t + 1) * ad].copy_from_slice(&next);
        state = next;
        if keep {
            bwd_caches.push(c);
        }
    }
    if let Some(cache) = cache.as_mut() {
        bwd_caches.reverse();
        cache.bwd = bwd_caches;
    }
    let a = cfg.attention_dim;
    let key_w = net.p.tensor_at(ATT_KEY);
    let mut keys = vec![0.0; t_len * a];
    for t in 0..t_len {
        gemv_acc(&mut keys[t * a..(t + 1) * a], key_w, &annotations[t * ad..(t + 1) * ad]);
    }
    (
        EncodedUtterance {
            len: t_len,
            annotations,
            keys,
        },
        cache,
    )
}

/// Decoder recurrent state: hidden vector and the last attention context.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    s: Vec<f64>,
    c: Vec<f64>,
}

struct StepCache {
    prev: TokenId,
    gru: GruCache,
    q: Vec<f64>,
    alpha: Vec<f64>,
    out_in: Vec<f64>,
    logp: Vec<f64>,
}

fn decoder_step(
    net: &Net,
    enc: &EncodedUtterance,
    state: &DecoderState,
    prev: TokenId,
    step: usize,
) -> Result<(DecoderState, Vec<f64>, StepCache)> {
    let cfg = net.cfg;
    let (d, a, ad) = (cfg.decoder_hidden, cfg.attention_dim, cfg.annotation_dim());
    let mut x = Vec::with_capacity(cfg.decoder_input_dim());
    x.extend_from_slice(net.embed_tok(prev));
    x.extend_from_slice(&state.c);
    let (s, gru_cache) = net.gru(DEC_GRU, d).step(&x, &state.s);
    let mut q = vec![0.0; a];
    gemv_acc(&mut q, net.p.tensor_at(ATT_QUERY), &s);
    let mut alpha: Vec<f64> = enc.keys.chunks_exact(a).map(|k| dot(k, &q)).collect();
    log_softmax_in_place(&mut alpha);
    alpha.iter_mut().for_each(|v| *v = libm::exp(*v));
    let mut c = vec![0.0; ad];
    for (t, &w) in alpha.iter().enumerate() {
        axpy(&mut c, w, &enc.annotations[t * ad..(t + 1) * ad]);
    }
    let mut out_in = Vec::with_capacity(cfg.output_input_dim());
    out_in.extend_from_slice(&s);
    out_in.extend_from_slice(&c);
    let mut logp = net.p.tensor_at(OUT_B).to_vec();
    gemv_acc(&mut logp, net.p.tensor_at(OUT_W), &out_in);
    if logp.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation { step });
    }
    log_softmax_in_place(&mut logp);
    let cache = StepCache {
        prev,
        gru: gru_cache,
        q,
        alpha,
        out_in,
        logp: logp.clone(),
    };
    Ok((DecoderState { s, c }, logp, cache))
}

/// Incremental decoder bound to one encoded utterance; the interface beam
/// search consumes.
pub struct Decoder<'p> {
    net: Net<'p>,
    enc: EncodedUtterance,
}

impl<'p> Decoder<'p> {
    pub fn new(params: &'p ParamVector, x: &Utterance) -> Result<Self> {
        let net = Net::new(params);
        check_frames(net.cfg, &x.frames)?;
        let (enc, _) = encode_impl(&net, &x.frames, false);
        Ok(Decoder { net, enc })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.net.cfg.vocab
    }

    pub fn start(&self) -> DecoderState {
        DecoderState {
            s: vec![0.0; self.net.cfg.decoder_hidden],
            c: vec![0.0; self.net.cfg.annotation_dim()],
        }
    }

    /// Feeds `prev` (EOS at the first step) and returns the next state with
    /// the log-distribution over the next token. `step` is only used for
    /// error reporting.
    pub fn step(
        &self,
        state: &DecoderState,
        prev: TokenId,
        step: usize,
    ) -> Result<(DecoderState, Vec<f64>)> {
        let (next, logp, _) = decoder_step(&self.net, &self.enc, state, prev, step)?;
        Ok((next, logp))
    }

    pub fn encoded_len(&self) -> usize {
        self.enc.len
    }
}

fn check_target(cfg: &ModelConfig, y: &TokenSeq) -> Result<()> {
    let v = cfg.vocab.size();
    if y.ids().iter().any(|&t| t as usize >= v) || *y.ids().last().unwrap() != cfg.vocab.eos_id() {
        return Err(Error::InvalidTokenSeq("target does not match the model vocabulary".into()));
    }
    Ok(())
}

/// Teacher-forced `Σ_t log q(y_t | y_<t, x)`, EOS step included.
pub fn score_sequence(params: &ParamVector, x: &Utterance, y: &TokenSeq) -> Result<f64> {
    check_target(params.config(), y)?;
    let dec = Decoder::new(params, x)?;
    let mut state = dec.start();
    let mut prev = dec.vocab().eos_id();
    let mut total = 0.0;
    for (i, &tok) in y.ids().iter().enumerate() {
        let (next, logp) = dec.step(&state, prev, i)?;
        total += logp[tok as usize];
        state = next;
        prev = tok;
    }
    Ok(total)
}

/// Next-token log-distribution after `prefix` (which must not contain EOS).
pub fn step_distribution(params: &ParamVector, x: &Utterance, prefix: &[TokenId]) -> Result<Vec<f64>> {
    let eos = params.config().vocab.eos_id();
    if prefix.contains(&eos) {
        return Err(Error::InvalidTokenSeq("prefix contains EOS".into()));
    }
    if prefix.iter().any(|&t| t as usize >= params.config().vocab.size()) {
        return Err(Error::InvalidTokenSeq("prefix token out of range".into()));
    }
    let dec = Decoder::new(params, x)?;
    let mut state = dec.start();
    let mut prev = eos;
    for (i, &tok) in prefix.iter().enumerate() {
        state = dec.step(&state, prev, i)?.0;
        prev = tok;
    }
    Ok(dec.step(&state, prev, prefix.len())?.1)
}

/// One weighted teacher-forced term of a loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm<'a> {
    pub x: &'a Utterance,
    pub y: &'a TokenSeq,
    pub weight: f64,
}

/// Per-step cross-entropy against the (optionally smoothed) one-hot target.
fn step_loss(logp: &[f64], target: TokenId, eps: f64) -> f64 {
    let v = logp.len() as f64;
    let nll = -logp[target as usize];
    if eps == 0.0 {
        nll
    } else {
        (1.0 - eps) * nll - eps / v * logp.iter().sum::<f64>()
    }
}

/// `Σ_i w_i · CE(x_i, y_i)`. Without label smoothing this is
/// `-Σ_i w_i · score_sequence(x_i, y_i)`.
pub fn weighted_loss(params: &ParamVector, terms: &[LossTerm]) -> Result<f64> {
    let eps = params.config().label_smoothing;
    let mut total = 0.0;
    for term in terms {
        check_target(params.config(), term.y)?;
        let dec = Decoder::new(params, term.x)?;
        let mut state = dec.start();
        let mut prev = dec.vocab().eos_id();
        let mut ce = 0.0;
        for (i, &tok) in term.y.ids().iter().enumerate() {
            let (next, logp) = dec.step(&state, prev, i)?;
            ce += step_loss(&logp, tok, eps);
            state = next;
            prev = tok;
        }
        total += term.weight * ce;
    }
    Ok(total)
}

/// Loss value and exact gradient of [`weighted_loss`]. Consecutive terms that
/// share an utterance share one encoder pass. Accumulation order is fixed by
/// the order of `terms`.
pub fn loss_and_gradient(params: &ParamVector, terms: &[LossTerm]) -> Result<(f64, ParamVector)> {
    if terms.is_empty() {
        return Err(Error::InvalidModel("gradient requested for an empty loss".into()));
    }
    if let Some(t) = terms.iter().find(|t| !t.weight.is_finite()) {
        return Err(Error::InvalidModel(format!("non-finite loss weight {}", t.weight)));
    }
    let net = Net::new(params);
    let cfg = net.cfg;
    let mut grad = ParamVector::zeros(cfg)?;
    let mut total = 0.0;
    let mut start = 0;
    while start < terms.len() {
        let frames = &terms[start].x.frames;
        let mut end = start + 1;
        while end < terms.len() && terms[end].x.frames == *frames {
            end += 1;
        }
        total += group_backward(&net, &terms[start..end], &mut grad)?;
        start = end;
    }
    grad.check_finite()?;
    Ok((total, grad))
}

/// Gradient of `Σ_i w_i · CE(x_i, y_i)` w.r.t. every parameter.
pub fn gradient(params: &ParamVector, terms: &[LossTerm]) -> Result<ParamVector> {
    loss_and_gradient(params, terms).map(|(_, g)| g)
}

/// Mutable views of the gradient buffer, one per tensor.
struct GradViews<'a> {
    t: [&'a mut [f64]; N_TENSORS],
}

impl<'a> GradViews<'a> {
    fn new(grad: &'a mut ParamVector) -> Self {
        let offsets = grad.offsets;
        let mut rest: &mut [f64] = &mut grad.data;
        let mut parts: Vec<&'a mut [f64]> = Vec::with_capacity(N_TENSORS);
        for i in 0..N_TENSORS {
            let (head, tail) = core::mem::take(&mut rest).split_at_mut(offsets[i + 1] - offsets[i]);
            parts.push(head);
            rest = tail;
        }
        let t: [&'a mut [f64]; N_TENSORS] = match parts.try_into() {
            Ok(arr) => arr,
            Err(_) => unreachable!(),
        };
        GradViews { t }
    }

    fn gru(&mut self, first: usize) -> (&mut [f64], &mut [f64], &mut [f64]) {
        let (a, rest) = self.t[first..first + 3].split_at_mut(1);
        let (b, c) = rest.split_at_mut(1);
        (&mut *a[0], &mut *b[0], &mut *c[0])
    }
}

fn group_backward(net: &Net, terms: &[LossTerm], grad: &mut ParamVector) -> Result<f64> {
    let cfg = net.cfg;
    let (e, h, d, a, ad) = (
        cfg.embed_dim,
        cfg.encoder_hidden,
        cfg.decoder_hidden,
        cfg.attention_dim,
        cfg.annotation_dim(),
    );
    let eps = cfg.label_smoothing;
    let v = cfg.vocab.size();
    let eos = cfg.vocab.eos_id();
    let frames = &terms[0].x.frames;
    check_frames(cfg, frames)?;
    let (enc, enc_cache) = encode_impl(net, frames, true);
    let enc_cache = enc_cache.expect("cache requested");
    let t_len = enc.len;
    let mut d_annot = vec![0.0; t_len * ad];
    let mut d_keys = vec![0.0; t_len * a];
    let mut g = GradViews::new(grad);
    let dec_gru = net.gru(DEC_GRU, d);
    let out_w = net.p.tensor_at(OUT_W);
    let query_w = net.p.tensor_at(ATT_QUERY);
    let mut total = 0.0;

    for term in terms {
        check_target(cfg, term.y)?;
        let ids = term.y.ids();
        let mut state = DecoderState {
            s: vec![0.0; d],
            c: vec![0.0; ad],
        };
        let mut prev = eos;
        let mut caches = Vec::with_capacity(ids.len());
        let mut ce = 0.0;
        for (i, &tok) in ids.iter().enumerate() {
            let (next, logp, cache) = decoder_step(net, &enc, &state, prev, i)?;
            ce += step_loss(&logp, tok, eps);
            caches.push(cache);
            state = next;
            prev = tok;
        }
        total += term.weight * ce;
        if term.weight == 0.0 {
            continue;
        }

        let mut ds_next = vec![0.0; d];
        let mut dc_next = vec![0.0; ad];
        let mut dx = vec![0.0; cfg.decoder_input_dim()];
        for (i, cache) in caches.iter().enumerate().rev() {
            let target = ids[i];
            let mut dlogits: Vec<f64> = cache
                .logp
                .iter()
                .map(|&lp| term.weight * (libm::exp(lp) - eps / v as f64))
                .collect();
            dlogits[target as usize] -= term.weight * (1.0 - eps);
            outer_acc(g.t[OUT_W], &dlogits, &cache.out_in);
            axpy(g.t[OUT_B], 1.0, &dlogits);
            let mut d_out_in = vec![0.0; cfg.output_input_dim()];
            gemv_t_acc(&mut d_out_in, out_w, &dlogits);
            let mut ds: Vec<f64> = d_out_in[..d].iter().zip(&ds_next).map(|(x, y)| x + y).collect();
            let dc: Vec<f64> = d_out_in[d..].iter().zip(&dc_next).map(|(x, y)| x + y).collect();

            // Attention: c = Σ_t α_t h_t, α = softmax(keys · q).
            let mut d_alpha = vec![0.0; t_len];
            for t in 0..t_len {
                let ann = &enc.annotations[t * ad..(t + 1) * ad];
                d_alpha[t] = dot(&dc, ann);
                axpy(&mut d_annot[t * ad..(t + 1) * ad], cache.alpha[t], &dc);
            }
            let mean: f64 = cache.alpha.iter().zip(&d_alpha).map(|(x, y)| x * y).sum();
            let mut dq = vec![0.0; a];
            for t in 0..t_len {
                let de = cache.alpha[t] * (d_alpha[t] - mean);
                if de != 0.0 {
                    axpy(&mut dq, de, &enc.keys[t * a..(t + 1) * a]);
                    axpy(&mut d_keys[t * a..(t + 1) * a], de, &cache.q);
                }
            }
            let s = &cache.out_in[..d];
            outer_acc(g.t[ATT_QUERY], &dq, s);
            gemv_t_acc(&mut ds, query_w, &dq);

            let (dw, du, db) = g.gru(DEC_GRU);
            ds_next = dec_gru.backward(&cache.gru, &ds, dw, du, db, &mut dx);
            let prev_tok = cache.prev as usize;
            axpy(&mut g.t[DEC_EMBED][prev_tok * e..(prev_tok + 1) * e], 1.0, &dx[..e]);
            dc_next.copy_from_slice(&dx[e..]);
        }
    }

    // Keys: k_t = K h_t.
    let key_w = net.p.tensor_at(ATT_KEY);
    for t in 0..t_len {
        let dk = &d_keys[t * a..(t + 1) * a];
        outer_acc(g.t[ATT_KEY], dk, &enc.annotations[t * ad..(t + 1) * ad]);
        gemv_t_acc(&mut d_annot[t * ad..(t + 1) * ad], key_w, dk);
    }

    let mut dx = vec![0.0; e];
    let fwd = net.gru(ENC_FWD, h);
    let mut carry = vec![0.0; h];
    for t in (0..t_len).rev() {
        let dh: Vec<f64> = d_annot[t * ad..t * ad + h].iter().zip(&carry).map(|(x, y)| x + y).collect();
        let (dw, du, db) = g.gru(ENC_FWD);
        carry = fwd.backward(&enc_cache.fwd[t], &dh, dw, du, db, &mut dx);
        let f = frames[t] as usize;
        axpy(&mut g.t[ENC_EMBED][f * e..(f + 1) * e], 1.0, &dx);
    }
    let bwd = net.gru(ENC_BWD, h);
    let mut carry = vec![0.0; h];
    for t in 0..t_len {
        let dh: Vec<f64> = d_annot[t * ad + h..(t + 1) * ad].iter().zip(&carry).map(|(x, y)| x + y).collect();
        let (dw, du, db) = g.gru(ENC_BWD);
        carry = bwd.backward(&enc_cache.bwd[t], &dh, dw, du, db, &mut dx);
        let f = frames[t] as usize;
        axpy(&mut g.t[ENC_EMBED][f * e..(f + 1) * e], 1.0, &dx);
    }
    Ok(total)
}

/// Functional form of [`ParamVector::sgd_update`].
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    let mut next = params.clone();
    next.sgd_update(grad, lr)?;
    Ok(next)
}

/// Independent deep copy, used to refresh the proposal from the online model.
pub fn snapshot(params: &ParamVector) -> ParamVector {
    params.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(eps: f64) -> ModelConfig {
        ModelConfig {
            embed_dim: 3,
            encoder_hidden: 3,
            decoder_hidden: 4,
            attention_dim: 2,
            vocab: Vocab::synthetic(3),
            obs_alphabet_size: 5,
            label_smoothing: eps,
        }
    }

    fn utt(frames: &[u32]) -> Utterance {
        Utterance::new("u", frames.to_vec(), None).unwrap()
    }

    fn seq(content: &[TokenId]) -> TokenSeq {
        TokenSeq::from_content(content, &Vocab::synthetic(3)).unwrap()
    }

    /// Larger-than-default init so that gradients are not all tiny.
    fn params(eps: f64, seed: u64) -> ParamVector {
        let mut p = ParamVector::init(&tiny_config(eps), &mut Rng::new(seed)).unwrap();
        p.scale(6.0);
        p
    }

    fn check_gradient(eps: f64) {
        let p = params(eps, 7);
        assert!(p.total_count() < 2000);
        let x1 = utt(&[0, 1, 4, 4, 2]);
        let x2 = utt(&[3, 2]);
        let (y1, y2, y3) = (seq(&[0, 2]), seq(&[1]), seq(&[]));
        let terms = [
            LossTerm { x: &x1, y: &y1, weight: 0.7 },
            LossTerm { x: &x1, y: &y2, weight: 0.3 },
            LossTerm { x: &x2, y: &y3, weight: 1.5 },
            LossTerm { x: &x2, y: &y1, weight: 0.0 },
        ];
        let (loss, grad) = loss_and_gradient(&p, &terms).unwrap();
        assert!((loss - weighted_loss(&p, &terms).unwrap()).abs() < 1e-12);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..p.total_count() {
            let mut plus = p.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = p.clone();
            minus.as_mut_slice()[i] -= h;
            let numeric =
                (weighted_loss(&plus, &terms).unwrap() - weighted_loss(&minus, &terms).unwrap()) / (2.0 * h);
            let analytic = grad.as_slice()[i];
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        check_gradient(0.0);
    }

    #[test]
    fn gradient_matches_finite_differences_with_label_smoothing() {
        check_gradient(0.1);
    }

    #[test]
    fn loss_without_smoothing_is_negative_weighted_score() {
        let p = params(0.0, 3);
        let x = utt(&[1, 2, 3]);
        let y = seq(&[2, 0, 1]);
        let s = score_sequence(&p, &x, &y).unwrap();
        let l = weighted_loss(&p, &[LossTerm { x: &x, y: &y, weight: 2.0 }]).unwrap();
        assert!((l + 2.0 * s).abs() < 1e-12);
        assert!(s < 0.0);
    }

    #[test]
    fn step_distributions_normalize_and_chain_to_score() {
        let p = params(0.0, 11);
        let x = utt(&[4, 0, 0, 1]);
        let y = seq(&[1, 1, 0]);
        let mut total = 0.0;
        for i in 0..y.ids().len() {
            let logp = step_distribution(&p, &x, &y.ids()[..i]).unwrap();
            let mass: f64 = logp.iter().map(|v| v.exp()).sum();
            assert!((mass - 1.0).abs() < 1e-12);
            total += logp[y.ids()[i] as usize];
        }
        assert!((total - score_sequence(&p, &x, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let p = params(0.0, 5);
        let x = utt(&[1, 2]);
        let y = seq(&[0]);
        let g = gradient(&p, &[LossTerm { x: &x, y: &y, weight: 0.0 }]).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_weights() {
        let p = params(0.0, 9);
        let x = utt(&[1, 2, 0]);
        let y = seq(&[2, 1]);
        let g1 = gradient(&p, &[LossTerm { x: &x, y: &y, weight: 1.0 }]).unwrap();
        let g2 = gradient(&p, &[LossTerm { x: &x, y: &y, weight: 2.0 }]).unwrap();
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn init_is_deterministic_and_zero_output_bias() {
        let cfg = tiny_config(0.0);
        let a = ParamVector::init(&cfg, &mut Rng::new(1)).unwrap();
        let b = ParamVector::init(&cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.tensor("out.b").unwrap().iter().all(|&v| v == 0.0));
        assert!(a.as_slice().iter().all(|v| v.abs() <= 0.08));
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let p = params(0.0, 2);
        let x = utt(&[0, 3]);
        let y = seq(&[1]);
        let terms = [LossTerm { x: &x, y: &y, weight: 1.0 }];
        let (before, g) = loss_and_gradient(&p, &terms).unwrap();
        let next = sgd_step(&p, &g, 1e-3).unwrap();
        assert!(weighted_loss(&next, &terms).unwrap() < before);
        let snap = snapshot(&next);
        assert_eq!(snap, next);
    }

    #[test]
    fn tensors_round_trip() {
        let p = params(0.0, 4);
        let named: Vec<_> = p
            .tensors()
            .into_iter()
            .map(|(n, s, v)| (String::from(n), s, v.to_vec()))
            .collect();
        let q = ParamVector::from_tensors(p.config(), named).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_out_of_alphabet_frames() {
        let p = params(0.0, 4);
        let x = utt(&[9]);
        assert!(score_sequence(&p, &x, &seq(&[])).is_err());
    }

    #[test]
    fn default_config_is_desk_sized() {
        let cfg = ModelConfig::new(Vocab::synthetic(30), 40);
        let p = ParamVector::zeros(&cfg).unwrap();
        assert!(p.total_count() < 50_000);
        assert_eq!(cfg.hash(), cfg.clone().hash());
    }
}
