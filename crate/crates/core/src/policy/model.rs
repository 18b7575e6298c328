//! A small pre-norm transformer encoder-decoder with the three edit heads,
//! written against flat parameter and gradient vectors.
//!
//! Sequences of a batch are packed row-wise into one matrix; attention runs
//! per segment, every position-wise layer runs on the packed matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{
    gemm, layer_norm, layer_norm_backward, linear, linear_backward, positions, softmax_in_place, LnCache, Scalar,
    View,
};
use super::PolicyError;
use crate::corpus::{TokenId, BOS_ID, EOS_ID, PAD_ID, PLH_ID, SEP_ID};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub k_max: usize,
}

impl ModelConfig {
    /// The default toy architecture for a given vocabulary size.
    pub fn toy(vocab: usize) -> Self {
        Self {
            vocab,
            d_model: 64,
            heads: 2,
            ff: 128,
            enc_layers: 2,
            dec_layers: 2,
            k_max: 64,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Config(m.to_string()));
        if self.vocab <= crate::corpus::NUM_SPECIAL {
            return bad("vocabulary must hold more than the reserved tokens");
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return bad("d_model must be positive and even");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("heads must divide d_model");
        }
        if self.ff == 0 {
            return bad("ff must be positive");
        }
        Ok(())
    }
}

/// What a tensor is, used for initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Weight,
    Bias,
    Gain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub kind: TensorKind,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
    din: usize,
    dout: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ln {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: Ln,
    attn: Attn,
    ln2: Ln,
    ff1: Lin,
    ff2: Lin,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: Ln,
    self_attn: Attn,
    ln2: Ln,
    cross: Attn,
    ln3: Ln,
    ff1: Lin,
    ff2: Lin,
}

/// Named ranges of the flat parameter vector, in declared order.
#[derive(Debug, Clone)]
pub struct Layout {
    emb: usize,
    enc: Vec<EncLayer>,
    enc_ln: Ln,
    dec: Vec<DecLayer>,
    dec_ln: Ln,
    del: Lin,
    plh: Lin,
    tensors: Vec<TensorInfo>,
    total: usize,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl Builder {
    fn alloc(&mut self, name: String, rows: usize, cols: usize, kind: TensorKind) -> usize {
        let offset = self.total;
        self.tensors.push(TensorInfo {
            name,
            offset,
            rows,
            cols,
            kind,
        });
        self.total += rows * cols;
        offset
    }

    fn lin(&mut self, name: &str, din: usize, dout: usize) -> Lin {
        let w = self.alloc(format!("{name}.w"), din, dout, TensorKind::Weight);
        let b = self.alloc(format!("{name}.b"), 1, dout, TensorKind::Bias);
        Lin { w, b, din, dout }
    }

    fn ln(&mut self, name: &str, d: usize) -> Ln {
        let g = self.alloc(format!("{name}.g"), 1, d, TensorKind::Gain);
        let b = self.alloc(format!("{name}.b"), 1, d, TensorKind::Bias);
        Ln { g, b }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.lin(&format!("{name}.q"), d, d),
            k: self.lin(&format!("{name}.k"), d, d),
            v: self.lin(&format!("{name}.v"), d, d),
            o: self.lin(&format!("{name}.o"), d, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let emb = b.alloc("embed".into(), cfg.vocab, d, TensorKind::Embedding);
        let enc = (0..cfg.enc_layers)
            .map(|l| {
                let p = format!("enc{l}");
                EncLayer {
                    ln1: b.ln(&format!("{p}.ln1"), d),
                    attn: b.attn(&format!("{p}.attn"), d),
                    ln2: b.ln(&format!("{p}.ln2"), d),
                    ff1: b.lin(&format!("{p}.ff1"), d, cfg.ff),
                    ff2: b.lin(&format!("{p}.ff2"), cfg.ff, d),
                }
            })
            .collect();
        let enc_ln = b.ln("enc.ln", d);
        let dec = (0..cfg.dec_layers)
            .map(|l| {
                let p = format!("dec{l}");
                DecLayer {
                    ln1: b.ln(&format!("{p}.ln1"), d),
                    self_attn: b.attn(&format!("{p}.self"), d),
                    ln2: b.ln(&format!("{p}.ln2"), d),
                    cross: b.attn(&format!("{p}.cross"), d),
                    ln3: b.ln(&format!("{p}.ln3"), d),
                    ff1: b.lin(&format!("{p}.ff1"), d, cfg.ff),
                    ff2: b.lin(&format!("{p}.ff2"), cfg.ff, d),
                }
            })
            .collect();
        let dec_ln = b.ln("dec.ln", d);
        let del = b.lin("head.del", d, 2);
        let plh = b.lin("head.plh", 2 * d, cfg.k_max + 1);
        Self {
            emb,
            enc,
            enc_ln,
            dec,
            dec_ln,
            del,
            plh,
            tensors: b.tensors,
            total: b.total,
        }
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn embedding(&self) -> &TensorInfo {
        &self.tensors[0]
    }

    /// Parameters of the deletion head (used by both deletion passes).
    pub fn deletion_head(&self) -> std::ops::Range<usize> {
        self.del.w..self.del.b + 2
    }
}

/// One packed sequence: rows `start..start + len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seg {
    pub start: usize,
    pub len: usize,
}

fn pack(seqs: &[&[TokenId]]) -> (Vec<TokenId>, Vec<Seg>) {
    let mut toks = Vec::new();
    let mut segs = Vec::with_capacity(seqs.len());
    for s in seqs {
        segs.push(Seg {
            start: toks.len(),
            len: s.len(),
        });
        toks.extend_from_slice(s);
    }
    (toks, segs)
}

fn pair_mut<T>(s: &mut [T], a: usize, alen: usize, b: usize, blen: usize) -> (&mut [T], &mut [T]) {
    assert!(a + alen <= b, "ranges must be ordered and disjoint");
    let (lo, hi) = s.split_at_mut(b);
    (&mut lo[a..a + alen], &mut hi[..blen])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

#[derive(Debug, Clone)]
struct AttnCache<T> {
    xq: Vec<T>,
    xkv: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// One `lq x lk` block per (pair, head).
    probs: Vec<Vec<T>>,
    ctx: Vec<T>,
}

#[derive(Debug, Clone)]
struct FfCache<T> {
    input: Vec<T>,
    hidden: Vec<T>,
}

#[derive(Debug, Clone)]
struct EncLayerCache<T> {
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    ln2: LnCache<T>,
    ff: FfCache<T>,
}

#[derive(Debug, Clone)]
struct DecLayerCache<T> {
    ln1: LnCache<T>,
    self_attn: AttnCache<T>,
    ln2: LnCache<T>,
    cross: AttnCache<T>,
    ln3: LnCache<T>,
    ff: FfCache<T>,
}

/// Encoder states of a packed batch.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    pub states: Vec<T>,
    pub segs: Vec<Seg>,
    tokens: Vec<TokenId>,
    layers: Vec<EncLayerCache<T>>,
    ln: LnCache<T>,
}

/// Final decoder states of a packed batch of target sequences.
#[derive(Debug, Clone)]
pub struct Decoded<T> {
    pub states: Vec<T>,
    pub segs: Vec<Seg>,
    /// Encoder segment attended by each target.
    pub enc_of: Vec<usize>,
    tokens: Vec<TokenId>,
    layers: Vec<DecLayerCache<T>>,
    ln: LnCache<T>,
}

impl<T> Decoded<T> {
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }
}

fn hash_relu<T: Scalar, H: std::hash::Hasher>(ff: &FfCache<T>, h: &mut H) {
    for chunk in ff.hidden.chunks(64) {
        let bits = chunk.iter().enumerate().fold(0u64, |acc, (i, &v)| acc | (u64::from(v > T::zero()) << i));
        h.write_u64(bits);
    }
}

impl<T: Scalar> Encoded<T> {
    /// Feed the on/off pattern of every ReLU unit into `h`.
    pub fn hash_activations<H: std::hash::Hasher>(&self, h: &mut H) {
        self.layers.iter().for_each(|l| hash_relu(&l.ff, h));
    }
}

impl<T: Scalar> Decoded<T> {
    pub fn hash_activations<H: std::hash::Hasher>(&self, h: &mut H) {
        self.layers.iter().for_each(|l| hash_relu(&l.ff, h));
    }
}

/// Model parameters plus their layout.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub params: Vec<T>,
}

/// Specials never emitted by the token head.
pub fn token_mask(vocab: usize) -> Vec<bool> {
    let mut m = vec![false; vocab];
    for id in [PAD_ID, BOS_ID, EOS_ID, PLH_ID, SEP_ID] {
        m[id as usize] = true;
    }
    m
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from the model-init stream of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, PolicyError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = rng::stream(seed, streams::MODEL_INIT);
        for t in &layout.tensors {
            let limit = match t.kind {
                TensorKind::Embedding => (3.0 / cfg.d_model as f64).sqrt(),
                TensorKind::Weight => (6.0 / (t.rows + t.cols) as f64).sqrt(),
                TensorKind::Bias => 0.0,
                TensorKind::Gain => {
                    params[t.range()].fill(T::one());
                    continue;
                }
            };
            for p in &mut params[t.range()] {
                *p = T::c(if limit > 0.0 { rng.gen_range(-limit..limit) } else { 0.0 });
            }
        }
        Ok(Self { cfg, layout, params })
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<T>) -> Result<Self, PolicyError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(PolicyError::Format(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { cfg, layout, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg,
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::c(v.to_f64().expect("finite"))).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn p(&self, off: usize, len: usize) -> &[T] {
        &self.params[off..off + len]
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), PolicyError> {
        match ids.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            Some(&id) => Err(PolicyError::TokenOutOfRange {
                id,
                vocab: self.cfg.vocab,
            }),
            None => Ok(()),
        }
    }

    fn embed(&self, tokens: &[TokenId], segs: &[Seg]) -> Vec<T> {
        let d = self.cfg.d_model;
        let longest = segs.iter().map(|s| s.len).max().unwrap_or(0);
        let pe = positions::<T>(longest, d);
        let scale = T::c((d as f64).sqrt());
        let e = self.p(self.layout.emb, self.cfg.vocab * d);
        let mut x = vec![T::zero(); tokens.len() * d];
        for s in segs {
            for i in 0..s.len {
                let r = s.start + i;
                let tok = tokens[r] as usize;
                for j in 0..d {
                    x[r * d + j] = e[tok * d + j] * scale + pe[i * d + j];
                }
            }
        }
        x
    }

    fn embed_backward(&self, tokens: &[TokenId], dx: &[T], grads: &mut [T]) {
        let d = self.cfg.d_model;
        let scale = T::c((d as f64).sqrt());
        for (r, &tok) in tokens.iter().enumerate() {
            let base = self.layout.emb + tok as usize * d;
            for j in 0..d {
                grads[base + j] = grads[base + j] + dx[r * d + j] * scale;
            }
        }
    }

    fn lin(&self, l: &Lin, x: &[T]) -> Vec<T> {
        let m = x.len() / l.din;
        linear(x, m, l.din, self.p(l.w, l.din * l.dout), self.p(l.b, l.dout), l.dout)
    }

    fn lin_backward(&self, l: &Lin, x: &[T], dy: &[T], grads: &mut [T], dx: Option<&mut [T]>) {
        let m = x.len() / l.din;
        let (dw, db) = pair_mut(grads, l.w, l.din * l.dout, l.b, l.dout);
        linear_backward(x, m, l.din, self.p(l.w, l.din * l.dout), dy, l.dout, dw, db, dx);
    }

    fn ln(&self, l: &Ln, x: &[T]) -> (Vec<T>, LnCache<T>) {
        let d = self.cfg.d_model;
        layer_norm(x, d, self.p(l.g, d), self.p(l.b, d))
    }

    fn ln_backward(&self, l: &Ln, cache: &LnCache<T>, dy: &[T], grads: &mut [T], dx: &mut [T]) {
        let d = self.cfg.d_model;
        let (dg, db) = pair_mut(grads, l.g, d, l.b, d);
        layer_norm_backward(cache, d, self.p(l.g, d), dy, dg, db, dx);
    }

    fn attn(&self, a: &Attn, xq: &[T], qsegs: &[Seg], xkv: &[T], kvsegs: &[Seg]) -> (Vec<T>, AttnCache<T>) {
        let d = self.cfg.d_model;
        let h = self.cfg.heads;
        let dh = d / h;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let q = self.lin(&a.q, xq);
        let k = self.lin(&a.k, xkv);
        let v = self.lin(&a.v, xkv);
        let mut ctx = vec![T::zero(); xq.len()];
        let mut probs = Vec::with_capacity(qsegs.len() * h);
        for (qs, ks) in qsegs.iter().zip(kvsegs) {
            for head in 0..h {
                let qv = View::at(qs.start * d + head * dh, qs.len, dh, d);
                let kv = View::at(ks.start * d + head * dh, ks.len, dh, d);
                let mut p = vec![T::zero(); qs.len * ks.len];
                gemm(scale, &q, qv, false, &k, kv, true, T::zero(), &mut p, View::full(qs.len, ks.len));
                if ks.len > 0 {
                    for row in p.chunks_exact_mut(ks.len) {
                        softmax_in_place(row, None);
                    }
                }
                gemm(T::one(), &p, View::full(qs.len, ks.len), false, &v, kv, false, T::zero(), &mut ctx, qv);
                probs.push(p);
            }
        }
        let out = self.lin(&a.o, &ctx);
        let cache = AttnCache {
            xq: xq.to_vec(),
            xkv: xkv.to_vec(),
            q,
            k,
            v,
            probs,
            ctx,
        };
        (out, cache)
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_backward(
        &self,
        a: &Attn,
        c: &AttnCache<T>,
        qsegs: &[Seg],
        kvsegs: &[Seg],
        dout: &[T],
        grads: &mut [T],
        dxq: &mut [T],
        dxkv: &mut [T],
    ) {
        let d = self.cfg.d_model;
        let h = self.cfg.heads;
        let dh = d / h;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let mut dctx = vec![T::zero(); c.ctx.len()];
        self.lin_backward(&a.o, &c.ctx, dout, grads, Some(&mut dctx));
        let mut dq = vec![T::zero(); c.q.len()];
        let mut dk = vec![T::zero(); c.k.len()];
        let mut dv = vec![T::zero(); c.v.len()];
        let mut blocks = c.probs.iter();
        for (qs, ks) in qsegs.iter().zip(kvsegs) {
            for head in 0..h {
                let p = blocks.next().expect("one block per pair and head");
                let qv = View::at(qs.start * d + head * dh, qs.len, dh, d);
                let kv = View::at(ks.start * d + head * dh, ks.len, dh, d);
                let pv = View::full(qs.len, ks.len);
                let mut dp = vec![T::zero(); qs.len * ks.len];
                gemm(T::one(), &dctx, qv, false, &c.v, kv, true, T::zero(), &mut dp, pv);
                gemm(T::one(), p, pv, true, &dctx, qv, false, T::one(), &mut dv, kv);
                if ks.len > 0 {
                    for (prow, drow) in p.chunks_exact(ks.len).zip(dp.chunks_exact_mut(ks.len)) {
                        let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                        for (dv_, &pv_) in drow.iter_mut().zip(prow) {
                            *dv_ = pv_ * (*dv_ - dot);
                        }
                    }
                }
                gemm(scale, &dp, pv, false, &c.k, kv, false, T::one(), &mut dq, qv);
                gemm(scale, &dp, pv, true, &c.q, qv, false, T::one(), &mut dk, kv);
            }
        }
        self.lin_backward(&a.q, &c.xq, &dq, grads, Some(dxq));
        self.lin_backward(&a.k, &c.xkv, &dk, grads, Some(&mut *dxkv));
        self.lin_backward(&a.v, &c.xkv, &dv, grads, Some(dxkv));
    }

    fn ff(&self, l1: &Lin, l2: &Lin, x: &[T]) -> (Vec<T>, FfCache<T>) {
        let mut hidden = self.lin(l1, x);
        for v in &mut hidden {
            *v = v.max(T::zero());
        }
        let out = self.lin(l2, &hidden);
        (
            out,
            FfCache {
                input: x.to_vec(),
                hidden,
            },
        )
    }

    fn ff_backward(&self, l1: &Lin, l2: &Lin, c: &FfCache<T>, dout: &[T], grads: &mut [T]) -> Vec<T> {
        let mut dh = vec![T::zero(); c.hidden.len()];
        self.lin_backward(l2, &c.hidden, dout, grads, Some(&mut dh));
        for (g, &h) in dh.iter_mut().zip(&c.hidden) {
            if h <= T::zero() {
                *g = T::zero();
            }
        }
        let mut dx = vec![T::zero(); c.input.len()];
        self.lin_backward(l1, &c.input, &dh, grads, Some(&mut dx));
        dx
    }

    /// Encode a batch of non-empty encoder inputs.
    pub fn encode(&self, inputs: &[&[TokenId]]) -> Result<Encoded<T>, PolicyError> {
        if inputs.iter().any(|s| s.is_empty()) {
            return Err(PolicyError::EmptyInput);
        }
        let (tokens, segs) = pack(inputs);
        self.check_ids(&tokens)?;
        let mut x = self.embed(&tokens, &segs);
        let mut layers = Vec::with_capacity(self.layout.enc.len());
        for l in &self.layout.enc {
            let (a, ln1) = self.ln(&l.ln1, &x);
            let (att, attn) = self.attn(&l.attn, &a, &segs, &a, &segs);
            add_into(&mut x, &att);
            let (c, ln2) = self.ln(&l.ln2, &x);
            let (f, ff) = self.ff(&l.ff1, &l.ff2, &c);
            add_into(&mut x, &f);
            layers.push(EncLayerCache { ln1, attn, ln2, ff });
        }
        let (states, ln) = self.ln(&self.layout.enc_ln, &x);
        Ok(Encoded {
            states,
            segs,
            tokens,
            layers,
            ln,
        })
    }

    /// Backpropagate `d_states` through the encoder into `grads`.
    pub fn encode_backward(&self, enc: &Encoded<T>, d_states: &[T], grads: &mut [T]) {
        let mut dx = vec![T::zero(); d_states.len()];
        self.ln_backward(&self.layout.enc_ln, &enc.ln, d_states, grads, &mut dx);
        for (l, c) in self.layout.enc.iter().zip(&enc.layers).rev() {
            let dc = self.ff_backward(&l.ff1, &l.ff2, &c.ff, &dx, grads);
            let mut dx1 = dx.clone();
            self.ln_backward(&l.ln2, &c.ln2, &dc, grads, &mut dx1);
            let mut da = vec![T::zero(); dx1.len()];
            let mut dakv = vec![T::zero(); dx1.len()];
            self.attn_backward(&l.attn, &c.attn, &enc.segs, &enc.segs, &dx1, grads, &mut da, &mut dakv);
            add_into(&mut da, &dakv);
            dx = dx1.clone();
            self.ln_backward(&l.ln1, &c.ln1, &da, grads, &mut dx);
        }
        self.embed_backward(&enc.tokens, &dx, grads);
    }

    /// Run the decoder on target sequences (with BOS/EOS); `enc_of[i]` names
    /// the encoder segment target `i` attends to.
    pub fn decode(
        &self,
        enc: &Encoded<T>,
        targets: &[&[TokenId]],
        enc_of: &[usize],
    ) -> Result<Decoded<T>, PolicyError> {
        assert_eq!(targets.len(), enc_of.len());
        let (tokens, segs) = pack(targets);
        self.check_ids(&tokens)?;
        let kv: Vec<Seg> = enc_of.iter().map(|&e| enc.segs[e]).collect();
        let mut x = self.embed(&tokens, &segs);
        let mut layers = Vec::with_capacity(self.layout.dec.len());
        for l in &self.layout.dec {
            let (a, ln1) = self.ln(&l.ln1, &x);
            let (sa, self_attn) = self.attn(&l.self_attn, &a, &segs, &a, &segs);
            add_into(&mut x, &sa);
            let (b, ln2) = self.ln(&l.ln2, &x);
            let (ca, cross) = self.attn(&l.cross, &b, &segs, &enc.states, &kv);
            add_into(&mut x, &ca);
            let (c, ln3) = self.ln(&l.ln3, &x);
            let (f, ff) = self.ff(&l.ff1, &l.ff2, &c);
            add_into(&mut x, &f);
            layers.push(DecLayerCache {
                ln1,
                self_attn,
                ln2,
                cross,
                ln3,
                ff,
            });
        }
        let (states, ln) = self.ln(&self.layout.dec_ln, &x);
        Ok(Decoded {
            states,
            segs,
            enc_of: enc_of.to_vec(),
            tokens,
            layers,
            ln,
        })
    }

    /// Backpropagate `d_states` through the decoder; encoder-state gradients
    /// are added into `d_enc`.
    pub fn decode_backward(&self, enc: &Encoded<T>, dec: &Decoded<T>, d_states: &[T], grads: &mut [T], d_enc: &mut [T]) {
        let kv: Vec<Seg> = dec.enc_of.iter().map(|&e| enc.segs[e]).collect();
        let mut dx = vec![T::zero(); d_states.len()];
        self.ln_backward(&self.layout.dec_ln, &dec.ln, d_states, grads, &mut dx);
        for (l, c) in self.layout.dec.iter().zip(&dec.layers).rev() {
            let dc = self.ff_backward(&l.ff1, &l.ff2, &c.ff, &dx, grads);
            let mut dx2 = dx.clone();
            self.ln_backward(&l.ln3, &c.ln3, &dc, grads, &mut dx2);

            let mut db = vec![T::zero(); dx2.len()];
            self.attn_backward(&l.cross, &c.cross, &dec.segs, &kv, &dx2, grads, &mut db, d_enc);
            let mut dx1 = dx2.clone();
            self.ln_backward(&l.ln2, &c.ln2, &db, grads, &mut dx1);

            let mut da = vec![T::zero(); dx1.len()];
            let mut dakv = vec![T::zero(); dx1.len()];
            self.attn_backward(&l.self_attn, &c.self_attn, &dec.segs, &dec.segs, &dx1, grads, &mut da, &mut dakv);
            add_into(&mut da, &dakv);
            dx = dx1.clone();
            self.ln_backward(&l.ln1, &c.ln1, &da, grads, &mut dx);
        }
        self.embed_backward(&dec.tokens, &dx, grads);
    }

    fn gather(&self, states: &[T], rows: &[usize]) -> Vec<T> {
        let d = self.cfg.d_model;
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&states[r * d..(r + 1) * d]);
        }
        out
    }

    fn scatter_add(&self, dst: &mut [T], rows: &[usize], src: &[T]) {
        let d = self.cfg.d_model;
        for (i, &r) in rows.iter().enumerate() {
            add_into(&mut dst[r * d..(r + 1) * d], &src[i * d..(i + 1) * d]);
        }
    }

    /// Deletion logits (`rows x 2`, class 1 = delete).
    pub fn del_logits(&self, states: &[T], rows: &[usize]) -> Vec<T> {
        self.lin(&self.layout.del, &self.gather(states, rows))
    }

    pub fn del_backward(&self, states: &[T], rows: &[usize], dlogits: &[T], grads: &mut [T], d_states: &mut [T]) {
        let x = self.gather(states, rows);
        let mut dx = vec![T::zero(); x.len()];
        self.lin_backward(&self.layout.del, &x, dlogits, grads, Some(&mut dx));
        self.scatter_add(d_states, rows, &dx);
    }

    /// Placeholder logits over gaps given as `(left row, right row)` pairs;
    /// `gaps.len() x (k_max + 1)`.
    pub fn plh_logits(&self, states: &[T], gaps: &[(usize, usize)]) -> Vec<T> {
        let d = self.cfg.d_model;
        let mut x = Vec::with_capacity(gaps.len() * 2 * d);
        for &(l, r) in gaps {
            x.extend_from_slice(&states[l * d..(l + 1) * d]);
            x.extend_from_slice(&states[r * d..(r + 1) * d]);
        }
        self.lin(&self.layout.plh, &x)
    }

    pub fn plh_backward(
        &self,
        states: &[T],
        gaps: &[(usize, usize)],
        dlogits: &[T],
        grads: &mut [T],
        d_states: &mut [T],
    ) {
        let d = self.cfg.d_model;
        let mut x = Vec::with_capacity(gaps.len() * 2 * d);
        for &(l, r) in gaps {
            x.extend_from_slice(&states[l * d..(l + 1) * d]);
            x.extend_from_slice(&states[r * d..(r + 1) * d]);
        }
        let mut dx = vec![T::zero(); x.len()];
        self.lin_backward(&self.layout.plh, &x, dlogits, grads, Some(&mut dx));
        for (i, &(l, r)) in gaps.iter().enumerate() {
            add_into(&mut d_states[l * d..(l + 1) * d], &dx[2 * i * d..(2 * i + 1) * d]);
            add_into(&mut d_states[r * d..(r + 1) * d], &dx[(2 * i + 1) * d..(2 * i + 2) * d]);
        }
    }

    /// Token logits through the tied embedding (`rows x vocab`).
    pub fn tok_logits(&self, states: &[T], rows: &[usize]) -> Vec<T> {
        let d = self.cfg.d_model;
        let v = self.cfg.vocab;
        let x = self.gather(states, rows);
        let mut out = vec![T::zero(); rows.len() * v];
        let e = &self.params[self.layout.emb..self.layout.emb + v * d];
        gemm(T::one(), &x, View::full(rows.len(), d), false, e, View::full(v, d), true, T::zero(), &mut out, View::full(rows.len(), v));
        out
    }

    pub fn tok_backward(&self, states: &[T], rows: &[usize], dlogits: &[T], grads: &mut [T], d_states: &mut [T]) {
        let d = self.cfg.d_model;
        let v = self.cfg.vocab;
        let n = rows.len();
        let x = self.gather(states, rows);
        let e_off = self.layout.emb;
        let mut dx = vec![T::zero(); n * d];
        gemm(
            T::one(),
            dlogits,
            View::full(n, v),
            false,
            &self.params[e_off..e_off + v * d],
            View::full(v, d),
            false,
            T::zero(),
            &mut dx,
            View::full(n, d),
        );
        gemm(
            T::one(),
            dlogits,
            View::full(n, v),
            true,
            &x,
            View::full(n, d),
            false,
            T::one(),
            &mut grads[e_off..e_off + v * d],
            View::full(v, d),
        );
        self.scatter_add(d_states, rows, &dx);
    }
}

/// Rows of the interior tokens (everything but BOS and EOS) of each segment.
pub fn interior_rows(segs: &[Seg]) -> Vec<Vec<usize>> {
    segs.iter()
        .map(|s| (s.start + 1..s.start + s.len.saturating_sub(1)).collect())
        .collect()
}

/// Adjacent row pairs of each segment: `len - 1` gaps.
pub fn gap_rows(segs: &[Seg]) -> Vec<Vec<(usize, usize)>> {
    segs.iter()
        .map(|s| (0..s.len.saturating_sub(1)).map(|j| (s.start + j, s.start + j + 1)).collect())
        .collect()
}

/// Rows of a segment holding a placeholder.
pub fn plh_rows(tokens: &[TokenId], segs: &[Seg]) -> Vec<Vec<usize>> {
    segs.iter()
        .map(|s| (s.start..s.start + s.len).filter(|&r| tokens[r] == PLH_ID).collect())
        .collect()
}
