//! The conditional Transformer: forward pass, exact backward pass and loss.
//!
//! Sequences in a batch are packed row-wise (no padding inside the model);
//! attention is computed per sequence. Position `t` sees the sum of its token
//! embedding, the embedding of the number of rings open after token `t`, and
//! the property embedding of the sequence. Logits for `[eor-i]` come from a
//! similarity head: the scaled dot product between the final hidden state at
//! `t` and the one at the `[bor]` of the i-th open anchor.

use treegen_core::vocab::{PAD, RING_CLOSE_BASE};

use crate::config::{Arch, ConfigError, ModelConfig};
use crate::params::{Layout, Params};
use crate::props::{PropValue, PropertyKind, PropertySpec, PropertyVector};
use crate::scalar::{dot, gemm, matmul, sigmoid, Op, Scalar};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },
    #[error("token id {0} is outside the model vocabulary")]
    TokenRange(u32),
    #[error("input shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// One sequence with its per-position annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqInput {
    pub tokens: Vec<u32>,
    /// Open anchors after consuming each token.
    pub ring_counts: Vec<usize>,
    /// Sequence positions of the `[bor]` of each open anchor after each token,
    /// oldest first.
    pub anchors: Vec<Vec<usize>>,
    /// Conditioning properties (standardized, possibly partly missing).
    pub props: PropertyVector,
}

impl SeqInput {
    /// Length without trailing padding.
    pub fn len(&self) -> usize {
        self.tokens.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub input: SeqInput,
    /// Unmasked standardized properties of the whole molecule.
    pub target: PropertyVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqOutput<S> {
    /// `len x vocab_size`.
    pub logits: Vec<S>,
    /// `len x head_width`.
    pub props: Vec<S>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub token_ce: f64,
    pub prop_mse: f64,
    pub prop_ce: f64,
    pub n_targets: usize,
}

/// Rotary embedding tables: `cos`/`sin` of `pos * base^(-2i/head_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rope<S> {
    half: usize,
    cos: Vec<S>,
    sin: Vec<S>,
}

impl<S: Scalar> Rope<S> {
    pub fn new(max_pos: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_pos * half);
        let mut sin = Vec::with_capacity(max_pos * half);
        for p in 0..max_pos {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
                cos.push(S::of(theta.cos()));
                sin.push(S::of(theta.sin()));
            }
        }
        Rope { half, cos, sin }
    }

    /// Rotates each head of `row` (width `n_heads * head_dim`) to position
    /// `pos`; `inverse` applies the transpose rotation.
    pub fn apply(&self, row: &mut [S], pos: usize, inverse: bool) {
        let c = &self.cos[pos * self.half..(pos + 1) * self.half];
        let s = &self.sin[pos * self.half..(pos + 1) * self.half];
        for head in row.chunks_exact_mut(2 * self.half) {
            for i in 0..self.half {
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                let sn = if inverse { -s[i] } else { s[i] };
                head[2 * i] = x0 * c[i] - x1 * sn;
                head[2 * i + 1] = x0 * sn + x1 * c[i];
            }
        }
    }
}

pub(crate) struct NormOut<S> {
    pub y: Vec<S>,
    pub xhat: Vec<S>,
    pub inv: Vec<S>,
}

/// RMSNorm (`bias == None`, `center == false`) or LayerNorm over rows of width `d`.
pub(crate) fn norm_forward<S: Scalar>(x: &[S], d: usize, gain: &[S], bias: Option<&[S]>, center: bool, eps: S) -> NormOut<S> {
    let rows = x.len() / d;
    let mut y = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    let mut inv = vec![S::zero(); rows];
    let dn = S::of(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = if center { xr.iter().copied().sum::<S>() / dn } else { S::zero() };
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
        let iv = S::one() / (var + eps).sqrt();
        inv[r] = iv;
        for j in 0..d {
            let h = (xr[j] - mean) * iv;
            xhat[r * d + j] = h;
            y[r * d + j] = gain[j] * h + bias.map_or(S::zero(), |b| b[j]);
        }
    }
    NormOut { y, xhat, inv }
}

/// Accumulates into `dx`, `dgain` and `dbias`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_backward<S: Scalar>(
    dy: &[S],
    xhat: &[S],
    inv: &[S],
    gain: &[S],
    center: bool,
    dx: &mut [S],
    dgain: &mut [S],
    mut dbias: Option<&mut [S]>,
) {
    let d = gain.len();
    let dn = S::of(d as f64);
    let mut gy = vec![S::zero(); d];
    for r in 0..inv.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_gy = S::zero();
        let mut mean_gyx = S::zero();
        for j in 0..d {
            gy[j] = gain[j] * dyr[j];
            mean_gy += gy[j];
            mean_gyx += gy[j] * xr[j];
            dgain[j] += dyr[j] * xr[j];
        }
        if let Some(db) = dbias.as_deref_mut() {
            for j in 0..d {
                db[j] += dyr[j];
            }
        }
        mean_gy /= dn;
        mean_gyx /= dn;
        if !center {
            mean_gy = S::zero();
        }
        for j in 0..d {
            dx[r * d + j] += inv[r] * (gy[j] - mean_gy - xr[j] * mean_gyx);
        }
    }
}

pub(crate) fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let k = S::of(0.044715);
    S::of(0.5) * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let k = S::of(0.044715);
    let t = (c * (x + k * x * x * x)).tanh();
    S::of(0.5) * (S::one() + t) + S::of(0.5) * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * k * x * x)
}

/// Row-wise causal softmax of a `len x len` score block, in place.
fn causal_softmax<S: Scalar>(s: &mut [S], len: usize) {
    for i in 0..len {
        let row = &mut s[i * len..(i + 1) * len];
        let m = row[..=i].iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for v in &mut row[..=i] {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in &mut row[..=i] {
            *v /= z;
        }
        row[i + 1..].fill(S::zero());
    }
}

struct BlockCache<S> {
    n1: NormOut<S>,
    /// Queries and keys after rotation, values as projected.
    qkv: Vec<S>,
    /// Attention probabilities, one `len x len` block per (sequence, head).
    att: Vec<S>,
    o: Vec<S>,
    n2: NormOut<S>,
    /// FFN pre-activations (`[gate | value]` for SwiGLU).
    pre: Vec<S>,
    act: Vec<S>,
}

struct PropCache<S> {
    /// Continuous features per sequence.
    c: Vec<S>,
    /// First-layer pre-activation per sequence.
    u: Vec<S>,
    /// Category ids per sequence (missing = cardinality).
    cats: Vec<Vec<usize>>,
}

pub(crate) struct Run<S> {
    offsets: Vec<usize>,
    rows: usize,
    prop: PropCache<S>,
    blocks: Vec<BlockCache<S>>,
    fin: NormOut<S>,
    logits: Vec<S>,
    props: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub spec: PropertySpec,
    pub layout: Layout,
    pub params: Params<S>,
    rope: Rope<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, spec: PropertySpec, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config, &spec);
        let params = Params::init(&layout, &config, seed);
        Ok(Self::from_parts(config, spec, params))
    }

    /// Assembles a model from existing parameters laid out for `config`/`spec`.
    pub fn from_parts(config: ModelConfig, spec: PropertySpec, params: Params<S>) -> Self {
        let layout = Layout::new(&config, &spec);
        assert_eq!(layout.total, params.data.len(), "parameter count does not match layout");
        let rope = Rope::new(config.max_len, config.head_dim(), config.rope_base);
        Model {
            config,
            spec,
            layout,
            params,
            rope,
        }
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model::from_parts(self.config.clone(), self.spec.clone(), self.params.cast())
    }

    pub(crate) fn p(&self, id: usize) -> &[S] {
        self.params.t(&self.layout, id)
    }

    pub(crate) fn rope(&self) -> &Rope<S> {
        &self.rope
    }

    pub(crate) fn eps(&self) -> S {
        S::of(self.config.norm_eps)
    }

    pub(crate) fn legacy(&self) -> bool {
        self.config.arch == Arch::Legacy
    }

    /// Property embedding added at every position, with its cache entries.
    pub(crate) fn prop_embedding(&self, pv: &PropertyVector) -> Result<(Vec<S>, Vec<S>, Vec<S>, Vec<usize>), ModelError> {
        if pv.values.len() != self.spec.len() {
            return Err(ModelError::Shape(format!(
                "{} property values for a spec of {}",
                pv.values.len(),
                self.spec.len()
            )));
        }
        for (v, p) in pv.values.iter().zip(&self.spec.props) {
            let ok = matches!(
                (v, p.kind),
                (PropValue::Continuous(_), PropertyKind::Continuous) | (PropValue::Categorical(_), PropertyKind::Categorical { .. })
            );
            if !ok {
                return Err(ModelError::Shape(format!("property `{}` has the wrong kind", p.name)));
            }
        }
        let d = self.config.d_model;
        let c: Vec<S> = pv.continuous_features().into_iter().map(S::of).collect();
        let u = matmul(&c, self.p(self.layout.prop_w1), 1, c.len(), d);
        let mut out = match self.layout.prop_w2 {
            Some(w2) => {
                let s: Vec<S> = u.iter().map(|&x| silu(x)).collect();
                matmul(&s, self.p(w2), 1, d, d)
            }
            None => u.clone(),
        };
        let cats = pv.category_ids(&self.spec);
        for (j, &id) in cats.iter().enumerate() {
            let e = self.p(self.layout.cat_emb[j]);
            for k in 0..d {
                out[k] += e[id * d + k];
            }
        }
        Ok((out, c, u, cats))
    }

    /// Property embedding of `pv` (the vector added to every token embedding).
    pub fn encode_properties(&self, pv: &PropertyVector) -> Result<Vec<S>, ModelError> {
        Ok(self.prop_embedding(pv)?.0)
    }

    fn check_input(&self, s: &SeqInput) -> Result<usize, ModelError> {
        let len = s.len();
        if len == 0 {
            return Err(ModelError::Shape("empty sequence".into()));
        }
        if len > self.config.max_len {
            return Err(ModelError::Length {
                len,
                max: self.config.max_len,
            });
        }
        if s.ring_counts.len() < len || s.anchors.len() < len {
            return Err(ModelError::Shape("ring counts or anchors shorter than the sequence".into()));
        }
        for &t in &s.tokens[..len] {
            if t as usize >= self.config.vocab_size {
                return Err(ModelError::TokenRange(t));
            }
        }
        for (t, a) in s.anchors[..len].iter().enumerate() {
            if a.iter().any(|&p| p > t) {
                return Err(ModelError::Shape(format!("anchor after position {t}")));
            }
        }
        Ok(len)
    }

    pub(crate) fn run(&self, batch: &[&SeqInput]) -> Result<Run<S>, ModelError> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let (h, dh) = (cfg.n_heads, cfg.head_dim());
        let f = cfg.ffn_hidden();
        let v = cfg.vocab_size;
        let pw = self.spec.head_width();
        let legacy = self.legacy();
        let eps = self.eps();

        let mut offsets = vec![0];
        for s in batch {
            let len = self.check_input(s)?;
            offsets.push(offsets.last().unwrap() + len);
        }
        let rows = *offsets.last().unwrap();

        let mut prop = PropCache {
            c: Vec::new(),
            u: Vec::new(),
            cats: Vec::new(),
        };
        let mut x = vec![S::zero(); rows * d];
        let tok = self.p(self.layout.tok_emb);
        let ring = self.p(self.layout.ring_emb);
        for (b, s) in batch.iter().enumerate() {
            let (pe, c, u, cats) = self.prop_embedding(&s.props)?;
            prop.c.extend(c);
            prop.u.extend(u);
            prop.cats.push(cats);
            for t in 0..offsets[b + 1] - offsets[b] {
                let r = offsets[b] + t;
                let row = &mut x[r * d..(r + 1) * d];
                let te = &tok[s.tokens[t] as usize * d..][..d];
                let rc = s.ring_counts[t].min(cfg.r_max);
                let re = &ring[rc * d..][..d];
                for k in 0..d {
                    row[k] = te[k] + re[k] + pe[k];
                }
                if let Some(pos) = self.layout.pos_emb {
                    let pe = &self.p(pos)[t * d..][..d];
                    for k in 0..d {
                        row[k] += pe[k];
                    }
                }
            }
        }

        let scale = S::one() / S::of((dh as f64).sqrt());
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for bs in &self.layout.blocks {
            let n1 = norm_forward(&x, d, self.p(bs.norm1_gain), bs.norm1_bias.map(|b| self.p(b)), legacy, eps);
            let mut qkv = matmul(&n1.y, self.p(bs.qkv), rows, d, 3 * d);
            if !legacy {
                for (b, _) in batch.iter().enumerate() {
                    for t in 0..offsets[b + 1] - offsets[b] {
                        let r = offsets[b] + t;
                        let row = &mut qkv[r * 3 * d..(r + 1) * 3 * d];
                        self.rope.apply(&mut row[..d], t, false);
                        self.rope.apply(&mut row[d..2 * d], t, false);
                    }
                }
            }
            let att_len: usize = (0..batch.len()).map(|b| (offsets[b + 1] - offsets[b]).pow(2) * h).sum();
            let mut att = vec![S::zero(); att_len];
            let mut o = vec![S::zero(); rows * d];
            let mut a_off = 0;
            for b in 0..batch.len() {
                let (r0, len) = (offsets[b], offsets[b + 1] - offsets[b]);
                for hd in 0..h {
                    let a = &mut att[a_off..a_off + len * len];
                    let q = &qkv[r0 * 3 * d + hd * dh..];
                    let k = &qkv[r0 * 3 * d + d + hd * dh..];
                    gemm(len, len, dh, scale, q, Op::n(3 * d), k, Op::t(3 * d), S::zero(), a, len);
                    causal_softmax(a, len);
                    let vv = &qkv[r0 * 3 * d + 2 * d + hd * dh..];
                    gemm(len, dh, len, S::one(), a, Op::n(len), vv, Op::n(3 * d), S::zero(), &mut o[r0 * d + hd * dh..], d);
                    a_off += len * len;
                }
            }
            // x <- x + o W_o
            gemm(rows, d, d, S::one(), &o, Op::n(d), self.p(bs.attn_out), Op::n(d), S::one(), &mut x, d);
            let n2 = norm_forward(&x, d, self.p(bs.norm2_gain), bs.norm2_bias.map(|b| self.p(b)), legacy, eps);
            let (pre, act) = if legacy {
                let pre = matmul(&n2.y, self.p(bs.ffn_in), rows, d, f);
                let act: Vec<S> = pre.iter().map(|&a| gelu(a)).collect();
                (pre, act)
            } else {
                let pre = matmul(&n2.y, self.p(bs.ffn_in), rows, d, 2 * f);
                let mut act = vec![S::zero(); rows * f];
                for r in 0..rows {
                    let pr = &pre[r * 2 * f..(r + 1) * 2 * f];
                    for j in 0..f {
                        act[r * f + j] = silu(pr[j]) * pr[f + j];
                    }
                }
                (pre, act)
            };
            gemm(rows, d, f, S::one(), &act, Op::n(f), self.p(bs.ffn_out), Op::n(d), S::one(), &mut x, d);
            blocks.push(BlockCache {
                n1,
                qkv,
                att,
                o,
                n2,
                pre,
                act,
            });
        }

        let fin = norm_forward(
            &x,
            d,
            self.p(self.layout.final_gain),
            self.layout.final_bias.map(|b| self.p(b)),
            legacy,
            eps,
        );
        let mut logits = matmul(&fin.y, self.p(self.layout.head_tokens), rows, d, v);
        let props = matmul(&fin.y, self.p(self.layout.head_props), rows, d, pw);
        let sim_scale = S::one() / S::of((d as f64).sqrt());
        let eor0 = RING_CLOSE_BASE as usize;
        let n_eor = cfg.r_max.min(v.saturating_sub(eor0));
        for (b, s) in batch.iter().enumerate() {
            for t in 0..offsets[b + 1] - offsets[b] {
                let r = offsets[b] + t;
                let hr = &fin.y[r * d..(r + 1) * d];
                let lr = &mut logits[r * v + eor0..r * v + eor0 + n_eor];
                lr.fill(S::neg_infinity());
                for (i, &a) in s.anchors[t].iter().enumerate().take(n_eor) {
                    let ha = &fin.y[(offsets[b] + a) * d..(offsets[b] + a + 1) * d];
                    lr[i] = dot(hr, ha) * sim_scale;
                }
            }
        }

        Ok(Run {
            offsets,
            rows,
            prop,
            blocks,
            fin,
            logits,
            props,
        })
    }

    pub fn forward(&self, batch: &[SeqInput]) -> Result<Vec<SeqOutput<S>>, ModelError> {
        let refs: Vec<&SeqInput> = batch.iter().collect();
        let run = self.run(&refs)?;
        let (v, pw) = (self.config.vocab_size, self.spec.head_width());
        Ok((0..batch.len())
            .map(|b| {
                let (r0, r1) = (run.offsets[b], run.offsets[b + 1]);
                SeqOutput {
                    logits: run.logits[r0 * v..r1 * v].to_vec(),
                    props: run.props[r0 * pw..r1 * pw].to_vec(),
                }
            })
            .collect())
    }

    /// Loss terms and their output gradients (`dlogits`, `dprops`) for a run.
    fn loss_terms(&self, run: &Run<S>, batch: &[&TrainExample], lambda: f64, want_grad: bool) -> Result<(LossParts, Vec<S>, Vec<S>), ModelError> {
        let v = self.config.vocab_size;
        let pw = self.spec.head_width();
        let nc = self.spec.n_continuous();
        let cards = self.spec.cardinalities();

        let mut n_tok = 0usize;
        let mut n_cont = 0usize;
        let mut n_cat = 0usize;
        for (b, ex) in batch.iter().enumerate() {
            let len = run.offsets[b + 1] - run.offsets[b];
            n_tok += len - 1;
            let cont_known = ex.target.continuous_features()[..nc].len()
                - ex.target.continuous_features()[nc..].iter().filter(|&&m| m == 1.0).count();
            n_cont += len * cont_known;
            n_cat += len * ex.target.category_ids(&self.spec).iter().zip(&cards).filter(|(id, c)| id < c).count();
        }
        if n_tok == 0 {
            return Err(ModelError::Shape("batch has no next-token targets".into()));
        }

        let mut dlogits = if want_grad { vec![S::zero(); run.rows * v] } else { Vec::new() };
        let mut dprops = if want_grad { vec![S::zero(); run.rows * pw] } else { Vec::new() };
        let mut ce = 0.0f64;
        let mut mse = 0.0f64;
        let mut pce = 0.0f64;
        let inv_tok = 1.0 / n_tok as f64;
        let lam = lambda;

        for (b, ex) in batch.iter().enumerate() {
            let r0 = run.offsets[b];
            let len = run.offsets[b + 1] - r0;
            let toks = &ex.input.tokens;
            for t in 0..len - 1 {
                let r = r0 + t;
                let row = &run.logits[r * v..(r + 1) * v];
                let target = toks[t + 1] as usize;
                let m = row.iter().copied().fold(S::neg_infinity(), S::max).f64();
                let z: f64 = row.iter().map(|&l| (l.f64() - m).exp()).sum();
                let lse = m + z.ln();
                ce += lse - row[target].f64();
                if want_grad {
                    let g = &mut dlogits[r * v..(r + 1) * v];
                    for j in 0..v {
                        g[j] = S::of((row[j].f64() - lse).exp() * inv_tok);
                    }
                    g[target] -= S::of(inv_tok);
                }
            }

            let feats = ex.target.continuous_features();
            let cats = ex.target.category_ids(&self.spec);
            for t in 0..len {
                let r = r0 + t;
                let pr = &run.props[r * pw..(r + 1) * pw];
                for j in 0..nc {
                    if feats[nc + j] == 1.0 {
                        continue;
                    }
                    let diff = pr[j].f64() - feats[j];
                    mse += diff * diff;
                    if want_grad {
                        dprops[r * pw + j] = S::of(lam * 2.0 * diff / n_cont as f64);
                    }
                }
                let mut off = nc;
                for (k, &card) in cards.iter().enumerate() {
                    let id = cats[k];
                    if id < card {
                        let sl = &pr[off..off + card];
                        let m = sl.iter().copied().fold(S::neg_infinity(), S::max).f64();
                        let z: f64 = sl.iter().map(|&l| (l.f64() - m).exp()).sum();
                        let lse = m + z.ln();
                        pce += lse - sl[id].f64();
                        if want_grad {
                            for c in 0..card {
                                let p = (sl[c].f64() - lse).exp();
                                let y = if c == id { 1.0 } else { 0.0 };
                                dprops[r * pw + off + c] = S::of(lam * (p - y) / n_cat as f64);
                            }
                        }
                    }
                    off += card;
                }
            }
        }
        let token_ce = ce * inv_tok;
        let prop_mse = if n_cont > 0 { mse / n_cont as f64 } else { 0.0 };
        let prop_ce = if n_cat > 0 { pce / n_cat as f64 } else { 0.0 };
        let total = token_ce + lambda * (prop_mse + prop_ce);
        if !total.is_finite() {
            return Err(ModelError::NonFinite("loss"));
        }
        Ok((
            LossParts {
                total,
                token_ce,
                prop_mse,
                prop_ce,
                n_targets: n_tok,
            },
            dlogits,
            dprops,
        ))
    }

    pub fn loss(&self, batch: &[TrainExample], lambda: f64) -> Result<LossParts, ModelError> {
        let refs: Vec<&TrainExample> = batch.iter().collect();
        let inputs: Vec<&SeqInput> = refs.iter().map(|e| &e.input).collect();
        let run = self.run(&inputs)?;
        Ok(self.loss_terms(&run, &refs, lambda, false)?.0)
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[TrainExample], lambda: f64) -> Result<(LossParts, Params<S>), ModelError> {
        let refs: Vec<&TrainExample> = batch.iter().collect();
        let inputs: Vec<&SeqInput> = refs.iter().map(|e| &e.input).collect();
        let run = self.run(&inputs)?;
        let (parts, dlogits, dprops) = self.loss_terms(&run, &refs, lambda, true)?;
        let grads = self.backward(&run, &inputs, dlogits, dprops);
        if !grads.is_finite() {
            return Err(ModelError::NonFinite("gradient"));
        }
        Ok((parts, grads))
    }

    fn backward(&self, run: &Run<S>, batch: &[&SeqInput], mut dlogits: Vec<S>, dprops: Vec<S>) -> Params<S> {
        let cfg = &self.config;
        let ly = &self.layout;
        let d = cfg.d_model;
        let (h, dh) = (cfg.n_heads, cfg.head_dim());
        let f = cfg.ffn_hidden();
        let v = cfg.vocab_size;
        let pw = self.spec.head_width();
        let rows = run.rows;
        let legacy = self.legacy();
        let mut g = Params::zeros(ly);
        let one = S::one();

        // Similarity head.
        let mut dfin = vec![S::zero(); rows * d];
        let sim_scale = one / S::of((d as f64).sqrt());
        let eor0 = RING_CLOSE_BASE as usize;
        let n_eor = cfg.r_max.min(v.saturating_sub(eor0));
        for (b, s) in batch.iter().enumerate() {
            let r0 = run.offsets[b];
            for t in 0..run.offsets[b + 1] - r0 {
                let r = r0 + t;
                for (i, &a) in s.anchors[t].iter().enumerate().take(n_eor) {
                    let gl = dlogits[r * v + eor0 + i] * sim_scale;
                    if gl == S::zero() {
                        continue;
                    }
                    let ra = r0 + a;
                    for k in 0..d {
                        let (hr, ha) = (run.fin.y[r * d + k], run.fin.y[ra * d + k]);
                        dfin[r * d + k] += gl * ha;
                        dfin[ra * d + k] += gl * hr;
                    }
                }
                dlogits[r * v + eor0..r * v + eor0 + n_eor].fill(S::zero());
            }
        }

        // Output heads.
        gemm(d, v, rows, one, &run.fin.y, Op::t(d), &dlogits, Op::n(v), S::zero(), g.t_mut(ly, ly.head_tokens), v);
        gemm(rows, d, v, one, &dlogits, Op::n(v), self.p(ly.head_tokens), Op::t(v), one, &mut dfin, d);
        if pw > 0 {
            gemm(d, pw, rows, one, &run.fin.y, Op::t(d), &dprops, Op::n(pw), S::zero(), g.t_mut(ly, ly.head_props), pw);
            gemm(rows, d, pw, one, &dprops, Op::n(pw), self.p(ly.head_props), Op::t(pw), one, &mut dfin, d);
        }

        let mut dx = vec![S::zero(); rows * d];
        {
            let (dg, db) = split_gain_bias(&mut g, ly, ly.final_gain, ly.final_bias);
            norm_backward(&dfin, &run.fin.xhat, &run.fin.inv, self.p(ly.final_gain), legacy, &mut dx, dg, db);
        }

        let scale = one / S::of((dh as f64).sqrt());
        for (bs, c) in ly.blocks.iter().zip(&run.blocks).rev() {
            // Feed-forward block.
            let mut dact = vec![S::zero(); rows * f];
            gemm(f, d, rows, one, &c.act, Op::t(f), &dx, Op::n(d), S::zero(), g.t_mut(ly, bs.ffn_out), d);
            gemm(rows, f, d, one, &dx, Op::n(d), self.p(bs.ffn_out), Op::t(d), S::zero(), &mut dact, f);
            let win = if legacy { f } else { 2 * f };
            let mut dpre = vec![S::zero(); rows * win];
            if legacy {
                for i in 0..rows * f {
                    dpre[i] = dact[i] * gelu_grad(c.pre[i]);
                }
            } else {
                for r in 0..rows {
                    let pr = &c.pre[r * 2 * f..(r + 1) * 2 * f];
                    for j in 0..f {
                        let da = dact[r * f + j];
                        dpre[r * 2 * f + j] = da * pr[f + j] * silu_grad(pr[j]);
                        dpre[r * 2 * f + f + j] = da * silu(pr[j]);
                    }
                }
            }
            gemm(d, win, rows, one, &c.n2.y, Op::t(d), &dpre, Op::n(win), S::zero(), g.t_mut(ly, bs.ffn_in), win);
            let mut dn2 = vec![S::zero(); rows * d];
            gemm(rows, d, win, one, &dpre, Op::n(win), self.p(bs.ffn_in), Op::t(win), S::zero(), &mut dn2, d);
            {
                let (dg, db) = split_gain_bias(&mut g, ly, bs.norm2_gain, bs.norm2_bias);
                norm_backward(&dn2, &c.n2.xhat, &c.n2.inv, self.p(bs.norm2_gain), legacy, &mut dx, dg, db);
            }

            // Attention block.
            gemm(d, d, rows, one, &c.o, Op::t(d), &dx, Op::n(d), S::zero(), g.t_mut(ly, bs.attn_out), d);
            let mut d_o = vec![S::zero(); rows * d];
            gemm(rows, d, d, one, &dx, Op::n(d), self.p(bs.attn_out), Op::t(d), S::zero(), &mut d_o, d);
            let mut dqkv = vec![S::zero(); rows * 3 * d];
            let mut a_off = 0;
            for b in 0..batch.len() {
                let (r0, len) = (run.offsets[b], run.offsets[b + 1] - run.offsets[b]);
                let mut da = vec![S::zero(); len * len];
                for hd in 0..h {
                    let a = &c.att[a_off..a_off + len * len];
                    let q = &c.qkv[r0 * 3 * d + hd * dh..];
                    let k = &c.qkv[r0 * 3 * d + d + hd * dh..];
                    let vv = &c.qkv[r0 * 3 * d + 2 * d + hd * dh..];
                    let dob = &d_o[r0 * d + hd * dh..];
                    gemm(len, len, dh, one, dob, Op::n(d), vv, Op::t(3 * d), S::zero(), &mut da, len);
                    gemm(len, dh, len, one, a, Op::t(len), dob, Op::n(d), S::zero(), &mut dqkv[r0 * 3 * d + 2 * d + hd * dh..], 3 * d);
                    for i in 0..len {
                        let ar = &a[i * len..(i + 1) * len];
                        let dr = &mut da[i * len..(i + 1) * len];
                        let s: S = (0..=i).map(|j| ar[j] * dr[j]).sum();
                        for j in 0..=i {
                            dr[j] = ar[j] * (dr[j] - s) * scale;
                        }
                        dr[i + 1..].fill(S::zero());
                    }
                    gemm(len, dh, len, one, &da, Op::n(len), k, Op::n(3 * d), S::zero(), &mut dqkv[r0 * 3 * d + hd * dh..], 3 * d);
                    gemm(len, dh, len, one, &da, Op::t(len), q, Op::n(3 * d), S::zero(), &mut dqkv[r0 * 3 * d + d + hd * dh..], 3 * d);
                    a_off += len * len;
                }
                if !legacy {
                    for t in 0..len {
                        let row = &mut dqkv[(r0 + t) * 3 * d..(r0 + t + 1) * 3 * d];
                        self.rope.apply(&mut row[..d], t, true);
                        self.rope.apply(&mut row[d..2 * d], t, true);
                    }
                }
            }
            gemm(d, 3 * d, rows, one, &c.n1.y, Op::t(d), &dqkv, Op::n(3 * d), S::zero(), g.t_mut(ly, bs.qkv), 3 * d);
            let mut dn1 = vec![S::zero(); rows * d];
            gemm(rows, d, 3 * d, one, &dqkv, Op::n(3 * d), self.p(bs.qkv), Op::t(3 * d), S::zero(), &mut dn1, d);
            {
                let (dg, db) = split_gain_bias(&mut g, ly, bs.norm1_gain, bs.norm1_bias);
                norm_backward(&dn1, &c.n1.xhat, &c.n1.inv, self.p(bs.norm1_gain), legacy, &mut dx, dg, db);
            }
        }

        // Embeddings.
        let nc2 = 2 * self.spec.n_continuous();
        for (b, s) in batch.iter().enumerate() {
            let r0 = run.offsets[b];
            let len = run.offsets[b + 1] - r0;
            let mut dp = vec![S::zero(); d];
            for t in 0..len {
                let dr = &dx[(r0 + t) * d..(r0 + t + 1) * d];
                let tok = s.tokens[t] as usize;
                let te = &mut g.t_mut(ly, ly.tok_emb)[tok * d..(tok + 1) * d];
                for k in 0..d {
                    te[k] += dr[k];
                }
                let rc = s.ring_counts[t].min(cfg.r_max);
                let re = &mut g.t_mut(ly, ly.ring_emb)[rc * d..(rc + 1) * d];
                for k in 0..d {
                    re[k] += dr[k];
                }
                if let Some(pos) = ly.pos_emb {
                    let pe = &mut g.t_mut(ly, pos)[t * d..(t + 1) * d];
                    for k in 0..d {
                        pe[k] += dr[k];
                    }
                }
                for k in 0..d {
                    dp[k] += dr[k];
                }
            }
            for (j, &id) in run.prop.cats[b].iter().enumerate() {
                let ce = &mut g.t_mut(ly, ly.cat_emb[j])[id * d..(id + 1) * d];
                for k in 0..d {
                    ce[k] += dp[k];
                }
            }
            let cfeat = &run.prop.c[b * nc2..(b + 1) * nc2];
            let u = &run.prop.u[b * d..(b + 1) * d];
            let du: Vec<S> = match ly.prop_w2 {
                Some(w2) => {
                    let s_act: Vec<S> = u.iter().map(|&x| silu(x)).collect();
                    gemm(d, d, 1, one, &s_act, Op::t(d), &dp, Op::n(d), one, g.t_mut(ly, w2), d);
                    let mut ds = vec![S::zero(); d];
                    gemm(1, d, d, one, &dp, Op::n(d), self.p(w2), Op::t(d), S::zero(), &mut ds, d);
                    ds.iter().zip(u).map(|(&g, &x)| g * silu_grad(x)).collect()
                }
                None => dp,
            };
            if nc2 > 0 {
                gemm(nc2, d, 1, one, cfeat, Op::t(nc2), &du, Op::n(d), one, g.t_mut(ly, ly.prop_w1), d);
            }
        }
                g
    }
}

/// Disjoint mutable views of a norm's gain and optional bias gradients.
fn split_gain_bias<'a, S: Scalar>(g: &'a mut Params<S>, ly: &Layout, gain: usize, bias: Option<usize>) -> (&'a mut [S], Option<&'a mut [S]>) {
    let gr = ly.tensors[gain].range();
    match bias {
        None => (&mut g.data[gr], None),
        Some(b) => {
            let br = ly.tensors[b].range();
            assert_eq!(gr.end, br.start, "bias follows its gain");
            let (lo, hi) = g.data.split_at_mut(br.start);
            (&mut lo[gr], Some(&mut hi[..br.len()]))
        }
    }
}

/// Standardized property vector read from one row of the property head:
/// continuous entries as predicted, categorical ones as the argmax.
pub fn decode_property_row<S: Scalar>(spec: &PropertySpec, row: &[S]) -> PropertyVector {
    let nc = spec.n_continuous();
    let mut ci = 0;
    let mut off = nc;
    let values = spec
        .props
        .iter()
        .map(|p| match p.kind {
            PropertyKind::Continuous => {
                ci += 1;
                PropValue::Continuous(Some(row[ci - 1].f64()))
            }
            PropertyKind::Categorical { cardinality } => {
                let sl = &row[off..off + cardinality];
                off += cardinality;
                let best = (0..cardinality).fold(0, |b, i| if sl[i] > sl[b] { i } else { b });
                PropValue::Categorical(Some(best))
            }
        })
        .collect();
    PropertyVector { values }
}
