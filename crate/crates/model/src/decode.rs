//! Token-by-token evaluation with cached keys and values, used by the sampler.
//! Each step produces exactly the row the full forward pass would produce at
//! that position.

use treegen_core::vocab::RING_CLOSE_BASE;

use crate::model::{gelu, norm_forward, silu, Model, ModelError};
use crate::props::PropertyVector;
use crate::scalar::{dot, matmul, Scalar};

#[derive(Clone, Debug)]
struct LayerKv<S> {
    k: Vec<S>,
    v: Vec<S>,
}

/// Per-sequence decoding state.
#[derive(Clone, Debug)]
pub struct DecodeCache<S> {
    prop_emb: Vec<S>,
    layers: Vec<LayerKv<S>>,
    /// Final normalized hidden state of every consumed position.
    hidden: Vec<S>,
    pos: usize,
}

impl<S> DecodeCache<S> {
    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<S> {
    pub logits: Vec<S>,
    pub props: Vec<S>,
}

impl<S: Scalar> Model<S> {
    pub fn start(&self, props: &PropertyVector) -> Result<DecodeCache<S>, ModelError> {
        let prop_emb = self.encode_properties(props)?;
        Ok(DecodeCache {
            prop_emb,
            layers: vec![LayerKv { k: Vec::new(), v: Vec::new() }; self.config.n_layers],
            hidden: Vec::new(),
            pos: 0,
        })
    }

    /// Consumes `token` at the next position. `ring_count` and `anchors` are
    /// the annotations after this token, as in [`crate::SeqInput`].
    pub fn step(&self, cache: &mut DecodeCache<S>, token: u32, ring_count: usize, anchors: &[usize]) -> Result<StepOutput<S>, ModelError> {
        let cfg = &self.config;
        let ly = &self.layout;
        let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let f = cfg.ffn_hidden();
        let v = cfg.vocab_size;
        let t = cache.pos;
        let legacy = self.legacy();
        let eps = self.eps();
        if t >= cfg.max_len {
            return Err(ModelError::Length {
                len: t + 1,
                max: cfg.max_len,
            });
        }
        if token as usize >= v {
            return Err(ModelError::TokenRange(token));
        }
        if anchors.iter().any(|&a| a > t) {
            return Err(ModelError::Shape(format!("anchor after position {t}")));
        }

        let te = &self.p(ly.tok_emb)[token as usize * d..][..d];
        let rc = ring_count.min(cfg.r_max);
        let re = &self.p(ly.ring_emb)[rc * d..][..d];
        let mut x: Vec<S> = (0..d).map(|k| te[k] + re[k] + cache.prop_emb[k]).collect();
        if let Some(pos) = ly.pos_emb {
            let pe = &self.p(pos)[t * d..][..d];
            for k in 0..d {
                x[k] += pe[k];
            }
        }

        let scale = S::one() / S::of((dh as f64).sqrt());
        let n = t + 1;
        let mut scores = vec![S::zero(); n];
        for (bs, kv) in ly.blocks.iter().zip(&mut cache.layers) {
            let n1 = norm_forward(&x, d, self.p(bs.norm1_gain), bs.norm1_bias.map(|b| self.p(b)), legacy, eps);
            let mut qkv = matmul(&n1.y, self.p(bs.qkv), 1, d, 3 * d);
            if !legacy {
                self.rope().apply(&mut qkv[..d], t, false);
                self.rope().apply(&mut qkv[d..2 * d], t, false);
            }
            kv.k.extend_from_slice(&qkv[d..2 * d]);
            kv.v.extend_from_slice(&qkv[2 * d..]);
            let mut o = vec![S::zero(); d];
            for hd in 0..h {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                for j in 0..n {
                    scores[j] = dot(q, &kv.k[j * d + hd * dh..j * d + (hd + 1) * dh]) * scale;
                }
                let m = scores.iter().copied().fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for s in &mut scores {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let oh = &mut o[hd * dh..(hd + 1) * dh];
                for j in 0..n {
                    let a = scores[j] / z;
                    let vj = &kv.v[j * d + hd * dh..j * d + (hd + 1) * dh];
                    for c in 0..dh {
                        oh[c] += a * vj[c];
                    }
                }
            }
            let attn = matmul(&o, self.p(bs.attn_out), 1, d, d);
            for k in 0..d {
                x[k] += attn[k];
            }
            let n2 = norm_forward(&x, d, self.p(bs.norm2_gain), bs.norm2_bias.map(|b| self.p(b)), legacy, eps);
            let act: Vec<S> = if legacy {
                matmul(&n2.y, self.p(bs.ffn_in), 1, d, f).into_iter().map(gelu).collect()
            } else {
                let pre = matmul(&n2.y, self.p(bs.ffn_in), 1, d, 2 * f);
                (0..f).map(|j| silu(pre[j]) * pre[f + j]).collect()
            };
            let out = matmul(&act, self.p(bs.ffn_out), 1, f, d);
            for k in 0..d {
                x[k] += out[k];
            }
        }

        let fin = norm_forward(&x, d, self.p(ly.final_gain), ly.final_bias.map(|b| self.p(b)), legacy, eps);
        cache.hidden.extend_from_slice(&fin.y);
        cache.pos += 1;
        let mut logits = matmul(&fin.y, self.p(ly.head_tokens), 1, d, v);
        let props = matmul(&fin.y, self.p(ly.head_props), 1, d, self.spec.head_width());
        let eor0 = RING_CLOSE_BASE as usize;
        let n_eor = cfg.r_max.min(v.saturating_sub(eor0));
        let sim_scale = S::one() / S::of((d as f64).sqrt());
        logits[eor0..eor0 + n_eor].fill(S::neg_infinity());
        for (i, &a) in anchors.iter().enumerate().take(n_eor) {
            logits[eor0 + i] = dot(&fin.y, &cache.hidden[a * d..(a + 1) * d]) * sim_scale;
        }
        Ok(StepOutput { logits, props })
    }
}

#[cfg(test)]
mod tests {
    use crate::config::{Arch, PropEncoder};
    use crate::model::tests::{tiny_config, toy_inputs, toy_spec, toy_vocab};
    use crate::model::Model;

    fn check(arch: Arch, enc: PropEncoder) {
        let v = toy_vocab();
        let spec = toy_spec();
        let model: Model<f64> = Model::new(tiny_config(&v, arch, enc), spec.clone(), 21).unwrap();
        let vs = v.len();
        let pw = spec.head_width();
        for ex in toy_inputs(&v, &spec, 8) {
            let s = &ex.input;
            let full = &model.forward(std::slice::from_ref(s)).unwrap()[0];
            let mut cache = model.start(&s.props).unwrap();
            for t in 0..s.len() {
                let out = model.step(&mut cache, s.tokens[t], s.ring_counts[t], &s.anchors[t]).unwrap();
                for (a, b) in out.logits.iter().zip(&full.logits[t * vs..(t + 1) * vs]) {
                    assert!(a == b || (a - b).abs() < 1e-10, "t={t}: {a} vs {b}");
                }
                for (a, b) in out.props.iter().zip(&full.props[t * pw..(t + 1) * pw]) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
            assert_eq!(cache.len(), s.len());
        }
    }

    #[test]
    fn incremental_matches_full_forward() {
        check(Arch::Modern, PropEncoder::Mlp);
    }

    #[test]
    fn legacy_incremental_matches_full_forward() {
        check(Arch::Legacy, PropEncoder::Linear);
    }
}
