//! Flat parameter storage with a named tensor layout.
//!
//! All tensors live in one contiguous buffer so the optimizer, gradient
//! accumulation and checkpointing work on a single slice.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{Arch, ModelConfig, PropEncoder};
use crate::props::PropertySpec;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    /// Residual-branch output projection: std scaled by 1/sqrt(2 * n_layers).
    Residual,
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub init: Init,
    /// Subject to weight decay (matrices and embeddings, not norm parameters).
    pub decay: bool,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Tensor indices of one Transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSlots {
    pub norm1_gain: usize,
    pub norm1_bias: Option<usize>,
    /// `d x 3d`: query, key and value projections side by side.
    pub qkv: usize,
    pub attn_out: usize,
    pub norm2_gain: usize,
    pub norm2_bias: Option<usize>,
    /// `d x 2f` (gate and value halves) for SwiGLU, `d x f` for GELU.
    pub ffn_in: usize,
    pub ffn_out: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
    pub tok_emb: usize,
    pub ring_emb: usize,
    pub pos_emb: Option<usize>,
    pub prop_w1: usize,
    pub prop_w2: Option<usize>,
    pub cat_emb: Vec<usize>,
    pub blocks: Vec<BlockSlots>,
    pub final_gain: usize,
    pub final_bias: Option<usize>,
    pub head_tokens: usize,
    pub head_props: usize,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let decay = matches!(init, Init::Normal | Init::Residual);
        self.tensors.push(TensorInfo {
            name,
            rows,
            cols,
            offset: self.total,
            init,
            decay,
        });
        self.total += rows * cols;
        self.tensors.len() - 1
    }
}

impl Layout {
    pub fn new(config: &ModelConfig, spec: &PropertySpec) -> Layout {
        let d = config.d_model;
        let f = config.ffn_hidden();
        let legacy = config.arch == Arch::Legacy;
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let tok_emb = b.add("tok_emb".into(), config.vocab_size, d, Init::Normal);
        let ring_emb = b.add("ring_emb".into(), config.r_max + 1, d, Init::Normal);
        let pos_emb = legacy.then(|| b.add("pos_emb".into(), config.max_len, d, Init::Normal));
        let nc = spec.n_continuous();
        let prop_w1 = b.add("prop.w1".into(), 2 * nc, d, Init::Normal);
        let prop_w2 = (config.prop_encoder == PropEncoder::Mlp).then(|| b.add("prop.w2".into(), d, d, Init::Normal));
        let cat_emb = spec
            .cardinalities()
            .iter()
            .enumerate()
            .map(|(j, &card)| b.add(format!("prop.cat{j}"), card + 1, d, Init::Normal))
            .collect();
        let blocks = (0..config.n_layers)
            .map(|l| {
                let norm1_gain = b.add(format!("block{l}.norm1.gain"), 1, d, Init::Ones);
                let norm1_bias = legacy.then(|| b.add(format!("block{l}.norm1.bias"), 1, d, Init::Zeros));
                let qkv = b.add(format!("block{l}.attn.qkv"), d, 3 * d, Init::Normal);
                let attn_out = b.add(format!("block{l}.attn.out"), d, d, Init::Residual);
                let norm2_gain = b.add(format!("block{l}.norm2.gain"), 1, d, Init::Ones);
                let norm2_bias = legacy.then(|| b.add(format!("block{l}.norm2.bias"), 1, d, Init::Zeros));
                let ffn_in = b.add(format!("block{l}.ffn.in"), d, if legacy { f } else { 2 * f }, Init::Normal);
                let ffn_out = b.add(format!("block{l}.ffn.out"), f, d, Init::Residual);
                BlockSlots {
                    norm1_gain,
                    norm1_bias,
                    qkv,
                    attn_out,
                    norm2_gain,
                    norm2_bias,
                    ffn_in,
                    ffn_out,
                }
            })
            .collect();
        let final_gain = b.add("final_norm.gain".into(), 1, d, Init::Ones);
        let final_bias = legacy.then(|| b.add("final_norm.bias".into(), 1, d, Init::Zeros));
        let head_tokens = b.add("head.tokens".into(), d, config.vocab_size, Init::Normal);
        let head_props = b.add("head.props".into(), d, spec.head_width(), Init::Normal);
        Layout {
            tensors: b.tensors,
            total: b.total,
            tok_emb,
            ring_emb,
            pos_emb,
            prop_w1,
            prop_w2,
            cat_emb,
            blocks,
            final_gain,
            final_bias,
            head_tokens,
            head_props,
        }
    }

    pub fn find(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// A flat buffer shaped by a [`Layout`]; used for both weights and gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<S> {
    pub data: Vec<S>,
}

impl<S: Scalar> Params<S> {
    pub fn zeros(layout: &Layout) -> Self {
        Params {
            data: vec![S::zero(); layout.total],
        }
    }

    pub fn init(layout: &Layout, config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).expect("positive std");
        let residual = Normal::new(0.0, config.init_std / (2.0 * config.n_layers as f64).sqrt()).expect("positive std");
        let mut data = vec![S::zero(); layout.total];
        for t in &layout.tensors {
            let slice = &mut data[t.range()];
            match t.init {
                Init::Normal => slice.iter_mut().for_each(|x| *x = S::of(normal.sample(&mut rng))),
                Init::Residual => slice.iter_mut().for_each(|x| *x = S::of(residual.sample(&mut rng))),
                Init::Ones => slice.fill(S::one()),
                Init::Zeros => {}
            }
        }
        Params { data }
    }

    pub fn t<'a>(&'a self, layout: &Layout, id: usize) -> &'a [S] {
        &self.data[layout.tensors[id].range()]
    }

    pub fn t_mut<'a>(&'a mut self, layout: &Layout, id: usize) -> &'a mut [S] {
        &mut self.data[layout.tensors[id].range()]
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            data: self.data.iter().map(|x| T::of(x.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::props::{PropertyDef, PropertyKind};

    fn spec() -> PropertySpec {
        PropertySpec::new(vec![
            PropertyDef {
                name: "w".into(),
                kind: PropertyKind::Continuous,
                mean: 0.0,
                std: 1.0,
            },
            PropertyDef {
                name: "k".into(),
                kind: PropertyKind::Categorical { cardinality: 4 },
                mean: 0.0,
                std: 1.0,
            },
        ])
        .unwrap()
    }

    #[test]
    fn layout_is_contiguous_and_bias_free() {
        let cfg = ModelConfig::small(30, 5, 16);
        let layout = Layout::new(&cfg, &spec());
        let mut offset = 0;
        for t in &layout.tensors {
            assert_eq!(t.offset, offset);
            offset += t.len();
            assert!(!t.name.contains("bias"), "{}", t.name);
        }
        assert_eq!(offset, layout.total);
        assert_eq!(layout.find("prop.cat0").unwrap().rows, 5);
        assert_eq!(layout.find("head.props").unwrap().cols, 1 + 4);
        assert_eq!(layout.find("block0.ffn.in").unwrap().cols, 2 * 128);
    }

    #[test]
    fn residual_outputs_use_scaled_init() {
        let mut cfg = ModelConfig::small(30, 5, 16);
        cfg.d_model = 128;
        cfg.n_layers = 8;
        let layout = Layout::new(&cfg, &spec());
        let p: Params<f64> = Params::init(&layout, &cfg, 3);
        let std = |name: &str| {
            let x = p.t(&layout, layout.tensors.iter().position(|t| t.name == name).unwrap());
            (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
        };
        assert!((std("block0.attn.qkv") - 0.02).abs() < 0.002);
        assert!((std("block0.attn.out") - 0.02 / 4.0).abs() < 0.0005);
        assert!((std("block7.ffn.out") - 0.02 / 4.0).abs() < 0.0005);
        assert_eq!(std("block3.norm2.gain"), 1.0);
    }

    #[test]
    fn legacy_layout_has_norm_biases_and_positions() {
        let mut cfg = ModelConfig::small(30, 5, 16);
        cfg.arch = Arch::Legacy;
        cfg.prop_encoder = PropEncoder::Linear;
        let layout = Layout::new(&cfg, &spec());
        assert!(layout.find("pos_emb").is_some());
        assert!(layout.find("block0.norm1.bias").is_some());
        assert!(layout.find("prop.w2").is_none());
        assert!(layout.tensors.iter().filter(|t| t.name.contains("bias")).all(|t| !t.decay));
    }
}
