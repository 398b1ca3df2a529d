//! Batching with traversal-order and property-masking augmentation, and the
//! training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use treegen_core::codec::{encode, Order};
use treegen_core::mask::{annotate, MaskEngine};
use treegen_core::{MolGraph, Vocab};

use crate::model::{Model, ModelError, SeqInput, TrainExample};
use crate::optim::{lr_at, AdamW, AdamWConfig, OptimError};
use crate::props::{mask_properties, sample_mask_count, PropertyError, PropertySpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub seed: u64,
    pub lambda_prop: f64,
    pub augment_random_order: bool,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            epochs: 20,
            batch_size: 64,
            warmup_steps: 0,
            seed: 0,
            lambda_prop: 1.0,
            augment_random_order: true,
            grad_clip: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("molecule {index}: {source}")]
    Property { index: usize, source: PropertyError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("step {step}: {source}")]
    Optim { step: usize, source: OptimError },
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.weight_decay < 0.0 || self.lambda_prop < 0.0 {
            return bad("weight_decay and lambda_prop must be non-negative");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Molecules with raw property values in spec order (`None` = missing).
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub graphs: Vec<MolGraph>,
    pub props: Vec<Vec<Option<f64>>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }
}

/// Encodes, annotates and masks the molecules at `indices`. Molecules that
/// cannot be encoded within `max_len` are skipped and counted.
#[allow(clippy::too_many_arguments)]
pub fn make_batch<R: Rng>(
    corpus: &Corpus,
    indices: &[usize],
    vocab: &Vocab,
    engine: &MaskEngine,
    spec: &PropertySpec,
    max_len: usize,
    random_order: bool,
    rng: &mut R,
) -> Result<(Vec<TrainExample>, usize), TrainError> {
    let mut out = Vec::with_capacity(indices.len());
    let mut skipped = 0;
    for &i in indices {
        let order = if random_order { Order::Random(rng.gen()) } else { Order::Canonical };
        let tokens = match encode(&corpus.graphs[i], vocab, order) {
            Ok(t) if t.len() <= max_len => t,
            _ => {
                skipped += 1;
                continue;
            }
        };
        let ann = match annotate(engine, &tokens, max_len) {
            Ok(a) => a,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let target = spec
            .standardize(&corpus.props[i])
            .map_err(|source| TrainError::Property { index: i, source })?;
        let t = sample_mask_count(spec.len(), rng);
        let props = mask_properties(&target, t, rng);
        out.push(TrainExample {
            input: SeqInput {
                tokens,
                ring_counts: ann.ring_counts,
                anchors: ann.anchor_positions,
                props,
            },
            target,
        });
    }
    Ok((out, skipped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub token_ce: f64,
    pub prop_mse: f64,
    pub prop_ce: f64,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
    /// Seconds since the start of training.
    pub wallclock: f64,
    pub skipped: usize,
}

/// Trains `model` in place. `on_epoch` receives each epoch's averages.
pub fn train(
    model: &mut Model<f32>,
    vocab: &Vocab,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let engine = MaskEngine::new(vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adamw(), model.layout.total);
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce, mut mse, mut pce, mut weight) = (0.0, 0.0, 0.0, 0.0);
        let mut skipped = 0;
        let mut lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, sk) = make_batch(
                corpus,
                chunk,
                vocab,
                &engine,
                &model.spec,
                model.config.max_len,
                cfg.augment_random_order,
                &mut rng,
            )?;
            skipped += sk;
            lr = lr_at(step, total, cfg.lr, cfg.warmup_steps);
            if !batch.is_empty() {
                let (parts, mut grads) = model.loss_and_grad(&batch, cfg.lambda_prop)?;
                if let Some(clip) = cfg.grad_clip {
                    let norm = grads.data.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
                    if norm > clip {
                        let s = (clip / norm) as f32;
                        grads.data.iter_mut().for_each(|g| *g *= s);
                    }
                }
                opt.step(&mut model.params, &grads, &model.layout, lr)
                    .map_err(|source| TrainError::Optim { step, source })?;
                let w = batch.len() as f64;
                ce += parts.token_ce * w;
                mse += parts.prop_mse * w;
                pce += parts.prop_ce * w;
                weight += w;
            }
            step += 1;
        }
        let w = weight.max(1.0);
        let log = EpochLog {
            epoch,
            token_ce: ce / w,
            prop_mse: mse / w,
            prop_ce: pce / w,
            lr,
            wallclock: start.elapsed().as_secs_f64(),
            skipped,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::props::{PropValue, PropertyKind};
    use treegen_core::{decode, is_isomorphic, parse_smiles, SurrogateProperty};

    pub(crate) fn small_corpus() -> (Vocab, Corpus, PropertySpec) {
        let smiles = [
            "CCO", "CC(=O)O", "C1=CC=CC=C1", "C1CCCCC1", "CC(C)CN", "OC1CC1", "C#N", "CCOC(=O)C", "NC1=CC=CC=C1", "CC1CCOC1", "CCCCCC",
            "OCC(O)CO",
        ];
        let graphs: Vec<MolGraph> = smiles.iter().map(|s| parse_smiles(s).unwrap()).collect();
        let vocab = Vocab::induce(&graphs, 8).unwrap();
        let props: Vec<Vec<Option<f64>>> = graphs
            .iter()
            .map(|g| vec![Some(SurrogateProperty::MolWt.compute(g)), Some(SurrogateProperty::RingCount.compute(g))])
            .collect();
        let spec = PropertySpec::fit(
            &[("molWt".into(), PropertyKind::Continuous), ("ring_count".into(), PropertyKind::Continuous)],
            &props,
            true,
        );
        (vocab, Corpus { graphs, props }, spec)
    }

    fn small_model(v: &Vocab, spec: &PropertySpec) -> Model<f32> {
        let mut cfg = ModelConfig::small(v.len(), v.r_max(), 48);
        cfg.d_model = 32;
        cfg.n_layers = 2;
        Model::new(cfg, spec.clone(), 7).unwrap()
    }

    #[test]
    fn batches_respect_augmentation_and_masking() {
        let (v, c, spec) = small_corpus();
        let e = MaskEngine::new(&v);
        let idx: Vec<usize> = (0..c.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, _) = make_batch(&c, &idx, &v, &e, &spec, 48, false, &mut rng).unwrap();
        let (b, _) = make_batch(&c, &idx, &v, &e, &spec, 48, false, &mut rng).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.input.tokens, y.input.tokens);
        }
        let (r1, _) = make_batch(&c, &idx, &v, &e, &spec, 48, true, &mut rng).unwrap();
        let (r2, _) = make_batch(&c, &idx, &v, &e, &spec, 48, true, &mut rng).unwrap();
        let mut differ = 0;
        for (i, (x, y)) in r1.iter().zip(&r2).enumerate() {
            differ += usize::from(x.input.tokens != y.input.tokens);
            let gx = decode(&x.input.tokens, &v).unwrap();
            let gy = decode(&y.input.tokens, &v).unwrap();
            assert!(is_isomorphic(&gx, &gy) && is_isomorphic(&gx, &c.graphs[i]));
        }
        assert!(differ > 0);
        for ex in r1.iter().chain(&r2) {
            let f = ex.input.props.continuous_features();
            let n = spec.n_continuous();
            for j in 0..n {
                if f[n + j] == 1.0 {
                    assert_eq!(f[j], 0.0);
                }
            }
            assert!(ex.target.values.iter().all(|v| matches!(v, PropValue::Continuous(Some(_)))));
        }
        let (short, skipped) = make_batch(&c, &idx, &v, &e, &spec, 6, false, &mut rng).unwrap();
        assert_eq!(short.len() + skipped, c.len());
        assert!(skipped > 0);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (v, c, spec) = small_corpus();
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 4,
            lr: 3e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut m1 = small_model(&v, &spec);
        let l1 = train(&mut m1, &v, &c, &cfg, |_| {}).unwrap();
        let mut m2 = small_model(&v, &spec);
        let l2 = train(&mut m2, &v, &c, &cfg, |_| {}).unwrap();
        let strip = |l: &[EpochLog]| l.iter().map(|e| (e.token_ce, e.prop_mse, e.lr)).collect::<Vec<_>>();
        assert_eq!(strip(&l1), strip(&l2));
        assert_eq!(m1.params, m2.params);
        assert!(l1.last().unwrap().token_ce < l1[0].token_ce);
        assert!(m1.params.is_finite());
    }

    #[test]
    fn rejects_bad_config() {
        let (v, c, spec) = small_corpus();
        let mut m = small_model(&v, &spec);
        let cfg = TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut m, &v, &c, &cfg, |_| {}), Err(TrainError::Config(_))));
        assert!(matches!(
            train(&mut m, &v, &Corpus::default(), &TrainConfig::default(), |_| {}),
            Err(TrainError::EmptyCorpus)
        ));
    }
}
