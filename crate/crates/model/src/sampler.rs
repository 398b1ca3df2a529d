//! Property-conditioned generation: classifier-free guidance on the logits,
//! validity masking, and best-of-k selection by the model's own property
//! predictions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use treegen_core::mask::{annotate, MaskEngine, MaskError};
use treegen_core::vocab::{BOS, EOS};
use treegen_core::{decode, MolGraph};

use crate::model::{decode_property_row, Model, ModelError, SeqInput};
use crate::props::{PropValue, PropertyVector};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SampleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("logit vectors differ in length: {0} vs {1}")]
    Shape(usize, usize),
    #[error("sequence is not a complete BOS..EOS sequence")]
    Incomplete,
    #[error("invalid request: {0}")]
    Request(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Guidance {
    Fixed { w: f64 },
    /// A fresh `w ~ U(lo, hi)` per candidate.
    Uniform { lo: f64, hi: f64 },
}

impl Guidance {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Guidance::Fixed { w } => w,
            Guidance::Uniform { lo, hi } => rng.gen_range(lo..=hi),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    /// Standardized target; missing entries are unconstrained.
    pub target: PropertyVector,
    pub guidance: Guidance,
    pub k: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub tokens: Vec<u32>,
    pub graph: Option<MolGraph>,
    /// Standardized self-prediction.
    pub predicted: PropertyVector,
    pub w: f64,
    pub self_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub best: usize,
    pub candidates: Vec<Candidate>,
}

impl SampleResult {
    pub fn best(&self) -> &Candidate {
        &self.candidates[self.best]
    }
}

/// `uncond + w * (cond - uncond)` per entry. Entries impossible under both
/// models stay `-inf`.
pub fn guided_logits(cond: &[f32], uncond: &[f32], w: f64) -> Result<Vec<f32>, SampleError> {
    if cond.len() != uncond.len() {
        return Err(SampleError::Shape(cond.len(), uncond.len()));
    }
    if w == 1.0 {
        return Ok(cond.to_vec());
    }
    if w == 0.0 {
        return Ok(uncond.to_vec());
    }
    let w = w as f32;
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| {
            let g = u + w * (c - u);
            if g.is_nan() {
                f32::NEG_INFINITY
            } else {
                g
            }
        })
        .collect())
}

/// Picks a token among those allowed: argmax at temperature 0 (lowest id on
/// ties), otherwise a draw from the tempered softmax. Falls back to uniform
/// over allowed ids if every allowed logit is `-inf`.
pub fn choose_token<R: Rng + ?Sized>(logits: &[f32], allowed: &[bool], temperature: f64, rng: &mut R) -> u32 {
    let ids: Vec<usize> = (0..logits.len()).filter(|&i| allowed[i]).collect();
    assert!(!ids.is_empty(), "empty mask");
    let m = ids.iter().map(|&i| logits[i]).fold(f32::NEG_INFINITY, f32::max);
    if m == f32::NEG_INFINITY || m.is_nan() {
        return ids[rng.gen_range(0..ids.len())] as u32;
    }
    if temperature <= 0.0 {
        return *ids.iter().find(|&&i| logits[i] == m).unwrap() as u32;
    }
    let weights: Vec<f64> = ids.iter().map(|&i| (((logits[i] - m) as f64) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (&i, &wt) in ids.iter().zip(&weights) {
        if x < wt {
            return i as u32;
        }
        x -= wt;
    }
    *ids.iter().rev().find(|&&i| logits[i] > f32::NEG_INFINITY).unwrap() as u32
}

/// Generates one complete sequence under guidance weight `w`.
pub fn sample_one<R: Rng + ?Sized>(
    model: &Model<f32>,
    engine: &MaskEngine,
    target: &PropertyVector,
    w: f64,
    temperature: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<u32>, SampleError> {
    if max_len > model.config.max_len {
        return Err(SampleError::Request(format!("max_len {max_len} exceeds the model's {}", model.config.max_len)));
    }
    let null = model.spec.all_missing();
    let need_cond = w != 0.0;
    let need_uncond = w != 1.0;
    let mut cond = need_cond.then(|| model.start(target)).transpose()?;
    let mut uncond = need_uncond.then(|| model.start(&null)).transpose()?;
    let mut state = engine.init(max_len)?;
    let mut tokens = vec![BOS];
    let mut anchors: Vec<usize> = Vec::new();
    while !state.is_finished() {
        let last = *tokens.last().unwrap();
        let rc = anchors.len();
        let c = match &mut cond {
            Some(cache) => model.step(cache, last, rc, &anchors)?.logits,
            None => Vec::new(),
        };
        let u = match &mut uncond {
            Some(cache) => model.step(cache, last, rc, &anchors)?.logits,
            None => Vec::new(),
        };
        let g = match (need_cond, need_uncond) {
            (true, true) => guided_logits(&c, &u, w)?,
            (true, false) => c,
            _ => u,
        };
        let mask = state.mask()?;
        let id = choose_token(&g, mask.as_slice(), temperature, rng);
        state.advance(id)?;
        tokens.push(id);
        anchors = state.open_anchor_positions().collect();
    }
    Ok(tokens)
}

/// Standardized property prediction for a complete sequence, read at EOS with
/// every conditioning property hidden.
pub fn self_predict(model: &Model<f32>, engine: &MaskEngine, tokens: &[u32]) -> Result<PropertyVector, SampleError> {
    if tokens.first() != Some(&BOS) || tokens.last() != Some(&EOS) || tokens.len() < 2 {
        return Err(SampleError::Incomplete);
    }
    let ann = annotate(engine, tokens, model.config.max_len).map_err(|_| SampleError::Incomplete)?;
    let input = SeqInput {
        tokens: tokens.to_vec(),
        ring_counts: ann.ring_counts,
        anchors: ann.anchor_positions,
        props: model.spec.all_missing(),
    };
    let out = model.forward(std::slice::from_ref(&input))?;
    let pw = model.spec.head_width();
    let last = tokens.len() - 1;
    Ok(decode_property_row(&model.spec, &out[0].props[last * pw..(last + 1) * pw]))
}

/// Distance between a prediction and a (partial) target in standardized
/// units: absolute error per known continuous target plus one per
/// mismatched known categorical target.
pub fn self_score(pred: &PropertyVector, target: &PropertyVector) -> Result<f64, SampleError> {
    if pred.values.len() != target.values.len() {
        return Err(SampleError::Shape(pred.values.len(), target.values.len()));
    }
    let mut s = 0.0;
    for (p, t) in pred.values.iter().zip(&target.values) {
        match (*p, *t) {
            (_, PropValue::Continuous(None) | PropValue::Categorical(None)) => {}
            (PropValue::Continuous(Some(a)), PropValue::Continuous(Some(b))) => s += (a - b).abs(),
            (PropValue::Categorical(Some(a)), PropValue::Categorical(Some(b))) => s += f64::from(u8::from(a != b)),
            (PropValue::Continuous(None) | PropValue::Categorical(None), _) => s += f64::INFINITY,
            _ => return Err(SampleError::Request("prediction and target kinds differ".into())),
        }
    }
    Ok(s)
}

/// Random stream of candidate `j` of a request with seed `seed`.
pub fn candidate_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    rng
}

/// Best-of-k sampling scored by an arbitrary property predictor.
pub fn sample_best_of_k_with<P>(model: &Model<f32>, engine: &MaskEngine, req: &SampleRequest, predict: P) -> Result<SampleResult, SampleError>
where
    P: Fn(&[u32], Option<&MolGraph>) -> Result<PropertyVector, SampleError> + Sync,
{
    if req.k == 0 {
        return Err(SampleError::Request("k must be at least 1".into()));
    }
    match req.guidance {
        Guidance::Fixed { w } if !(w >= 0.0 && w.is_finite()) => return Err(SampleError::Request(format!("guidance weight {w}"))),
        Guidance::Uniform { lo, hi } if !(lo <= hi && lo.is_finite() && hi.is_finite()) => {
            return Err(SampleError::Request(format!("guidance range {lo}..{hi}")))
        }
        _ => {}
    }
    let candidates = (0..req.k)
        .into_par_iter()
        .map(|j| {
            let mut rng = candidate_rng(req.seed, j);
            let w = req.guidance.draw(&mut rng);
            let tokens = sample_one(model, engine, &req.target, w, req.temperature, req.max_len, &mut rng)?;
            let graph = decode(&tokens, engine.vocab()).ok();
            let predicted = predict(&tokens, graph.as_ref())?;
            let self_score = if graph.is_some() {
                self_score(&predicted, &req.target)?
            } else {
                f64::INFINITY
            };
            Ok(Candidate {
                tokens,
                graph,
                predicted,
                w,
                self_score,
            })
        })
        .collect::<Result<Vec<_>, SampleError>>()?;
    let best = if req.k == 1 {
        0
    } else {
        (0..candidates.len()).fold(0, |b, j| if candidates[j].self_score < candidates[b].self_score { j } else { b })
    };
    Ok(SampleResult { best, candidates })
}

/// Best-of-k sampling scored by the model's own property head.
pub fn sample_best_of_k(model: &Model<f32>, engine: &MaskEngine, req: &SampleRequest) -> Result<SampleResult, SampleError> {
    sample_best_of_k_with(model, engine, req, |tokens, _| self_predict(model, engine, tokens))
}
