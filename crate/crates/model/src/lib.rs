//! Conditional autoregressive Transformer over spanning-tree token sequences,
//! with its trainer and the property-guided sampler.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod model;
pub mod optim;
pub mod params;
pub mod props;
pub mod sampler;
pub mod scalar;
pub mod trainer;

pub use config::{Arch, ConfigError, ModelConfig, PropEncoder};
pub use model::{LossParts, Model, ModelError, SeqInput, SeqOutput, TrainExample};
pub use params::{Layout, Params};
pub use props::{PropValue, PropertyDef, PropertyError, PropertyKind, PropertySpec, PropertyVector};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use decode::{DecodeCache, StepOutput};
pub use optim::{lr_at, AdamW, AdamWConfig, OptimError};
pub use trainer::{make_batch, train, Corpus, EpochLog, TrainConfig, TrainError};
pub use sampler::{
    candidate_rng, guided_logits, sample_best_of_k, sample_best_of_k_with, sample_one, self_predict, self_score, Candidate, Guidance,
    SampleError, SampleRequest, SampleResult,
};
