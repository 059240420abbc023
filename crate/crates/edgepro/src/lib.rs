//! Neuron-level authorization for small deep learning models.
//!
//! A model is lock-trained so that inference is only accurate when an
//! authorization key is applied during the forward pass. The key names a
//! small set of authorization neurons per lockable layer, pins their
//! post-activation outputs to fixed locking values, and scales the layer
//! output by a per-layer factor. Without the key the network behaves like an
//! ordinary (but deliberately mistrained) model and its accuracy collapses
//! to near chance.
//!
//! The crate covers the full pipeline: tensors and layers with exact
//! backprop ([`network`]), key generation and the locked forward pass
//! ([`lock`]), alternating lock training ([`train`]), importance-ranked
//! neuron selection strategies ([`select`]), attack evaluations
//! ([`attacks`]), encrypted key persistence ([`keystore`]), and IDX/synthetic
//! dataset handling ([`data`]).

pub mod attacks;
pub mod data;
pub mod error;
pub mod keystore;
pub mod layer;
pub mod lock;
pub mod network;
pub mod select;
pub mod tensor;
pub mod train;

pub use attacks::{
    finetune_attack, prune_attack, reverse_engineer, AttackReport, Knowledge, ReverseOptions,
};
pub use data::{load_idx, synth_blobs, write_idx, Dataset};
pub use error::{Error, Result};
pub use layer::Layer;
pub use lock::{
    auth_count, evaluate, generate_key, locked_forward, locked_loss_and_grad, AuthorizationKey,
    EvalResult, LayerKey,
};
pub use network::{Gradients, Network};
pub use select::{rank_neurons, weighted_sample, ImportanceScores, Strategy};
pub use train::{lock_train, split_and_obfuscate, SplitDataset, TrainConfig, TrainReport};
