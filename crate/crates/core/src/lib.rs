//! Low-rank adaptation of a small LLaMA-style decoder over a quantized frozen
//! base, from autograd up through sampling.
//!
//! The crate is organised bottom-up: [`tensor`] (values and a gradient tape),
//! [`model`] (the decoder), [`lora`] (adapters), [`quant`] (blockwise code
//! books), [`data`] (tokenizer, templates, datasets), [`train`] and [`infer`].

pub mod data;
pub mod error;
pub mod hash;
pub mod infer;
pub mod lora;
pub mod model;
pub mod quant;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use lora::{LoraAdapter, LoraConfig, Mode};
pub use model::{ModelConfig, ModelRef, ModelWeights};
pub use quant::{QuantizedTensor, Scheme};
pub use tensor::Tensor;
