//! Noise-driven WiFi pathology detection from synthetic RadioML-style I/Q
//! frames, with desk-scale encoder and decoder transformers.
//!
//! Pipeline: [`sigsynth`] makes frames, [`dataset`] labels them by SNR and
//! renders prompts, [`tokenizer`] encodes them, [`transformer`] and [`lora`]
//! define the models, [`trainer`] fits them and [`evalgen`] decodes and
//! scores the causal model, and [`cli`] wires them into commands.

pub mod cli;
pub mod dataset;
pub mod evalgen;
pub mod lora;
pub mod seed;
pub mod sigsynth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod transformer;
