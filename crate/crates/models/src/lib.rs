//! Neural models and pipelines for code-mixed Hindi-English TTS.

pub mod checkpoint;
pub mod error;
pub mod nn;
pub mod recipes;
pub mod speaker;
pub mod spectrogen;
pub mod synth;
pub mod toy;
pub mod train;
pub mod vocab;
pub mod waveglow;

pub use error::{ModelError, Result};
pub use spectrogen::{Batch, Example, SpectrogenOutput, Tacotron, TacotronSpec};
pub use vocab::{CharVocabulary, VocabKind};
