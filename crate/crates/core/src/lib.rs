//! Pure (model-free) building blocks of the code-mixed Hindi-English TTS toolkit.
//!
//! * [`textnorm`] turns mixed Devanagari/Roman text into a single Devanagari stream.
//! * [`corpus`] pools, subsets and splits utterance manifests.
//! * [`audiofe`] reads WAV files and computes the 80-channel log-mel front end.
//! * [`evalkit`] aggregates MOS/CMOS listening-test ratings.
//! * [`config`] is the versioned configuration shared by every stage.

pub mod audiofe;
pub mod config;
pub mod corpus;
pub mod evalkit;
pub mod rng;
pub mod textnorm;

pub use audiofe::{AudioClip, MelSpectrogram};
pub use config::ToolkitConfig;
pub use corpus::{CorpusManifest, UtteranceRecord};
pub use textnorm::{NormalizedText, Script, Token, TransliterationProvider};
