//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Build with `wasm-pack build crates/web --target web`, then serve
//! `crates/web` and open `www/index.html`.

use comix_core::audiofe::{mel_filterbank as filterbank, MelFrontEnd};
use comix_core::config::AudioConfig;
use comix_core::textnorm::normalize;
use comix_core::{AudioClip, TransliterationProvider};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Normalizes mixed-script text with the rule-based transliterator.
/// Returns JSON: `{devanagari, tokens: [{surface, script, rendered, provenance}]}`.
#[wasm_bindgen]
pub fn normalize_text(text: &str) -> Result<String, JsError> {
    let n = normalize(text, &TransliterationProvider::rules_only()).map_err(js_err)?;
    let tokens: Vec<serde_json::Value> = n
        .tokens
        .iter()
        .zip(&n.rendered)
        .zip(&n.provenance)
        .map(|((t, r), p)| {
            serde_json::json!({
                "surface": t.surface,
                "script": t.script,
                "rendered": r,
                "provenance": p,
            })
        })
        .collect();
    Ok(serde_json::json!({ "devanagari": n.devanagari, "tokens": tokens }).to_string())
}

/// Log-mel spectrogram of mono samples at the default front-end settings,
/// row-major `[frames × 80]`. The caller resamples to 22050 Hz.
#[wasm_bindgen]
pub fn mel_spectrogram(samples: Vec<f32>) -> Result<Vec<f32>, JsError> {
    let audio = AudioConfig::default();
    let clipped = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
    let clip = AudioClip::new(clipped, audio.sample_rate).map_err(js_err)?;
    Ok(MelFrontEnd::new(&audio).compute(&clip).map_err(js_err)?.frames)
}

/// Mel filterbank weights, row-major `[n_mels × (n_fft/2 + 1)]`.
#[wasm_bindgen]
pub fn mel_filterbank(n_mels: usize, fmin: f64, fmax: f64) -> Result<Vec<f32>, JsError> {
    let audio = AudioConfig::default();
    if n_mels == 0 || !(0.0 <= fmin && fmin < fmax && fmax <= audio.sample_rate as f64 / 2.0) {
        return Err(JsError::new("need n_mels ≥ 1 and 0 ≤ fmin < fmax ≤ 11025"));
    }
    Ok(filterbank(audio.sample_rate, audio.n_fft(), n_mels, fmin, fmax)
        .into_iter()
        .flatten()
        .map(|w| w as f32)
        .collect())
}

/// Constants the page needs to lay out plots.
#[wasm_bindgen]
pub fn front_end_info() -> String {
    let a = AudioConfig::default();
    serde_json::json!({
        "sample_rate": a.sample_rate,
        "n_fft": a.n_fft(),
        "hop": a.hop_length(),
        "n_mels": a.n_mels,
        "log_floor": a.log_floor(),
    })
    .to_string()
}
