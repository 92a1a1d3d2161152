//! WebAssembly bindings for the demo page in `www/`.
//!
//! Each export takes plain strings and numbers and returns a JSON string.
//! The same logic is available natively through [`demo`].

use wasm_bindgen::prelude::*;

pub mod demo;

fn to_js(r: waftm::Result<serde_json::Value>) -> Result<String, JsError> {
    r.map(|v| v.to_string())
        .map_err(|e| JsError::new(&e.to_string()))
}

/// WordPiece pieces and ids for `text` under a newline-separated vocabulary.
#[wasm_bindgen]
pub fn tokenize(vocab: &str, text: &str) -> Result<String, JsError> {
    to_js(demo::tokenize(vocab, text))
}

/// BLEU-4, ROUGE-L and CIDEr-D of one caption against newline-separated
/// references.
#[wasm_bindgen]
pub fn score(candidate: &str, references: &str) -> Result<String, JsError> {
    to_js(demo::score(candidate, references))
}

/// Memory attention, cross-attention and fusion gates of a small random
/// model on random features.
#[wasm_bindgen]
pub fn explore(
    seed: u32,
    frames_a: u32,
    frames_b: u32,
    scale_a: f64,
    scale_b: f64,
) -> Result<String, JsError> {
    to_js(demo::explore(&demo::ExploreParams {
        seed: seed.into(),
        frames: [frames_a as usize, frames_b as usize],
        scales: [scale_a, scale_b],
    }))
}
