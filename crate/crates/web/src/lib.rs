//! WebAssembly bindings for the browser demo in `www/`.

use wasm_bindgen::prelude::*;

pub mod demo;

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable")
}

/// Metric scores of a candidate against newline-separated references, as
/// JSON.
#[wasm_bindgen]
pub fn score_caption(candidate: &str, references: &str) -> Result<String, JsError> {
    demo::score_caption(candidate, references)
        .map(|s| to_json(&s))
        .map_err(|e| JsError::new(&e))
}

/// Keyword, severity and location choices of the synthetic corpus, as JSON.
#[wasm_bindgen]
pub fn demo_options() -> String {
    to_json(&demo::options())
}

#[wasm_bindgen]
pub struct CaptionDemo {
    inner: demo::Demo,
}

#[wasm_bindgen]
impl CaptionDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<CaptionDemo, JsError> {
        demo::Demo::new(seed as u64)
            .map(|inner| CaptionDemo { inner })
            .map_err(|e| JsError::new(&e))
    }

    pub fn epochs(&self) -> usize {
        self.inner.epochs()
    }

    pub fn train_epoch(&mut self) -> Result<f64, JsError> {
        self.inner.train_epoch().map_err(|e| JsError::new(&e))
    }

    pub fn caption(
        &self,
        disease: usize,
        location: usize,
        keywords: &str,
        beams: usize,
        drop_keywords: bool,
        drop_image: bool,
    ) -> Result<String, JsError> {
        self.inner
            .caption(disease, location, keywords, beams, drop_keywords, drop_image)
            .map_err(|e| JsError::new(&e))
    }

    /// `{tokens, weights[block][head][query][key]}` as JSON.
    pub fn attention(&self, keywords: &str) -> Result<String, JsError> {
        self.inner
            .attention(keywords)
            .map(|a| to_json(&a))
            .map_err(|e| JsError::new(&e))
    }
}
