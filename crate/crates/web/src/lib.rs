//! WebAssembly front end for the `cbc` workbench.
//!
//! Everything interesting lives in [`demo`], which is plain Rust and tested
//! natively; the `#[wasm_bindgen]` functions below only marshal JSON.

pub mod demo;

use wasm_bindgen::prelude::*;

fn to_js<T: serde::Serialize>(r: cbc::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// A small CNN trained in the page on synthetic 4-class glyphs.
#[wasm_bindgen]
pub struct AttackLab {
    inner: demo::AttackLab,
}

#[wasm_bindgen]
impl AttackLab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<AttackLab, JsError> {
        demo::AttackLab::train(u64::from(seed))
            .map(|inner| AttackLab { inner })
            .map_err(|e| JsError::new(&e.to_string()))
    }

    #[wasm_bindgen(getter)]
    pub fn samples(&self) -> usize {
        self.inner.samples()
    }

    #[wasm_bindgen(getter)]
    pub fn side(&self) -> usize {
        demo::SIDE
    }

    #[wasm_bindgen(getter)]
    pub fn clean_accuracy(&self) -> f64 {
        self.inner.clean_accuracy
    }

    /// JSON `AttackView` for sample `index` under `kind`
    /// (`fgsm`, `bim`, `mim`, `deepfool`, `cw`).
    pub fn attack(&self, index: usize, kind: &str, epsilon: f32, iterations: usize) -> Result<String, JsError> {
        to_js(self.inner.attack(index, kind, epsilon, iterations))
    }
}

/// JSON `DeepFoolPath` for a three-class linear classifier on the unit square.
#[wasm_bindgen]
pub fn deepfool_path(x: f64, y: f64, overshoot: f64, seed: u32) -> Result<String, JsError> {
    to_js(demo::deepfool_path([x, y], overshoot, u64::from(seed)))
}

/// JSON list of `ComplexityRow`s for `fmnist` or `cifar` with `removed`
/// convolutions cut from the CBC.
#[wasm_bindgen]
pub fn complexity_table(dataset: &str, removed: usize) -> Result<String, JsError> {
    to_js(demo::complexity_table(dataset, removed))
}
