//! Browser bindings: draw a phantom slice, score a displaced mask against it
//! and show the guide heatmap of a freshly initialized model.

use ndarray::Array2;
use pgseg::losses_metrics::evaluate_case;
use pgseg::pipeline::{infer, organ_prompts, phantom, pooled_text, Ablation, ModelConfig, PgSeg, PromptSourceConfig, SegSample};
use pgseg::ORGANS;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const SIZE: usize = 224;

// One colour per class, background transparent.
const PALETTE: [[u8; 3]; 9] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

fn js_err(e: pgseg::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn rgba_gray(a: &Array2<u8>) -> Vec<u8> {
    a.iter().flat_map(|&v| [v, v, v, 255]).collect()
}

fn overlay(image: &Array2<f32>, label: &Array2<u8>, alpha: f32) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.len() * 4);
    for (&v, &c) in image.iter().zip(label.iter()) {
        let g = v.clamp(0.0, 1.0) * 255.0;
        let mix = |k: usize| {
            if c == 0 {
                g as u8
            } else {
                ((1.0 - alpha) * g + alpha * PALETTE[c as usize][k] as f32) as u8
            }
        };
        out.extend([mix(0), mix(1), mix(2), 255]);
    }
    out
}

fn shifted(label: &Array2<u8>, dx: i32, dy: i32) -> Array2<u8> {
    let (h, w) = label.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (si, sj) = (i as i32 - dy, j as i32 - dx);
        if si < 0 || sj < 0 || si >= h as i32 || sj >= w as i32 {
            0
        } else {
            label[[si as usize, sj as usize]]
        }
    })
}

#[wasm_bindgen]
pub struct Session {
    sample: SegSample,
    model: Option<(PgSeg, pgseg::nn::ParamStore<f32>)>,
}

#[wasm_bindgen]
impl Session {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Session, JsValue> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let sample = phantom(&mut rng, SIZE, &ORGANS, &format!("phantom_{seed}")).map_err(js_err)?;
        Ok(Session { sample, model: None })
    }

    pub fn size(&self) -> usize {
        SIZE
    }

    /// RGBA pixels of the slice with the ground-truth overlay.
    pub fn phantom_rgba(&self, alpha: f32) -> Vec<u8> {
        overlay(&self.sample.image, &self.sample.label, alpha)
    }

    /// Moves the ground truth by `(dx, dy)` pixels and scores it against the
    /// original. Returns the per-organ report as JSON.
    pub fn shift_metrics(&self, dx: i32, dy: i32) -> Result<String, JsValue> {
        let pred = shifted(&self.sample.label, dx, dy);
        let r = evaluate_case(&self.sample.case_id, pred.view(), self.sample.label.view()).map_err(js_err)?;
        let organs: Vec<_> = ORGANS
            .iter()
            .enumerate()
            .map(|(i, o)| serde_json::json!({"organ": o, "dice": r.per_class_dice[i], "hd95": r.per_class_hd95[i]}))
            .collect();
        Ok(serde_json::json!({"mDice": r.mdice, "HD95": r.hd95, "organs": organs}).to_string())
    }

    /// Guide heatmap of an untrained model built from `model_seed`.
    /// The first call builds the model and takes a moment.
    pub fn heatmap_rgba(&mut self, model_seed: u32) -> Result<Vec<u8>, JsValue> {
        let config = ModelConfig::default();
        if self.model.is_none() {
            let prompts = organ_prompts(PromptSourceConfig::Template, None).map_err(js_err)?;
            let text = pooled_text(&prompts, config.text_dim).map_err(js_err)?;
            self.model = Some(PgSeg::new(&config, Ablation::default(), &text, model_seed as u64).map_err(js_err)?);
        }
        let (model, store) = self.model.as_ref().expect("built above");
        let (_, heat) = infer(model, store, &self.sample.image, true).map_err(js_err)?;
        Ok(rgba_gray(&heat.expect("prior enabled")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shift_is_perfect() {
        let s = Session::new(3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.shift_metrics(0, 0).unwrap()).unwrap();
        assert_eq!(v["mDice"], 1.0);
        assert_eq!(v["HD95"], 0.0);
        let v: serde_json::Value = serde_json::from_str(&s.shift_metrics(4, 0).unwrap()).unwrap();
        assert!(v["mDice"].as_f64().unwrap() < 1.0);
    }

    #[test]
    fn buffers_are_rgba() {
        let s = Session::new(1).unwrap();
        assert_eq!(s.phantom_rgba(0.5).len(), SIZE * SIZE * 4);
    }
}
