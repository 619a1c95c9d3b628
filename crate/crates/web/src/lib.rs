//! Browser bindings for the flood segmentation demo.
//!
//! A [`Demo`] holds one synthetic scene and a toy model. The page can draw a
//! new scene, run a few training steps on it, and sweep the binarization
//! threshold while watching the metrics change.

use wasm_bindgen::prelude::*;

use floodseg::data::{synthesize_scene, Sample};
use floodseg::metrics::{binarize, flood_capacity, miou, pixel_accuracy, BinaryMask};
use floodseg::model::{FloodTransformer, ModelConfig, Segmenter};
use floodseg::tensor::Tensor;
use floodseg::train::{adam_step, image_step, TrainConfig, TrainState};

fn js_err(e: floodseg::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Interleaves a `3×H×W` image in `[0, 1]` into RGBA bytes.
pub fn image_to_rgba(image: &Tensor) -> Vec<u8> {
    let plane = image.numel() / 3;
    let d = image.data();
    let mut out = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

/// Water white, land black.
pub fn mask_to_rgba(mask: &BinaryMask) -> Vec<u8> {
    mask.pixels()
        .iter()
        .flat_map(|&p| {
            let v = p * 255;
            [v, v, v, 255]
        })
        .collect()
}

/// Greyscale rendering of a probability map.
pub fn probability_to_rgba(probs: &Tensor) -> Vec<u8> {
    probs
        .data()
        .iter()
        .flat_map(|&p| {
            let v = (p.clamp(0.0, 1.0) * 255.0).round() as u8;
            [v, v, v, 255]
        })
        .collect()
}

#[wasm_bindgen]
pub struct Demo {
    model: FloodTransformer,
    state: TrainState,
    cfg: TrainConfig,
    scene: Sample,
    probs: Tensor,
}

#[wasm_bindgen]
impl Demo {
    /// Toy model initialised from `model_seed`, with scene `scene_seed`.
    #[wasm_bindgen(constructor)]
    pub fn new(model_seed: u32, scene_seed: u32, blobs: u32) -> Result<Demo, JsValue> {
        let config = ModelConfig {
            seed: model_seed as u64,
            ..ModelConfig::toy()
        };
        let model = FloodTransformer::new(config).map_err(js_err)?;
        let state = TrainState::new(model.params());
        let (h, w) = model.input_size();
        let scene = synthesize_scene(scene_seed as u64, (h, w), blobs as usize).map_err(js_err)?;
        let probs = model.probabilities(&scene.image).map_err(js_err)?;
        Ok(Demo {
            model,
            state,
            cfg: TrainConfig::default(),
            scene,
            probs,
        })
    }

    pub fn width(&self) -> usize {
        self.scene.size().1
    }

    pub fn height(&self) -> usize {
        self.scene.size().0
    }

    pub fn steps(&self) -> usize {
        self.state.step
    }

    /// Replaces the scene; the model keeps its weights.
    pub fn new_scene(&mut self, seed: u32, blobs: u32) -> Result<(), JsValue> {
        self.scene = synthesize_scene(seed as u64, self.scene.size(), blobs as usize).map_err(js_err)?;
        self.refresh()
    }

    /// Runs `n` Adam steps on the current scene and returns the last loss.
    pub fn train(&mut self, n: u32) -> Result<f64, JsValue> {
        let mut loss = f64::NAN;
        for _ in 0..n {
            let step = image_step(&self.model, &self.scene, &self.cfg).map_err(js_err)?;
            adam_step(self.model.params_mut(), &mut self.state, &step.grads, &self.cfg).map_err(js_err)?;
            loss = step.total;
        }
        self.refresh()?;
        Ok(loss)
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        image_to_rgba(&self.scene.image)
    }

    pub fn truth_rgba(&self) -> Vec<u8> {
        mask_to_rgba(&self.scene.mask)
    }

    pub fn probability_rgba(&self) -> Vec<u8> {
        probability_to_rgba(&self.probs)
    }

    pub fn prediction_rgba(&self, threshold: f64) -> Result<Vec<u8>, JsValue> {
        Ok(mask_to_rgba(&self.prediction(threshold)?))
    }

    pub fn truth_fc(&self) -> f64 {
        flood_capacity(&self.scene.mask).expect("scenes are non-empty")
    }

    /// `[FC, IoU water, IoU background, mIoU, PA]` of the thresholded prediction.
    pub fn metrics(&self, threshold: f64) -> Result<Vec<f64>, JsValue> {
        let pred = self.prediction(threshold)?;
        let s = miou(&pred, &self.scene.mask).map_err(js_err)?;
        let fc = flood_capacity(&pred).map_err(js_err)?;
        let pa = pixel_accuracy(&pred, &self.scene.mask).map_err(js_err)?;
        Ok(vec![fc, s.iou_water, s.iou_background, s.miou, pa])
    }
}

impl Demo {
    fn refresh(&mut self) -> Result<(), JsValue> {
        self.probs = self.model.probabilities(&self.scene.image).map_err(js_err)?;
        Ok(())
    }

    fn prediction(&self, threshold: f64) -> Result<BinaryMask, JsValue> {
        binarize(&self.probs, threshold).map_err(js_err)
    }
}
