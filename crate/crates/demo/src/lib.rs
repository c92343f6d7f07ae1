//! Browser bindings: render a synthetic utterance, show how the encoder
//! shrinks it block by block, and look at where the emotion tokens attend.
//!
//! Every export has a plain Rust twin so the logic is testable off the browser.

use qieemo::encoder::{encoder_forward, EncoderConfig};
use qieemo::fusion::{head_forward, FusionConfig, EMOTION_NAMES};
use qieemo::synth::{render_utterance, CorpusSpec, Utterance};
use qieemo::train::Model;
use qieemo::{Error, Result, Session, Tensor};
use wasm_bindgen::prelude::*;

/// Row-major grid of values plus a caption.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct Heatmap {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    label: String,
}

#[wasm_bindgen]
impl Heatmap {
    #[wasm_bindgen(getter)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[wasm_bindgen(getter)]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[wasm_bindgen(getter)]
    pub fn data(&self) -> Vec<f32> {
        self.data.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn label(&self) -> String {
        self.label.clone()
    }
}

impl Heatmap {
    fn from_tensor(t: &Tensor<f32>, label: String) -> Self {
        Heatmap {
            rows: t.shape()[0],
            cols: t.shape()[1],
            data: t.data().to_vec(),
            label,
        }
    }
}

fn utterance(seed: u32, index: u32, strength: f64, noise: f64) -> Result<Utterance> {
    let spec = CorpusSpec {
        num_utterances: index as usize + 1,
        seed: seed.into(),
        emotion_strength: strength,
        noise_sigma: noise,
        ..Default::default()
    };
    spec.validate()?;
    Ok(render_utterance(&spec, index as usize))
}

/// Frames × bins log-mel-like features of one utterance, labelled with its emotion.
pub fn render(seed: u32, index: u32, strength: f64, noise: f64) -> Result<Heatmap> {
    let u = utterance(seed, index, strength, noise)?;
    Ok(Heatmap::from_tensor(
        &u.spectrogram.values,
        EMOTION_NAMES[u.emotion].to_string(),
    ))
}

/// Output length of every block, first to last.
pub fn schedule(frames: u32, backbone: u8) -> Result<Vec<u32>> {
    let cfg = EncoderConfig::backbone(backbone)?;
    if (frames as usize) < cfg.min_frames() {
        return Err(Error::Input(format!("need at least {} frames", cfg.min_frames())));
    }
    Ok(cfg
        .frame_schedule(frames as usize)
        .into_iter()
        .map(|t| t as u32)
        .collect())
}

/// Softmax over the fused-block logits, as applied before the 3×3 fusion conv.
pub fn weights(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f32 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Tokens × frames attention of the chosen cross-attention stage (1 or 2) for a
/// freshly initialised backbone-1 model, with the block logits overridden.
pub fn attention(seed: u32, index: u32, model_seed: u32, logits: &[f32], stage: u8) -> Result<Heatmap> {
    let u = utterance(seed, index, 1.0, 0.1)?;
    let mut model = Model::init(
        EncoderConfig::backbone1(),
        FusionConfig::default(),
        model_seed.into(),
    )?;
    let slot = model
        .params
        .get_mut("mmf.block_logits")
        .ok_or_else(|| Error::Checkpoint("model has no block logits".into()))?;
    if slot.data().len() != logits.len() {
        return Err(Error::Input(format!(
            "expected {} block logits",
            slot.data().len()
        )));
    }
    slot.data_mut().copy_from_slice(logits);
    let mut s = Session::inference(&model.params);
    let blocks = encoder_forward(&mut s, &u.spectrogram, &model.encoder)?;
    let head = head_forward(&mut s, &blocks, &model.head)?;
    let cma = head
        .cma
        .ok_or_else(|| Error::Config("head has no cross-attention".into()))?;
    let map = match stage {
        1 => cma.stage1_attention,
        2 => cma.stage2_attention,
        other => return Err(Error::Input(format!("stage {other} is not 1 or 2"))),
    };
    let logits = s.value(head.logits).data();
    let guess = (0..logits.len())
        .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
        .unwrap_or(0);
    let label = format!(
        "true {}, untrained guess {}",
        EMOTION_NAMES[u.emotion], EMOTION_NAMES[guess]
    );
    Ok(Heatmap::from_tensor(s.value(map), label))
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = renderUtterance)]
pub fn render_utterance_js(
    seed: u32,
    index: u32,
    strength: f64,
    noise: f64,
) -> std::result::Result<Heatmap, JsError> {
    render(seed, index, strength, noise).map_err(js)
}

#[wasm_bindgen(js_name = blockSchedule)]
pub fn block_schedule_js(frames: u32, backbone: u8) -> std::result::Result<Vec<u32>, JsError> {
    schedule(frames, backbone).map_err(js)
}

#[wasm_bindgen(js_name = fusionWeights)]
pub fn fusion_weights_js(logits: Vec<f32>) -> Vec<f32> {
    weights(&logits)
}

#[wasm_bindgen(js_name = crossAttention)]
pub fn cross_attention_js(
    seed: u32,
    index: u32,
    model_seed: u32,
    logits: Vec<f32>,
    stage: u8,
) -> std::result::Result<Heatmap, JsError> {
    attention(seed, index, model_seed, &logits, stage).map_err(js)
}
