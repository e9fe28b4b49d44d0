//! WebAssembly bindings for the demo page in `www/`.
//!
//! Three operations are exposed: previewing a synthetic image next to its
//! generator fingerprint, training a small model and viewing its factual and
//! counterfactual attention maps, and plotting ROC and OSCR curves for the
//! known/novel split. The plain Rust API below is what the bindings wrap.

use wasm_bindgen::prelude::*;

use cdal::attention::{static_counterfactual, CounterfactualMode};
use cdal::eval::{auc_known_unknown, msp, oscr, oscr_curve, AttributionModel};
use cdal::model::Model;
use cdal::rng;
use cdal::synth::{build_dataset, synthesize, Dataset, DatasetConfig, GeneratorSpec, SourceSpec, CHANNELS};
use cdal::trainer::{train, TrainConfig};
use cdal::{CdalError, Result};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGBA pixels, `2·size` wide and `size` high: the forged image on the left and the
/// masked fingerprint, scaled by `gain` around mid-grey, on the right.
pub fn preview_rgba(seed: u64, gen_id: usize, identity_id: usize, size: usize, gain: f64) -> Result<Vec<u8>> {
    if size == 0 || size % 4 != 0 {
        return Err(CdalError::InvalidArgument(format!("size {size} must be a positive multiple of 4")));
    }
    let gen = GeneratorSpec::standard(gen_id, seed);
    let source = SourceSpec::standard(identity_id, seed);
    let mut r = rng::indexed(seed, "demo.preview", (gen_id * 1000 + identity_id) as u64);
    let img = synthesize(&source, &gen, size, size, 0.01, &mut r);
    let plane = size * size;
    let mut out = vec![0u8; 2 * plane * 4];
    for y in 0..size {
        for x in 0..size {
            let left = (y * 2 * size + x) * 4;
            for c in 0..CHANNELS {
                out[left + c] = to_byte(img.data()[c * plane + y * size + x]);
            }
            let f = if gen.mask.contains(y, x, size, size) {
                gen.amplitude * gen.pattern(y, x, size, size)
            } else {
                0.0
            };
            let grey = to_byte(0.5 + gain * f);
            let right = left + size * 4;
            out[right..right + 3].fill(grey);
            out[left + 3] = 255;
            out[right + 3] = 255;
        }
    }
    Ok(out)
}

/// ROC and OSCR points plus their areas.
#[derive(Clone, Debug, PartialEq)]
pub struct Curves {
    pub roc: Vec<(f64, f64)>,
    pub oscr: Vec<(f64, f64)>,
    pub auc: f64,
    pub oscr_area: f64,
}

/// A small model trained on a small synthetic benchmark.
pub struct DemoModel {
    pub model: Model,
    pub data: Dataset,
    pub seed: u64,
}

impl DemoModel {
    pub fn train(seed: u64, samples_per_class: usize, epochs: usize, mode: CounterfactualMode) -> Result<Self> {
        let data = build_dataset(&DatasetConfig {
            seed,
            samples_per_class,
            identities: 8,
            ..DatasetConfig::default()
        })?;
        let mut cfg = TrainConfig {
            seed,
            epochs,
            batch_size: 16,
            ..TrainConfig::default()
        };
        cfg.model.counterfactual_mode = mode;
        let model = train(&cfg, &data)?.model;
        Ok(DemoModel { model, data, seed })
    }

    /// `[M,H,W]` shape of one attention set.
    pub fn map_shape(&self) -> [usize; 3] {
        let m = &self.data.manifest;
        [self.model.config.n_maps, m.height / 4, m.width / 4]
    }

    /// Factual maps of unlabeled sample `index`, and counterfactual maps from the
    /// trained branch (`learned`) or one of the static constructions.
    pub fn maps(&self, index: usize, mode: CounterfactualMode) -> Result<(Vec<f64>, Vec<f64>)> {
        let sample = self
            .data
            .unlabeled()
            .nth(index)
            .ok_or_else(|| CdalError::InvalidArgument(format!("no unlabeled sample {index}")))?;
        let mut r = rng::indexed(self.seed, "demo.maps", index as u64);
        let maps = self
            .model
            .attention_maps(&sample.image, &mut r)?
            .ok_or_else(|| CdalError::Config("model has no attention".into()))?;
        let cf = match mode {
            CounterfactualMode::Learned => maps.counterfactual.unwrap_or_else(|| maps.factual.clone()),
            m => static_counterfactual(m, &maps.factual, &mut r)?,
        };
        Ok((maps.factual.data().to_vec(), cf.data().to_vec()))
    }

    pub fn unlabeled_len(&self) -> usize {
        self.data.unlabeled().count()
    }

    /// Generator id of unlabeled sample `index`.
    pub fn generator_of(&self, index: usize) -> Option<usize> {
        self.data.unlabeled().nth(index).map(|s| s.gen_id)
    }

    /// Maximum-softmax novelty curves over the unlabeled split.
    pub fn curves(&self) -> Result<Curves> {
        let (mut ks, mut kc, mut us) = (Vec::new(), Vec::new(), Vec::new());
        for s in self.data.unlabeled() {
            let inf = self.model.infer(&s.image)?;
            let score = msp(&inf.logits);
            match self.data.known_index(s.gen_id) {
                Some(k) => {
                    let pred = inf
                        .logits
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(i, _)| i);
                    ks.push(score);
                    kc.push(pred == Some(k));
                }
                None => us.push(score),
            }
        }
        let all_correct = vec![true; ks.len()];
        let is_known: Vec<bool> = ks.iter().map(|_| true).chain(us.iter().map(|_| false)).collect();
        let scores: Vec<f64> = ks.iter().chain(&us).copied().collect();
        Ok(Curves {
            roc: oscr_curve(&ks, &all_correct, &us)?,
            oscr: oscr_curve(&ks, &kc, &us)?,
            auc: auc_known_unknown(&scores, &is_known)?,
            oscr_area: oscr(&ks, &kc, &us)?,
        })
    }
}

fn js_err(e: CdalError) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn parse_mode(mode: &str) -> std::result::Result<CounterfactualMode, JsValue> {
    mode.parse().map_err(js_err)
}

fn flatten(points: &[(f64, f64)]) -> Vec<f64> {
    points.iter().flat_map(|&(x, y)| [x, y]).collect()
}

#[wasm_bindgen]
pub fn synth_preview(seed: u32, gen_id: u32, identity_id: u32, size: u32, gain: f64) -> std::result::Result<Vec<u8>, JsValue> {
    preview_rgba(seed as u64, gen_id as usize, identity_id as usize, size as usize, gain).map_err(js_err)
}

#[wasm_bindgen]
pub struct Demo {
    inner: DemoModel,
    curves: Curves,
}

#[wasm_bindgen]
impl Demo {
    /// Trains a demo model; `mode` is the counterfactual mode used in training.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, samples_per_class: u32, epochs: u32, mode: &str) -> std::result::Result<Demo, JsValue> {
        let inner = DemoModel::train(seed as u64, samples_per_class as usize, epochs as usize, parse_mode(mode)?)
            .map_err(js_err)?;
        let curves = inner.curves().map_err(js_err)?;
        Ok(Demo { inner, curves })
    }

    #[wasm_bindgen(js_name = mapShape)]
    pub fn map_shape(&self) -> Vec<u32> {
        self.inner.map_shape().iter().map(|&d| d as u32).collect()
    }

    #[wasm_bindgen(js_name = sampleCount)]
    pub fn sample_count(&self) -> u32 {
        self.inner.unlabeled_len() as u32
    }

    #[wasm_bindgen(js_name = generatorOf)]
    pub fn generator_of(&self, index: u32) -> i32 {
        self.inner.generator_of(index as usize).map_or(-1, |g| g as i32)
    }

    /// Factual maps followed by counterfactual maps, each `[M,H,W]` row-major.
    pub fn maps(&self, index: u32, mode: &str) -> std::result::Result<Vec<f64>, JsValue> {
        let (f, c) = self.inner.maps(index as usize, parse_mode(mode)?).map_err(js_err)?;
        Ok(f.into_iter().chain(c).collect())
    }

    /// ROC points as `[fpr0, tpr0, fpr1, tpr1, ...]`.
    pub fn roc(&self) -> Vec<f64> {
        flatten(&self.curves.roc)
    }

    /// OSCR points as `[fpr0, ccr0, ...]`.
    #[wasm_bindgen(js_name = oscrCurve)]
    pub fn oscr_curve(&self) -> Vec<f64> {
        flatten(&self.curves.oscr)
    }

    pub fn auc(&self) -> f64 {
        self.curves.auc
    }

    pub fn oscr(&self) -> f64 {
        self.curves.oscr_area
    }
}
