//! Backbone, heads and attention branches, plus the per-sample training graph.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBranch, AttentionKind, AttentionSet, CounterfactualMode, CounterfactualSource};
use crate::augment::{augment_pass, AugChainConfig};
use crate::error::{CdalError, Result};
use crate::eval::{AttributionModel, Inference};
use crate::losses::{self, ClassifierHead, LossParts};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const CONV1_OUT: usize = 8;
pub const FEATURES: usize = 16;

/// Per-channel standardization to zero mean and unit variance.
pub fn center_channels(image: &Tensor) -> Tensor {
    let c = image.shape()[0];
    let plane = image.len() / c;
    let mut out = image.clone();
    for chunk in out.data_mut().chunks_mut(plane) {
        let mean = chunk.iter().sum::<f64>() / plane as f64;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
        let inv = 1.0 / (var.sqrt() + 1e-6);
        chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

/// Two conv/relu/avg-pool stages: `[3,H,W] -> [16,H/4,W/4]`.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, seed: u64, in_channels: usize) -> Self {
        Backbone {
            conv1_w: store.add_he(seed, "backbone.conv1.w", &[CONV1_OUT, in_channels, 3, 3], in_channels * 9),
            conv1_b: store.add_zeros("backbone.conv1.b", &[CONV1_OUT]),
            conv2_w: store.add_he(seed, "backbone.conv2.w", &[FEATURES, CONV1_OUT, 3, 3], CONV1_OUT * 9),
            conv2_b: store.add_zeros("backbone.conv2.b", &[FEATURES]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, image: Var) -> Result<Var> {
        let h = tape.conv2d(image, p[self.conv1_w])?;
        let h = tape.add_channel_bias(h, p[self.conv1_b])?;
        let h = tape.relu(h);
        let h = tape.avg_pool2(h)?;
        let h = tape.conv2d(h, p[self.conv2_w])?;
        let h = tape.add_channel_bias(h, p[self.conv2_b])?;
        let h = tape.relu(h);
        tape.avg_pool2(h)
    }
}

/// Which parts of the attention stack are trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_experts: usize,
    pub n_maps: usize,
    pub counterfactual_mode: CounterfactualMode,
    pub cdal_enabled: bool,
    /// Factual attention reweights features directly; no counterfactual path or CDAL losses.
    pub vanilla_attention_mode: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_experts: 4,
            n_maps: 8,
            counterfactual_mode: CounterfactualMode::Learned,
            cdal_enabled: true,
            vanilla_attention_mode: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(CdalError::Config("model.n_experts must be positive".into()));
        }
        if self.n_maps == 0 || self.n_maps % 2 != 0 {
            return Err(CdalError::Config(format!("model.n_maps must be even and positive, got {}", self.n_maps)));
        }
        if self.cdal_enabled && self.vanilla_attention_mode {
            return Err(CdalError::Config("model.vanilla_attention_mode excludes model.cdal_enabled".into()));
        }
        Ok(())
    }

    /// Attention-weighted pooling is used for the embedding whenever a factual branch is trained.
    pub fn uses_attention(&self) -> bool {
        self.cdal_enabled || self.vanilla_attention_mode
    }

    pub fn label(&self) -> String {
        if self.vanilla_attention_mode {
            "vanilla".into()
        } else if !self.cdal_enabled {
            "baseline".into()
        } else {
            format!("cdal-{}", self.counterfactual_mode)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub backbone: usize,
    pub base_head: usize,
    /// Factual branch, counterfactual branch (when learned) and the shared attention head.
    pub cdal: usize,
}

impl ParamReport {
    pub fn baseline_total(&self) -> usize {
        self.backbone + self.base_head
    }

    pub fn overhead(&self) -> f64 {
        self.cdal as f64 / self.baseline_total() as f64
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub in_channels: usize,
    pub classes: usize,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub base: ClassifierHead,
    pub delta: ClassifierHead,
    pub factual: AttentionBranch,
    pub counterfactual: AttentionBranch,
}

/// Values recorded for one labeled sample.
pub struct SampleGraph {
    pub parts: LossParts,
    pub x: Var,
    pub factual: Option<AttentionSet>,
}

impl Model {
    pub fn new(config: ModelConfig, in_channels: usize, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(CdalError::Config(format!("need at least 2 known classes, got {classes}")));
        }
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, seed, in_channels);
        let base = ClassifierHead::new(&mut store, seed, "head.base", FEATURES, classes);
        let delta = ClassifierHead::new(&mut store, seed, "head.delta", FEATURES, classes);
        let factual = AttentionBranch::new(
            &mut store,
            seed,
            "attn.factual",
            AttentionKind::Factual,
            FEATURES,
            config.n_maps,
            config.n_experts,
        )?;
        let counterfactual = AttentionBranch::new(
            &mut store,
            seed,
            "attn.counterfactual",
            AttentionKind::Counterfactual,
            FEATURES,
            config.n_maps,
            config.n_experts,
        )?;
        Ok(Model {
            config,
            in_channels,
            classes,
            store,
            backbone,
            base,
            delta,
            factual,
            counterfactual,
        })
    }

    pub fn param_report(&self) -> ParamReport {
        let s = &self.store;
        let learned_cf = self.config.cdal_enabled && self.config.counterfactual_mode == CounterfactualMode::Learned;
        let cdal = if self.config.uses_attention() {
            s.count_prefix("attn.factual.")
                + s.count_prefix("head.delta.")
                + if learned_cf { s.count_prefix("attn.counterfactual.") } else { 0 }
        } else {
            0
        };
        ParamReport {
            backbone: s.count_prefix("backbone."),
            base_head: s.count_prefix("head.base."),
            cdal,
        }
    }

    /// The default-config report, independent of which ablation a model was built for.
    pub fn full_param_report(&self) -> ParamReport {
        let s = &self.store;
        ParamReport {
            backbone: s.count_prefix("backbone."),
            base_head: s.count_prefix("head.base."),
            cdal: s.count_prefix("attn.") + s.count_prefix("head.delta."),
        }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.in_channels || s[1] % 4 != 0 || s[2] % 4 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(CdalError::InvalidArgument(format!(
                "image shape {s:?} incompatible with a {}-channel model (H, W multiples of 4)",
                self.in_channels
            )));
        }
        Ok(())
    }

    fn counterfactual_source(&self) -> CounterfactualSource<'_> {
        match self.config.counterfactual_mode {
            CounterfactualMode::Learned => CounterfactualSource::Branch(&self.counterfactual),
            mode => CounterfactualSource::Static(mode),
        }
    }

    /// Records the full objective for one labeled image.
    pub fn sample_graph(
        &self,
        tape: &mut Tape,
        p: &Binding,
        image: &Tensor,
        label: usize,
        aug: &AugChainConfig,
        rng: &mut Rng,
    ) -> Result<SampleGraph> {
        self.check_image(image)?;
        if label >= self.classes {
            return Err(CdalError::InvalidArgument(format!("label {label} out of range")));
        }
        let img = tape.constant(center_channels(image));
        let x = self.backbone.forward(tape, p, img)?;
        let original = losses::l_original(tape, p, &self.base, x, label)?;
        if self.config.vanilla_attention_mode {
            let f = self.factual.extract(tape, p, x)?;
            let y = losses::predict(tape, p, &self.delta, x, &f)?;
            let attn = losses::cross_entropy(tape, y, label)?;
            let original = tape.add(original, attn)?;
            return Ok(SampleGraph {
                parts: LossParts {
                    original,
                    causal: None,
                    decor: None,
                    aug: None,
                },
                x,
                factual: Some(f),
            });
        }
        if !self.config.cdal_enabled {
            return Ok(SampleGraph {
                parts: LossParts {
                    original,
                    causal: None,
                    decor: None,
                    aug: None,
                },
                x,
                factual: None,
            });
        }
        let f = self.factual.extract(tape, p, x)?;
        let source = self.counterfactual_source();
        let c = source.produce(tape, p, x, &f, rng)?;
        let out = augment_pass(tape, p, x, &f, &c, &self.factual, source, aug, rng)?;
        let y_f = losses::predict(tape, p, &self.delta, out.x_aug, &out.f_aug)?;
        let y_c = losses::predict(tape, p, &self.delta, out.x_aug, &out.c_aug)?;
        let effect = losses::causal_effect(tape, y_f, y_c)?;
        let causal = losses::l_causal(tape, effect, label)?;
        let decor = losses::l_decor(tape, y_c)?;
        let aug_loss = losses::l_aug(tape, x, out.x_aug, &f, &out.f_aug, out.s)?;
        Ok(SampleGraph {
            parts: LossParts {
                original,
                causal: Some(causal),
                decor: Some(decor),
                aug: Some(aug_loss),
            },
            x,
            factual: Some(f),
        })
    }

    /// Backbone features and, when attention is trained, the factual maps.
    pub fn features(&self, image: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let img = tape.constant(center_channels(image));
        let x = self.backbone.forward(&mut tape, &p, img)?;
        let f = if self.config.uses_attention() {
            let f = self.factual.extract(&mut tape, &p, x)?;
            Some(tape.value(f.maps).clone())
        } else {
            None
        };
        Ok((tape.value(x).clone(), f))
    }
}

/// Attention maps of one image, for inspection.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    pub factual: Tensor,
    /// Absent when the model has no counterfactual path.
    pub counterfactual: Option<Tensor>,
}

impl Model {
    /// `None` when the model was trained without attention.
    pub fn attention_maps(&self, image: &Tensor, rng: &mut Rng) -> Result<Option<AttentionMaps>> {
        if !self.config.uses_attention() {
            return Ok(None);
        }
        self.check_image(image)?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let img = tape.constant(center_channels(image));
        let x = self.backbone.forward(&mut tape, &p, img)?;
        let f = self.factual.extract(&mut tape, &p, x)?;
        let counterfactual = if self.config.cdal_enabled {
            let c = self.counterfactual_source().produce(&mut tape, &p, x, &f, rng)?;
            Some(tape.value(c.maps).clone())
        } else {
            None
        };
        Ok(Some(AttentionMaps {
            factual: tape.value(f.maps).clone(),
            counterfactual,
        }))
    }
}

impl AttributionModel for Model {
    fn infer(&self, image: &Tensor) -> Result<Inference> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let img = tape.constant(center_channels(image));
        let x = self.backbone.forward(&mut tape, &p, img)?;
        let pooled = tape.gap(x)?;
        let logits = self.base.forward(&mut tape, &p, pooled)?;
        let embedding = if self.config.uses_attention() {
            let f = self.factual.extract(&mut tape, &p, x)?;
            let total = tape.channel_sum(f.maps)?;
            let z = tape.mul_spatial(x, total)?;
            tape.gap(z)?
        } else {
            pooled
        };
        Ok(Inference {
            logits: tape.value(logits).data().to_vec(),
            embedding: tape.value(embedding).data().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::testutil::*;

    #[test]
    fn backbone_shapes_and_counts() {
        let m = Model::new(ModelConfig::default(), 3, 4, 0).unwrap();
        let (x, f) = m.features(&positive_tensor(&[3, 32, 32], 1)).unwrap();
        assert_eq!(x.shape(), &[16, 8, 8]);
        assert_eq!(f.unwrap().shape(), &[8, 8, 8]);
        let r = m.param_report();
        assert_eq!(r.backbone, 8 * 3 * 9 + 8 + 16 * 8 * 9 + 16);
        assert_eq!(r.base_head, 16 * 4 + 4);
        assert_eq!(r, m.full_param_report());
    }

    #[test]
    fn backbone_matches_naive_oracle() {
        let m = Model::new(ModelConfig::default(), 3, 4, 2).unwrap();
        let img = positive_tensor(&[3, 8, 8], 3);
        let conv_bias_relu_pool = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let y = naive_conv2d(x, w);
            let (c, h, wd) = (y.shape()[0], y.shape()[1], y.shape()[2]);
            let mut out = vec![0.0; c * (h / 2) * (wd / 2)];
            for ch in 0..c {
                for i in 0..h / 2 {
                    for j in 0..wd / 2 {
                        let mut acc = 0.0;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            acc += (y.data()[(ch * h + 2 * i + di) * wd + 2 * j + dj] + b.data()[ch]).max(0.0);
                        }
                        out[(ch * (h / 2) + i) * (wd / 2) + j] = acc / 4.0;
                    }
                }
            }
            Tensor::new(vec![c, h / 2, wd / 2], out).unwrap()
        };
        let mut centred = img.clone();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..64).map(|i| img.data()[ch * 64 + i]).collect();
            let mean = vals.iter().sum::<f64>() / 64.0;
            let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0).sqrt();
            for i in 0..64 {
                centred.data_mut()[ch * 64 + i] = (vals[i] - mean) / (sd + 1e-6);
            }
        }
        let s = &m.store;
        let h = conv_bias_relu_pool(&centred, s.get(m.backbone.conv1_w), s.get(m.backbone.conv1_b));
        let want = conv_bias_relu_pool(&h, s.get(m.backbone.conv2_w), s.get(m.backbone.conv2_b));
        let (x, _) = m.features(&img).unwrap();
        assert!(x.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn ablation_modes_record_expected_terms() {
        let img = positive_tensor(&[3, 8, 8], 4);
        for (cfg, has_cdal) in [
            (ModelConfig::default(), true),
            (
                ModelConfig {
                    cdal_enabled: false,
                    ..ModelConfig::default()
                },
                false,
            ),
            (
                ModelConfig {
                    cdal_enabled: false,
                    vanilla_attention_mode: true,
                    ..ModelConfig::default()
                },
                false,
            ),
            (
                ModelConfig {
                    counterfactual_mode: CounterfactualMode::Shuffle,
                    ..ModelConfig::default()
                },
                true,
            ),
        ] {
            let m = Model::new(cfg, 3, 3, 1).unwrap();
            let mut tape = Tape::new();
            let p = m.store.bind(&mut tape);
            let g = m
                .sample_graph(&mut tape, &p, &img, 1, &AugChainConfig::default(), &mut rng::stream(0, "t"))
                .unwrap();
            assert_eq!(g.parts.causal.is_some(), has_cdal);
            assert_eq!(g.parts.aug.is_some(), has_cdal);
            assert!(tape.value(g.parts.original).item().is_finite());
        }
    }

    #[test]
    fn overhead_counts_only_trained_parts() {
        let full = Model::new(ModelConfig::default(), 3, 4, 0).unwrap().param_report();
        let stat = Model::new(
            ModelConfig {
                counterfactual_mode: CounterfactualMode::Random,
                ..ModelConfig::default()
            },
            3,
            4,
            0,
        )
        .unwrap()
        .param_report();
        let base = Model::new(
            ModelConfig {
                cdal_enabled: false,
                ..ModelConfig::default()
            },
            3,
            4,
            0,
        )
        .unwrap()
        .param_report();
        assert!(full.cdal > stat.cdal);
        assert_eq!(base.cdal, 0);
        assert_eq!(base.overhead(), 0.0);
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        let bad = ModelConfig {
            vanilla_attention_mode: true,
            ..ModelConfig::default()
        };
        assert!(Model::new(bad, 3, 4, 0).is_err());
        assert!(Model::new(ModelConfig::default(), 3, 1, 0).is_err());
        let m = Model::new(ModelConfig::default(), 3, 4, 0).unwrap();
        assert!(m.infer(&Tensor::zeros(&[3, 6, 8])).is_err());
        assert!(m.infer(&Tensor::zeros(&[1, 8, 8])).is_err());
    }
}
