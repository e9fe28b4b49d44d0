//! SGD-with-momentum training over the labeled known-class split, plus checkpoint
//! and loss-trace serialization.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::AugChainConfig;
use crate::error::{CdalError, Result};
use crate::losses::{l_total, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::rng;
use crate::synth::Dataset;
use crate::tensor::{read_tensor, write_tensor, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Largest allowed global L2 norm of the batch gradient; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub model: ModelConfig,
    pub aug: AugChainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            grad_clip: 1.0,
            seed: 0,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
            aug: AugChainConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CdalError::Config("train.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CdalError::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CdalError::Config(format!("train.momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(CdalError::Config(format!("train.grad_clip must be >= 0, got {}", self.grad_clip)));
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.aug.validate()
    }
}

/// Batch-mean loss terms for one optimizer step. Disabled terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_original: f64,
    pub l_causal: f64,
    pub l_decor: f64,
    pub l_aug: f64,
    pub l_total: f64,
}

impl StepLog {
    fn is_finite(&self) -> bool {
        [self.l_original, self.l_causal, self.l_decor, self.l_aug, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NumericDiagnostics {
    pub step: usize,
    pub losses: StepLog,
    pub grad_norms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub velocity: Vec<Tensor>,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let velocity = model.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        TrainState { model, velocity, step: 0 }
    }
}

/// Worker-thread cap from `CDAL_THREADS` (default 1).
pub fn thread_count() -> usize {
    std::env::var("CDAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

struct SampleResult {
    log: StepLog,
    grads: Vec<Tensor>,
}

fn sample_pass(model: &Model, image: &Tensor, label: usize, cfg: &TrainConfig, rng: &mut rng::Rng) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let g = model.sample_graph(&mut tape, &p, image, label, &cfg.aug, rng)?;
    let total = l_total(&mut tape, &g.parts, &cfg.loss)?;
    let val = |v: Option<crate::tensor::Var>| v.map_or(0.0, |v| tape.value(v).item());
    let log = StepLog {
        step: 0,
        l_original: tape.value(g.parts.original).item(),
        l_causal: val(g.parts.causal),
        l_decor: val(g.parts.decor),
        l_aug: val(g.parts.aug),
        l_total: tape.value(total).item(),
    };
    tape.backward(total)?;
    Ok(SampleResult {
        log,
        grads: p.grads(&tape),
    })
}

/// One optimizer step on `batch` of `(image, known-class label)` pairs. Each sample
/// draws from its own stream `(seed, "train.sample", global sample counter)`.
fn numeric_failure(state: &TrainState, log: StepLog, what: &str, grads: &[Tensor]) -> CdalError {
    let diag = NumericDiagnostics {
        step: state.step,
        losses: log,
        grad_norms: state
            .model
            .store
            .iter()
            .zip(grads)
            .map(|((name, _), g)| (name.to_string(), g.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect(),
    };
    match serde_json::to_string(&diag) {
        Ok(json) => CdalError::Numeric(format!("{what} at step {}: {json}", state.step)),
        Err(e) => e.into(),
    }
}

pub fn train_step(state: &mut TrainState, batch: &[(&Tensor, usize)], cfg: &TrainConfig) -> Result<StepLog> {
    if batch.is_empty() {
        return Err(CdalError::InvalidArgument("empty batch".into()));
    }
    let base = (state.step * cfg.batch_size) as u64;
    let threads = thread_count().min(batch.len());
    let model = &state.model;
    let run = |i: usize| -> Result<SampleResult> {
        let (img, label) = batch[i];
        sample_pass(model, img, label, cfg, &mut rng::indexed(cfg.seed, "train.sample", base + i as u64))
    };
    let results: Vec<Result<SampleResult>> = if threads <= 1 {
        (0..batch.len()).map(run).collect()
    } else {
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..batch.len())
                .step_by(chunk)
                .map(|start| {
                    let run = &run;
                    s.spawn(move || (start..(start + chunk).min(batch.len())).map(run).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    };

    let n = batch.len() as f64;
    let mut log = StepLog {
        step: state.step,
        ..StepLog::default()
    };
    let mut grads: Vec<Tensor> = state.velocity.iter().map(|v| Tensor::zeros(v.shape())).collect();
    for r in results {
        let r = match r {
            Err(CdalError::Numeric(m)) => return Err(numeric_failure(state, log, &m, &grads)),
            r => r?,
        };
        log.l_original += r.log.l_original / n;
        log.l_causal += r.log.l_causal / n;
        log.l_decor += r.log.l_decor / n;
        log.l_aug += r.log.l_aug / n;
        log.l_total += r.log.l_total / n;
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b / n;
            }
        }
    }

    if !log.is_finite() || !grads.iter().all(Tensor::is_finite) {
        return Err(numeric_failure(state, log, "non-finite loss or gradient", &grads));
    }

    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        let k = cfg.grad_clip / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
    }
    for ((w, v), g) in state.model.store.tensors_mut().iter_mut().zip(&mut state.velocity).zip(&grads) {
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = cfg.momentum * *vi + gi;
            *wi -= cfg.learning_rate * *vi;
        }
    }
    if !state.model.store.tensors().iter().all(Tensor::is_finite) {
        return Err(numeric_failure(state, log, "non-finite parameters after update", &grads));
    }
    state.step += 1;
    Ok(log)
}

pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<StepLog>,
}

/// Labeled pairs with labels indexed by position among the known generators.
pub fn labeled_pairs(ds: &Dataset) -> Result<Vec<(&Tensor, usize)>> {
    ds.labeled()
        .map(|s| {
            ds.known_index(s.gen_id)
                .map(|k| (&s.image, k))
                .ok_or_else(|| CdalError::Data(format!("labeled sample from unknown generator {}", s.gen_id)))
        })
        .collect()
}

pub fn init_model(cfg: &TrainConfig, ds: &Dataset) -> Result<Model> {
    Model::new(cfg.model.clone(), ds.manifest.channels, ds.manifest.known_generators.len(), cfg.seed)
}

pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, ds, |_| {})
}

/// Like [`train`], calling `on_step` after every step.
pub fn train_with(cfg: &TrainConfig, ds: &Dataset, mut on_step: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pairs = labeled_pairs(ds)?;
    if pairs.is_empty() {
        return Err(CdalError::Data("dataset has no labeled samples".into()));
    }
    let (h, w) = (ds.manifest.height, ds.manifest.width);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(CdalError::Data(format!("image size {h}x{w} is not a multiple of 4")));
    }
    let mut state = TrainState::new(init_model(cfg, ds)?);
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::indexed(cfg.seed, "train.epoch", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Tensor, usize)> = chunk.iter().map(|&i| pairs[i]).collect();
            let log = train_step(&mut state, &batch, cfg)?;
            on_step(&log);
            trace.push(log);
        }
    }
    Ok(TrainOutcome {
        model: state.model,
        trace,
    })
}

pub const TRACE_HEADER: &str = "step,l_original,l_causal,l_decor,l_aug,l_total";

pub fn write_trace(path: &Path, trace: &[StepLog]) -> Result<()> {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for s in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.step, s.l_original, s.l_causal, s.l_decor, s.l_aug, s.l_total
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CDALCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub version: u32,
    pub seed: u64,
    pub in_channels: usize,
    pub classes: usize,
    pub model: ModelConfig,
    /// Byte ranges relative to the start of the blob section.
    pub tensors: BTreeMap<String, BlobEntry>,
}

/// Container layout: `CDALCKPT`, u64 LE index length, the JSON index, then the CDT1 blobs.
pub fn write_checkpoint(path: &Path, model: &Model, seed: u64) -> Result<()> {
    let mut blobs = Vec::new();
    let mut tensors = BTreeMap::new();
    for (name, t) in model.store.iter() {
        let offset = blobs.len() as u64;
        write_tensor(&mut blobs, t)?;
        tensors.insert(
            name.to_string(),
            BlobEntry {
                offset,
                length: blobs.len() as u64 - offset,
            },
        );
    }
    let index = CheckpointIndex {
        version: CHECKPOINT_VERSION,
        seed,
        in_channels: model.in_channels,
        classes: model.classes,
        model: model.config.clone(),
        tensors,
    };
    let json = serde_json::to_vec_pretty(&index)?;
    let mut f = fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&blobs)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(Model, CheckpointIndex)> {
    let bytes = fs::read(path).map_err(|e| CdalError::Data(format!("{}: {e}", path.display())))?;
    let bad = |m: &str| CdalError::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated index"))?;
    let index: CheckpointIndex = serde_json::from_slice(json).map_err(|e| bad(&format!("index: {e}")))?;
    if index.version != CHECKPOINT_VERSION {
        return Err(bad(&format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            index.version
        )));
    }
    let blobs = &bytes[16 + len..];
    let mut model = Model::new(index.model.clone(), index.in_channels, index.classes, index.seed)
        .map_err(|e| bad(&format!("model config: {e}")))?;
    if model.store.len() != index.tensors.len() {
        return Err(bad("parameter set does not match the model"));
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        let entry = index.tensors.get(&name).ok_or_else(|| bad(&format!("missing tensor {name}")))?;
        let mut slice = blobs
            .get(entry.offset as usize..(entry.offset + entry.length) as usize)
            .ok_or_else(|| bad(&format!("tensor {name} out of range")))?;
        let t = read_tensor(&mut slice)?;
        if t.shape() != model.store.get(id).shape() {
            return Err(bad(&format!("tensor {name} has shape {:?}", t.shape())));
        }
        *model.store.get_mut(id) = t;
    }
    Ok((model, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_dataset, DatasetConfig};

    fn tiny_ds() -> Dataset {
        build_dataset(&DatasetConfig {
            samples_per_class: 8,
            identities: 4,
            height: 8,
            width: 8,
            known_generators: vec![0, 1, 2],
            novel_generators: vec![3],
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn disabled_cdal_reports_zero_parts() {
        let ds = tiny_ds();
        let mut cfg = tiny_cfg();
        cfg.model.cdal_enabled = false;
        let out = train(&cfg, &ds).unwrap();
        for s in &out.trace {
            assert_eq!((s.l_causal, s.l_decor, s.l_aug), (0.0, 0.0, 0.0));
            assert_eq!(s.l_total, s.l_original);
        }
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let ds = tiny_ds();
        let a = train(&tiny_cfg(), &ds).unwrap();
        let b = train(&tiny_cfg(), &ds).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model.store, b.model.store);
        let mut other = tiny_cfg();
        other.seed = 1;
        assert_ne!(train(&other, &ds).unwrap().trace, a.trace);
    }

    #[test]
    fn single_small_step_decreases_total_loss() {
        let ds = tiny_ds();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.0,
            ..tiny_cfg()
        };
        let pairs = labeled_pairs(&ds).unwrap();
        let batch = &pairs[..4];
        let mut state = TrainState::new(init_model(&cfg, &ds).unwrap());
        let before = train_step(&mut state, batch, &cfg).unwrap();
        // replay the same sample streams on the updated weights
        state.step = 0;
        let after = train_step(&mut state, batch, &cfg).unwrap();
        assert!(after.l_total < before.l_total, "{} -> {}", before.l_total, after.l_total);
    }

    #[test]
    fn zero_epochs_checkpoint_is_initialization() {
        let ds = tiny_ds();
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let out = train(&cfg, &ds).unwrap();
        assert!(out.trace.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &out.model, cfg.seed).unwrap();
        let (back, index) = read_checkpoint(&path).unwrap();
        assert_eq!(back.store, init_model(&cfg, &ds).unwrap().store);
        assert_eq!(index.tensors.len(), back.store.len());
    }

    #[test]
    fn checkpoint_rejects_version_and_garbage() {
        let ds = tiny_ds();
        let model = init_model(&tiny_cfg(), &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, &model, 0).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let needle = b"\"version\": 1";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        bytes[at + needle.len() - 1] = b'9';
        fs::write(&path, &bytes).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(matches!(err, CdalError::Data(ref m) if m.contains("version")), "{err}");
        fs::write(&path, b"hello").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn vanilla_mode_runs_to_completion() {
        let ds = tiny_ds();
        let mut cfg = tiny_cfg();
        cfg.model.cdal_enabled = false;
        cfg.model.vanilla_attention_mode = true;
        let out = train(&cfg, &ds).unwrap();
        assert_eq!(out.trace.len(), 24 / 4);
        assert!(out.trace.iter().all(StepLog::is_finite));
    }

    #[test]
    fn trace_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace(&path, &[StepLog::default()]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{TRACE_HEADER}\n0,0,0,0,0,0\n"));
    }

    #[test]
    fn non_finite_input_aborts_with_diagnostics() {
        let ds = tiny_ds();
        let cfg = tiny_cfg();
        let mut state = TrainState::new(init_model(&cfg, &ds).unwrap());
        let mut img = ds.samples[0].image.clone();
        img.data_mut()[0] = f64::NAN;
        let err = train_step(&mut state, &[(&img, 0)], &cfg).unwrap_err();
        assert!(matches!(err, CdalError::Numeric(ref m) if m.contains("grad_norms")), "{err}");
    }
}
