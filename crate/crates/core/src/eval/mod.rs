//! Open-world evaluation: known-class accuracy, novelty scoring and novel-class
//! discovery by clustering.

mod kmeans;
mod metrics;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, kmeans_full, KMeansResult, MAX_ITERS, SHIFT_TOL};
pub use metrics::{ari, assignment, auc_known_unknown, cluster_accuracy, hungarian_match, nmi, oscr, oscr_curve, purity};

use crate::error::{CdalError, Result};
use crate::rng;
use crate::synth::Dataset;
use crate::tensor::Tensor;

/// What a trained model exposes to the evaluator for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// Logits over the known classes, in known-generator order.
    pub logits: Vec<f64>,
    /// Embedding used for novel-class clustering.
    pub embedding: Vec<f64>,
}

pub trait AttributionModel {
    fn infer(&self, image: &Tensor) -> Result<Inference>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub kmeans_restarts: usize,
    /// Z-score each embedding dimension over the clustered samples.
    pub standardize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            kmeans_restarts: 10,
            standardize: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kmeans_restarts == 0 {
            return Err(CdalError::Config("eval.kmeans_restarts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub known_acc: f64,
    pub novel_acc: f64,
    pub novel_nmi: f64,
    pub novel_ari: f64,
    pub novel_purity: f64,
    pub all_acc: f64,
    pub all_nmi: f64,
    pub all_ari: f64,
    pub auc: f64,
    pub oscr: f64,
    pub seed: u64,
    pub config_digest: String,
}

const CSV_HEADER: &str =
    "seed,config_digest,known_acc,novel_acc,novel_nmi,novel_ari,novel_purity,all_acc,all_nmi,all_ari,auc,oscr";

impl EvalReport {
    pub fn csv_header() -> &'static str {
        CSV_HEADER
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.config_digest,
            self.known_acc,
            self.novel_acc,
            self.novel_nmi,
            self.novel_ari,
            self.novel_purity,
            self.all_acc,
            self.all_nmi,
            self.all_ari,
            self.auc,
            self.oscr
        )
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Appends one row, writing the header first if the file is new or empty.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{CSV_HEADER}")?;
        }
        writeln!(f, "{}", self.csv_row())?;
        Ok(())
    }
}

/// Maximum softmax probability.
pub fn msp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    1.0 / z
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn standardized(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    rows.iter()
        .map(|r| {
            (0..d)
                .map(|j| if std[j] > 1e-12 { (r[j] - mean[j]) / std[j] } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Scores a model on the unlabeled split: known samples by argmax, novel samples
/// by clustering their embeddings with the true novel-class count.
pub fn evaluate<M: AttributionModel + ?Sized>(model: &M, ds: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    cfg.validate()?;
    let k_known = ds.manifest.known_generators.len();
    let k_novel = ds.manifest.novel_generators.len();
    let (mut known_pred, mut known_gt, mut known_scores) = (Vec::new(), Vec::new(), Vec::new());
    let (mut novel_emb, mut novel_gt, mut novel_scores) = (Vec::new(), Vec::new(), Vec::new());
    for s in ds.unlabeled() {
        let out = model.infer(&s.image)?;
        if out.logits.len() != k_known {
            return Err(CdalError::InvalidArgument(format!(
                "model produced {} logits for {k_known} known classes",
                out.logits.len()
            )));
        }
        if !out.logits.iter().chain(&out.embedding).all(|v| v.is_finite()) {
            return Err(CdalError::Numeric("non-finite model output during evaluation".into()));
        }
        if let Some(k) = ds.known_index(s.gen_id) {
            known_pred.push(argmax(&out.logits));
            known_gt.push(k);
            known_scores.push(msp(&out.logits));
        } else if let Some(u) = ds.novel_index(s.gen_id) {
            novel_emb.push(out.embedding);
            novel_gt.push(u);
            novel_scores.push(msp(&out.logits));
        }
    }
    if known_gt.is_empty() || novel_gt.is_empty() {
        return Err(CdalError::Data("evaluation needs unlabeled known and novel samples".into()));
    }
    let dim = novel_emb[0].len();
    if dim == 0 || novel_emb.iter().any(|e| e.len() != dim) {
        return Err(CdalError::InvalidArgument("inconsistent embedding sizes".into()));
    }

    let known_correct: Vec<bool> = known_pred.iter().zip(&known_gt).map(|(p, g)| p == g).collect();
    let known_acc = known_correct.iter().filter(|&&c| c).count() as f64 / known_gt.len() as f64;

    let rows = if cfg.standardize { standardized(&novel_emb) } else { novel_emb };
    let feats = Tensor::new(vec![rows.len(), dim], rows.into_iter().flatten().collect())?;
    let clusters = kmeans(&feats, k_novel, cfg.kmeans_restarts, &mut rng::stream(seed, "eval.kmeans"))?;
    let novel_acc = cluster_accuracy(&clusters, &novel_gt)?;

    let all_pred: Vec<usize> = known_pred.iter().copied().chain(clusters.iter().map(|c| k_known + c)).collect();
    let all_gt: Vec<usize> = known_gt.iter().copied().chain(novel_gt.iter().map(|u| k_known + u)).collect();
    let (_, all_acc) = hungarian_match(&all_pred, &all_gt, k_known + k_novel)?;

    let scores: Vec<f64> = known_scores.iter().chain(&novel_scores).copied().collect();
    let is_known: Vec<bool> = (0..scores.len()).map(|i| i < known_scores.len()).collect();

    Ok(EvalReport {
        known_acc,
        novel_acc,
        novel_nmi: nmi(&clusters, &novel_gt)?,
        novel_ari: ari(&clusters, &novel_gt)?,
        novel_purity: purity(&clusters, &novel_gt)?,
        all_acc,
        all_nmi: nmi(&all_pred, &all_gt)?,
        all_ari: ari(&all_pred, &all_gt)?,
        auc: auc_known_unknown(&scores, &is_known)?,
        oscr: oscr(&known_scores, &known_correct, &novel_scores)?,
        seed,
        config_digest: rng::digest(serde_json::to_string(cfg)?.as_bytes()),
    })
}
