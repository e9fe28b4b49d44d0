//! Ablation sweeps and attention-map export.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::attention::CounterfactualMode;
use crate::error::{CdalError, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::model::{Model, ParamReport};
use crate::rng;
use crate::synth::Dataset;
use crate::tensor::{write_tensor, Tensor};
use crate::trainer::{thread_count, train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// Learned counterfactual branch against the four static constructions.
    Counterfactual,
    /// Experts per CE convolution.
    Experts,
    /// Loss terms switched on one at a time, plus the vanilla-attention control.
    Components,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Counterfactual => "counterfactual",
            AblationAxis::Experts => "experts",
            AblationAxis::Components => "components",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = CdalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "counterfactual" => Ok(AblationAxis::Counterfactual),
            "experts" => Ok(AblationAxis::Experts),
            "components" => Ok(AblationAxis::Components),
            _ => Err(CdalError::Config(format!(
                "unknown ablation axis {s:?} (counterfactual | experts | components)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub train: TrainConfig,
}

pub const EXPERT_COUNTS: [usize; 4] = [1, 2, 4, 8];

/// Training configs for every row of `axis`, derived from `base`.
pub fn variants(axis: AblationAxis, base: &TrainConfig) -> Vec<Variant> {
    let cdal = |edit: &dyn Fn(&mut TrainConfig)| {
        let mut t = base.clone();
        t.model.cdal_enabled = true;
        t.model.vanilla_attention_mode = false;
        edit(&mut t);
        t
    };
    match axis {
        AblationAxis::Counterfactual => CounterfactualMode::ALL
            .iter()
            .map(|&m| Variant {
                label: m.to_string(),
                train: cdal(&|t| t.model.counterfactual_mode = m),
            })
            .collect(),
        AblationAxis::Experts => EXPERT_COUNTS
            .iter()
            .map(|&n| Variant {
                label: format!("experts={n}"),
                train: cdal(&|t| t.model.n_experts = n),
            })
            .collect(),
        AblationAxis::Components => {
            let (e1, e2, e3) = (base.loss.eta1, base.loss.eta2, base.loss.eta3);
            let weighted = |label: &str, w: [f64; 3]| Variant {
                label: label.to_string(),
                train: cdal(&|t| {
                    t.loss.eta1 = w[0];
                    t.loss.eta2 = w[1];
                    t.loss.eta3 = w[2];
                }),
            };
            let mut baseline = base.clone();
            baseline.model.cdal_enabled = false;
            baseline.model.vanilla_attention_mode = false;
            let mut vanilla = baseline.clone();
            vanilla.model.vanilla_attention_mode = true;
            vec![
                Variant {
                    label: "baseline".into(),
                    train: baseline,
                },
                weighted("causal", [e1, 0.0, 0.0]),
                weighted("causal+decor", [e1, e2, 0.0]),
                weighted("causal+decor+aug", [e1, e2, e3]),
                Variant {
                    label: "vanilla".into(),
                    train: vanilla,
                },
            ]
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub params: ParamReport,
    pub final_l_original: f64,
    pub report: EvalReport,
}

/// Trains and evaluates one variant at `seed`.
pub fn run_variant(variant: &Variant, eval_cfg: &EvalConfig, ds: &Dataset, seed: u64) -> Result<AblationRun> {
    let mut cfg = variant.train.clone();
    cfg.seed = seed;
    let out = train(&cfg, ds)?;
    let report = evaluate(&out.model, ds, eval_cfg, seed)?;
    Ok(AblationRun {
        variant: variant.label.clone(),
        seed,
        params: out.model.param_report(),
        final_l_original: out.trace.last().map_or(f64::NAN, |s| s.l_original),
        report,
    })
}

/// Every variant of `axis` at every seed, in variant-major order.
///
/// Runs are independent and fan out over up to [`thread_count`] threads.
pub fn run_ablation(
    axis: AblationAxis,
    base: &TrainConfig,
    eval_cfg: &EvalConfig,
    ds: &Dataset,
    seeds: &[u64],
) -> Result<Vec<AblationRun>> {
    if seeds.is_empty() {
        return Err(CdalError::Config("ablation needs at least one seed".into()));
    }
    let vs = variants(axis, base);
    let jobs: Vec<(&Variant, u64)> = vs.iter().flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let threads = thread_count().min(jobs.len());
    let results: Vec<Result<AblationRun>> = if threads <= 1 {
        jobs.iter().map(|&(v, s)| run_variant(v, eval_cfg, ds, s)).collect()
    } else {
        let chunk = jobs.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || part.iter().map(|&(v, s)| run_variant(v, eval_cfg, ds, s)).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("ablation worker panicked")).collect()
        })
    };
    results.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationSummary {
    pub variant: String,
    pub runs: usize,
    pub cdal_params: usize,
    pub known_acc: f64,
    pub novel_acc: f64,
    pub novel_nmi: f64,
    pub novel_ari: f64,
    pub novel_ari_std: f64,
    pub novel_purity: f64,
    pub auc: f64,
    pub oscr: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Per-variant means over seeds, in first-seen variant order.
pub fn summarize(runs: &[AblationRun]) -> Vec<AblationSummary> {
    let mut labels: Vec<&str> = Vec::new();
    for r in runs {
        if !labels.contains(&r.variant.as_str()) {
            labels.push(&r.variant);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let rs: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == label).collect();
            let col = |f: fn(&EvalReport) -> f64| mean(&rs.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
            let aris: Vec<f64> = rs.iter().map(|r| r.report.novel_ari).collect();
            AblationSummary {
                variant: label.to_string(),
                runs: rs.len(),
                cdal_params: rs[0].params.cdal,
                known_acc: col(|r| r.known_acc),
                novel_acc: col(|r| r.novel_acc),
                novel_nmi: col(|r| r.novel_nmi),
                novel_ari: mean(&aris),
                novel_ari_std: std_dev(&aris),
                novel_purity: col(|r| r.novel_purity),
                auc: col(|r| r.auc),
                oscr: col(|r| r.oscr),
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: &str =
    "variant,runs,cdal_params,known_acc,novel_acc,novel_nmi,novel_ari,novel_ari_std,novel_purity,auc,oscr";

pub fn summary_csv(rows: &[AblationSummary]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.runs,
            r.cdal_params,
            r.known_acc,
            r.novel_acc,
            r.novel_nmi,
            r.novel_ari,
            r.novel_ari_std,
            r.novel_purity,
            r.auc,
            r.oscr
        ));
    }
    out
}

pub fn runs_csv(runs: &[AblationRun]) -> String {
    let mut out = format!("variant,cdal_params,final_l_original,{}\n", EvalReport::csv_header());
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.variant,
            r.params.cdal,
            r.final_l_original,
            r.report.csv_row()
        ));
    }
    out
}

/// 8-bit binary PGM of a single `[H,W]` plane, min-max normalized; a constant plane maps to 0.
pub fn pgm_bytes(plane: &[f64], h: usize, w: usize) -> Vec<u8> {
    let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

/// Unlabeled samples taken round-robin over generators (known then novel), `k` in total.
pub fn export_selection(ds: &Dataset, k: usize) -> Vec<usize> {
    let gens: Vec<usize> = ds
        .manifest
        .known_generators
        .iter()
        .chain(&ds.manifest.novel_generators)
        .copied()
        .collect();
    let per_gen: Vec<Vec<usize>> = gens
        .iter()
        .map(|&g| {
            ds.samples
                .iter()
                .enumerate()
                .filter(|(_, s)| !s.labeled && s.gen_id == g)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let mut picked = Vec::new();
    let deepest = per_gen.iter().map(Vec::len).max().unwrap_or(0);
    'outer: for round in 0..deepest {
        for list in &per_gen {
            if picked.len() == k {
                break 'outer;
            }
            if let Some(&i) = list.get(round) {
                picked.push(i);
            }
        }
    }
    picked
}

pub const EXPORT_INDEX_HEADER: &str = "sample_index,gen_id,identity_id,kind,map,tensor,image";

/// Writes every attention map of `k` samples as CDT1 plus PGM under `dir`, and an
/// index CSV; returns the index path.
pub fn export_attention(model: &Model, ds: &Dataset, k: usize, seed: u64, dir: &Path) -> Result<PathBuf> {
    if !model.config.uses_attention() {
        return Err(CdalError::Config("checkpoint was trained without attention; nothing to export".into()));
    }
    if k == 0 {
        return Err(CdalError::Config("--samples must be positive".into()));
    }
    fs::create_dir_all(dir)?;
    let mut index = format!("{EXPORT_INDEX_HEADER}\n");
    for idx in export_selection(ds, k) {
        let sample = &ds.samples[idx];
        let mut r = rng::indexed(seed, "export.counterfactual", idx as u64);
        let maps = model
            .attention_maps(&sample.image, &mut r)?
            .ok_or_else(|| CdalError::Config("model produced no attention maps".into()))?;
        let kinds = [("factual", Some(&maps.factual)), ("counterfactual", maps.counterfactual.as_ref())];
        for (kind, t) in kinds {
            let Some(t) = t else { continue };
            let (m, h, w) = t.chw("export_attention")?;
            for i in 0..m {
                let stem = format!("s{idx:05}_g{}_{kind}_{i}", sample.gen_id);
                let plane = Tensor::new(vec![h, w], t.channel(i).to_vec())?;
                let mut blob = Vec::new();
                write_tensor(&mut blob, &plane)?;
                fs::write(dir.join(format!("{stem}.cdt")), blob)?;
                fs::write(dir.join(format!("{stem}.pgm")), pgm_bytes(plane.data(), h, w))?;
                index.push_str(&format!(
                    "{idx},{},{},{kind},{i},{stem}.cdt,{stem}.pgm\n",
                    sample.gen_id, sample.identity_id
                ));
            }
        }
    }
    let path = dir.join("index.csv");
    fs::write(&path, index)?;
    Ok(path)
}
