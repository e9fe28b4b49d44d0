//! Seeded synthetic open-world attribution benchmark.
//!
//! Every image is a smooth "source" content field, shared by all generators for a
//! given identity, plus a faint masked sinusoid that is the generator's
//! fingerprint. Identity content dominates raw-pixel distances, so a model that
//! pools everything clusters by identity rather than by generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CdalError, Result};
use crate::rng::{self, Rng};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const CHANNELS: usize = 3;
/// Unit pixel range; fingerprints stay at or below 0.3 of it.
pub const MAX_AMPLITUDE: f64 = 0.3;
const CONTENT_TERMS: usize = 4;
const CONTENT_AMPLITUDE: f64 = 0.1;
const NUISANCE_TERMS: usize = 6;
const NUISANCE_AMPLITUDE: f64 = 0.06;
const NUISANCE_BRIGHTNESS: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactMask {
    /// One image quadrant, numbered row-major from the top-left.
    Quadrant(u8),
    Full,
    /// A band of width `min(H,W)/5` along every edge.
    Border,
}

impl ArtifactMask {
    pub fn contains(&self, y: usize, x: usize, h: usize, w: usize) -> bool {
        match *self {
            ArtifactMask::Full => true,
            ArtifactMask::Quadrant(q) => {
                let top = y < h / 2;
                let left = x < w / 2;
                match q % 4 {
                    0 => top && left,
                    1 => top && !left,
                    2 => !top && left,
                    _ => !top && !left,
                }
            }
            ArtifactMask::Border => {
                let b = (h.min(w) / 5).max(1);
                y < b || x < b || y + b >= h || x + b >= w
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub gen_id: usize,
    pub pattern_freq: (u32, u32),
    pub amplitude: f64,
    pub mask: ArtifactMask,
    pub phase_seed: u64,
}

impl GeneratorSpec {
    /// Fingerprint of generator `gen_id` for a dataset seeded with `seed`.
    pub fn standard(gen_id: usize, seed: u64) -> Self {
        const TABLE: [((u32, u32), f64, ArtifactMask); 8] = [
            ((7, 0), 0.03, ArtifactMask::Full),
            ((0, 7), 0.03, ArtifactMask::Full),
            ((5, 3), 0.05, ArtifactMask::Quadrant(0)),
            ((11, 3), 0.04, ArtifactMask::Border),
            ((3, 11), 0.04, ArtifactMask::Border),
            ((9, 2), 0.05, ArtifactMask::Quadrant(3)),
            ((2, 9), 0.03, ArtifactMask::Full),
            ((7, 7), 0.05, ArtifactMask::Quadrant(1)),
        ];
        let (pattern_freq, amplitude, mask) = match TABLE.get(gen_id) {
            Some(&row) => row,
            None => {
                let k = gen_id as u32;
                let mask = match gen_id % 3 {
                    0 => ArtifactMask::Full,
                    1 => ArtifactMask::Border,
                    _ => ArtifactMask::Quadrant((gen_id % 4) as u8),
                };
                ((3 + (k * 3) % 11, 1 + (k * 5) % 11), 0.04, mask)
            }
        };
        GeneratorSpec {
            gen_id,
            pattern_freq,
            amplitude,
            mask,
            phase_seed: rng::derive_seed(seed, "generator.phase", gen_id as u64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0 && self.amplitude <= MAX_AMPLITUDE) {
            return Err(CdalError::Config(format!(
                "generator {}: amplitude {} outside (0, {MAX_AMPLITUDE}]",
                self.gen_id, self.amplitude
            )));
        }
        Ok(())
    }

    pub fn phase(&self) -> f64 {
        2.0 * PI * (self.phase_seed >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Unmasked fingerprint value `sin(2π(fx·x/W + fy·y/H) + φ)` at a pixel.
    pub fn pattern(&self, y: usize, x: usize, h: usize, w: usize) -> f64 {
        let (fx, fy) = self.pattern_freq;
        (2.0 * PI * (fx as f64 * x as f64 / w as f64 + fy as f64 * y as f64 / h as f64) + self.phase()).sin()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentTerm {
    pub freq: (f64, f64),
    pub amplitude: [f64; CHANNELS],
    pub phase: f64,
}

/// Low-frequency content shared by every image of one source identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub identity_id: usize,
    pub base: [f64; CHANNELS],
    pub terms: Vec<ContentTerm>,
}

impl SourceSpec {
    pub fn standard(identity_id: usize, seed: u64) -> Self {
        let mut r = rng::indexed(seed, "source", identity_id as u64);
        let base = [0; CHANNELS].map(|_| r.random_range(0.3..0.7));
        let terms = random_terms(&mut r, CONTENT_TERMS, CONTENT_AMPLITUDE);
        SourceSpec {
            identity_id,
            base,
            terms,
        }
    }
}

fn random_terms(r: &mut Rng, n: usize, amplitude: f64) -> Vec<ContentTerm> {
    (0..n)
        .map(|_| ContentTerm {
            freq: (r.random_range(-1.5..1.5), r.random_range(-1.5..1.5)),
            amplitude: [0; CHANNELS].map(|_| r.random_range(-amplitude..amplitude)),
            phase: r.random_range(0.0..2.0 * PI),
        })
        .collect()
}

/// Per-image nuisance: a sub-pixel content shift, a brightness offset and a
/// faint smooth field of its own.
#[derive(Clone, Debug, PartialEq)]
pub struct Nuisance {
    pub shift: (f64, f64),
    pub brightness: f64,
    pub terms: Vec<ContentTerm>,
}

impl Nuisance {
    pub fn draw(rng: &mut Rng) -> Self {
        Nuisance {
            shift: (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)),
            brightness: Normal::new(0.0, NUISANCE_BRIGHTNESS).expect("std").sample(rng),
            terms: random_terms(rng, NUISANCE_TERMS, NUISANCE_AMPLITUDE),
        }
    }
}

fn field(terms: &[ContentTerm], c: usize, u: f64, v: f64) -> f64 {
    terms
        .iter()
        .map(|t| t.amplitude[c] * (2.0 * PI * (t.freq.0 * u + t.freq.1 * v) + t.phase).cos())
        .sum()
}

/// Content field for `source` at one nuisance draw taken from `rng`.
pub fn render_content(source: &SourceSpec, h: usize, w: usize, rng: &mut Rng) -> Tensor {
    let nz = Nuisance::draw(rng);
    let mut data = vec![0.0; CHANNELS * h * w];
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                let (su, sv) = (u + nz.shift.0 / w as f64, v + nz.shift.1 / h as f64);
                data[(c * h + y) * w + x] =
                    source.base[c] + nz.brightness + field(&source.terms, c, su, sv) + field(&nz.terms, c, u, v);
            }
        }
    }
    Tensor::new(vec![CHANNELS, h, w], data).expect("shape")
}

/// One forged image: content + masked fingerprint + sensor noise, clipped to `[0,1]`.
pub fn synthesize(source: &SourceSpec, gen: &GeneratorSpec, h: usize, w: usize, sensor_sigma: f64, rng: &mut Rng) -> Tensor {
    let mut img = render_content(source, h, w, rng);
    let noise = Normal::new(0.0, sensor_sigma.max(0.0)).expect("std");
    let plane = h * w;
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        let (y, x) = ((i % plane) / w, i % w);
        if gen.mask.contains(y, x, h, w) {
            *v += gen.amplitude * gen.pattern(y, x, h, w);
        }
        if sensor_sigma > 0.0 {
            *v += noise.sample(rng);
        }
        *v = v.clamp(0.0, 1.0);
    }
    img
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub known_generators: Vec<usize>,
    pub novel_generators: Vec<usize>,
    pub samples_per_class: usize,
    pub identities: usize,
    pub sensor_noise: f64,
    /// Multiplies every generator's fingerprint amplitude.
    pub artifact_scale: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            height: 32,
            width: 32,
            known_generators: vec![0, 1, 2, 3],
            novel_generators: vec![4, 5, 6, 7],
            samples_per_class: 200,
            identities: 32,
            sensor_noise: 0.01,
            artifact_scale: 1.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(CdalError::Config(format!(
                "image size {}x{} must be a positive multiple of 4",
                self.height, self.width
            )));
        }
        if self.known_generators.is_empty() || self.novel_generators.is_empty() {
            return Err(CdalError::Config("need at least one known and one novel generator".into()));
        }
        if self.samples_per_class == 0 || self.identities == 0 {
            return Err(CdalError::Config("samples_per_class and identities must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &g in self.known_generators.iter().chain(&self.novel_generators) {
            if !seen.insert(g) {
                return Err(CdalError::Config(format!("generator id {g} listed more than once")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: Tensor,
    pub gen_id: usize,
    pub identity_id: usize,
    pub labeled: bool,
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub known_generators: Vec<usize>,
    pub novel_generators: Vec<usize>,
    pub identities: usize,
    pub samples_per_class: usize,
    /// Sample count per generator id.
    pub counts: BTreeMap<String, usize>,
    pub labeled: usize,
    pub unlabeled: usize,
    /// Byte offset of every sample's CDT1 blob inside `images.bin`.
    pub offsets: Vec<u64>,
    pub generators: Vec<GeneratorSpec>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SyntheticSample>,
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let sources: Vec<SourceSpec> = (0..cfg.identities).map(|i| SourceSpec::standard(i, cfg.seed)).collect();
    let specs: Vec<GeneratorSpec> = cfg
        .known_generators
        .iter()
        .chain(&cfg.novel_generators)
        .map(|&g| {
            let mut spec = GeneratorSpec::standard(g, cfg.seed);
            spec.amplitude *= cfg.artifact_scale;
            spec
        })
        .collect();
    for g in &specs {
        g.validate()?;
    }

    let mut plan: Vec<(usize, bool)> = Vec::new();
    for &g in &cfg.known_generators {
        plan.extend(std::iter::repeat_n((g, true), cfg.samples_per_class));
    }
    for &g in &cfg.known_generators {
        plan.extend(std::iter::repeat_n((g, false), cfg.samples_per_class));
    }
    for &g in &cfg.novel_generators {
        plan.extend(std::iter::repeat_n((g, false), cfg.samples_per_class));
    }

    let mut samples = Vec::with_capacity(plan.len());
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_class_index: BTreeMap<usize, usize> = BTreeMap::new();
    for (idx, &(gen_id, labeled)) in plan.iter().enumerate() {
        let spec = specs.iter().find(|s| s.gen_id == gen_id).expect("planned generator");
        let k = per_class_index.entry(gen_id).or_default();
        // round-robin so every identity appears under every generator
        let identity_id = (*k + gen_id) % cfg.identities;
        *k += 1;
        let mut r = rng::indexed(cfg.seed, "sample", idx as u64);
        let image = synthesize(&sources[identity_id], spec, cfg.height, cfg.width, cfg.sensor_noise, &mut r);
        *counts.entry(gen_id.to_string()).or_default() += 1;
        samples.push(SyntheticSample {
            image,
            gen_id,
            identity_id,
            labeled,
        });
    }
    let blob = (8 + 4 * 3 + 8 * CHANNELS * cfg.height * cfg.width) as u64;
    let labeled = samples.iter().filter(|s| s.labeled).count();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed: cfg.seed,
        height: cfg.height,
        width: cfg.width,
        channels: CHANNELS,
        known_generators: cfg.known_generators.clone(),
        novel_generators: cfg.novel_generators.clone(),
        identities: cfg.identities,
        samples_per_class: cfg.samples_per_class,
        counts,
        labeled,
        unlabeled: samples.len() - labeled,
        offsets: (0..samples.len() as u64).map(|i| i * blob).collect(),
        generators: specs,
    };
    Ok(Dataset { manifest, samples })
}

impl Dataset {
    pub fn labeled(&self) -> impl Iterator<Item = &SyntheticSample> {
        self.samples.iter().filter(|s| s.labeled)
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &SyntheticSample> {
        self.samples.iter().filter(|s| !s.labeled)
    }

    /// Position of `gen_id` among the known generators.
    pub fn known_index(&self, gen_id: usize) -> Option<usize> {
        self.manifest.known_generators.iter().position(|&g| g == gen_id)
    }

    pub fn novel_index(&self, gen_id: usize) -> Option<usize> {
        self.manifest.novel_generators.iter().position(|&g| g == gen_id)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut images = BufWriter::new(fs::File::create(dir.join("images.bin"))?);
        for s in &self.samples {
            write_tensor(&mut images, &s.image)?;
        }
        images.flush()?;
        let mut labels = BufWriter::new(fs::File::create(dir.join("labels.csv"))?);
        writeln!(labels, "sample_index,gen_id,identity_id,labeled")?;
        for (i, s) in self.samples.iter().enumerate() {
            writeln!(labels, "{i},{},{},{}", s.gen_id, s.identity_id, u8::from(s.labeled))?;
        }
        labels.flush()?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let data_err = |msg: String| CdalError::Data(format!("{}: {msg}", dir.display()));
        let manifest: DatasetManifest = serde_json::from_slice(
            &fs::read(dir.join("manifest.json")).map_err(|e| data_err(format!("manifest.json: {e}")))?,
        )
        .map_err(|e| data_err(format!("manifest.json: {e}")))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(data_err(format!("unsupported manifest version {}", manifest.version)));
        }
        let bytes = fs::read(dir.join("images.bin")).map_err(|e| data_err(format!("images.bin: {e}")))?;
        let labels = fs::read_to_string(dir.join("labels.csv")).map_err(|e| data_err(format!("labels.csv: {e}")))?;
        let mut lines = labels.lines();
        if lines.next() != Some("sample_index,gen_id,identity_id,labeled") {
            return Err(data_err("labels.csv header mismatch".into()));
        }
        let mut samples = Vec::with_capacity(manifest.offsets.len());
        for (row, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            let parse = |i: usize| -> Result<usize> {
                fields
                    .get(i)
                    .and_then(|f| f.trim().parse().ok())
                    .ok_or_else(|| data_err(format!("labels.csv row {row}: bad field {i}")))
            };
            if fields.len() != 4 || parse(0)? != row {
                return Err(data_err(format!("labels.csv row {row} malformed")));
            }
            let offset = *manifest
                .offsets
                .get(row)
                .ok_or_else(|| data_err(format!("no offset for sample {row}")))? as usize;
            let mut slice = bytes.get(offset..).ok_or_else(|| data_err(format!("offset {offset} past end")))?;
            let image = read_tensor(&mut slice)?;
            if image.shape() != [manifest.channels, manifest.height, manifest.width] {
                return Err(data_err(format!("sample {row} has shape {:?}", image.shape())));
            }
            samples.push(SyntheticSample {
                image,
                gen_id: parse(1)?,
                identity_id: parse(2)?,
                labeled: parse(3)? == 1,
            });
        }
        if samples.len() != manifest.offsets.len() || samples.len() != manifest.labeled + manifest.unlabeled {
            return Err(data_err(format!(
                "manifest lists {} samples, labels.csv has {}",
                manifest.offsets.len(),
                samples.len()
            )));
        }
        let labeled = samples.iter().filter(|s| s.labeled).count();
        if labeled != manifest.labeled {
            return Err(data_err(format!("manifest says {} labeled, found {labeled}", manifest.labeled)));
        }
        if samples.iter().any(|s| s.labeled && !manifest.known_generators.contains(&s.gen_id)) {
            return Err(data_err("labeled sample from a non-known generator".into()));
        }
        Ok(Dataset { manifest, samples })
    }
}

fn sq_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NearestNeighbourProbe {
    pub identity_accuracy: f64,
    pub generator_accuracy: f64,
}

/// Raw-pixel 1-NN: `n_probe` samples drawn with `seed`, neighbours searched over
/// the rest of the dataset.
pub fn nearest_neighbour_probe(ds: &Dataset, n_probe: usize, seed: u64) -> NearestNeighbourProbe {
    let mut r = rng::stream(seed, "probe");
    let n = ds.samples.len();
    let mut idx: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut r);
    let probes = &idx[..n_probe.min(n)];
    let (mut id_hits, mut gen_hits) = (0usize, 0usize);
    for &p in probes {
        let q = &ds.samples[p];
        let nn = (0..n)
            .filter(|&j| j != p)
            .min_by(|&a, &b| {
                sq_dist(&q.image, &ds.samples[a].image).total_cmp(&sq_dist(&q.image, &ds.samples[b].image))
            })
            .expect("dataset has more than one sample");
        id_hits += usize::from(ds.samples[nn].identity_id == q.identity_id);
        gen_hits += usize::from(ds.samples[nn].gen_id == q.gen_id);
    }
    let k = probes.len() as f64;
    NearestNeighbourProbe {
        identity_accuracy: id_hits as f64 / k,
        generator_accuracy: gen_hits as f64 / k,
    }
}

/// Fraction of random (anchor, same-identity/other-generator, other-identity/same-generator)
/// triplets where the same-identity image is closer in raw pixels.
pub fn identity_confounding_rate(ds: &Dataset, triplets: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "triplets");
    let n = ds.samples.len();
    let mut hits = 0usize;
    let mut done = 0usize;
    let mut attempts = 0usize;
    while done < triplets && attempts < triplets * 1000 {
        attempts += 1;
        let a = &ds.samples[r.random_range(0..n)];
        let p = &ds.samples[r.random_range(0..n)];
        let q = &ds.samples[r.random_range(0..n)];
        if p.identity_id != a.identity_id || p.gen_id == a.gen_id {
            continue;
        }
        if q.identity_id == a.identity_id || q.gen_id != a.gen_id {
            continue;
        }
        done += 1;
        hits += usize::from(sq_dist(&a.image, &p.image) < sq_dist(&a.image, &q.image));
    }
    hits as f64 / done.max(1) as f64
}
