//! Feature files, dataset manifests, prompt/target templates for the three
//! emotion views, the synthetic dataset generator, folds, and shot sampling.
//!
//! # Templates
//!
//! | view        | prompt                        | target                              |
//! |-------------|-------------------------------|-------------------------------------|
//! | categorical | `This person is`              | `feeling emotion of {class}`        |
//! | sentiment   | `This sentiment is`           | `{positive\|neutral\|negative}`     |
//! | dimensional | `Describe emotion parameters` | `valence {low\|mid\|high} arousal {low\|mid\|high}` |
//!
//! Categorical → sentiment / dimensional mapping:
//!
//! | class     | sentiment | valence | arousal |
//! |-----------|-----------|---------|---------|
//! | neutral   | neutral   | mid     | mid     |
//! | calm      | neutral   | mid     | low     |
//! | happy     | positive  | high    | high    |
//! | surprised | positive  | high    | high    |
//! | sad       | negative  | low     | low     |
//! | angry     | negative  | low     | high    |
//! | fearful   | negative  | low     | high    |
//! | disgusted | negative  | low     | mid     |
//!
//! The manifest `label` is the view-specific label: the class name, the
//! sentiment word, or `valence X arousal Y`. [`parse_target`] inverts each
//! target template back to that label.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CATEGORICAL_PROMPT: &str = "This person is";
pub const SENTIMENT_PROMPT: &str = "This sentiment is";
pub const DIMENSIONAL_PROMPT: &str = "Describe emotion parameters";
const CATEGORICAL_PREFIX: &str = "feeling emotion of ";

/// Emotion words known to the templates, in a fixed order.
pub const EMOTIONS: [&str; 8] = [
    "neutral", "calm", "happy", "sad", "angry", "fearful", "disgusted", "surprised",
];
pub const SENTIMENTS: [&str; 3] = ["positive", "neutral", "negative"];
pub const LEVELS: [&str; 3] = ["low", "mid", "high"];

/// Six-class set used by the default synthetic benchmark.
pub fn six_classes() -> Vec<String> {
    ["angry", "disgusted", "fearful", "happy", "neutral", "sad"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Categorical,
    Sentiment,
    Dimensional,
}

impl View {
    pub const ALL: [View; 3] = [View::Categorical, View::Sentiment, View::Dimensional];

    pub fn prompt(self) -> &'static str {
        match self {
            View::Categorical => CATEGORICAL_PROMPT,
            View::Sentiment => SENTIMENT_PROMPT,
            View::Dimensional => DIMENSIONAL_PROMPT,
        }
    }

    fn name(self) -> &'static str {
        match self {
            View::Categorical => "categorical",
            View::Sentiment => "sentiment",
            View::Dimensional => "dimensional",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn sentiment_of(class: &str) -> Option<&'static str> {
    Some(match class {
        "neutral" | "calm" => "neutral",
        "happy" | "surprised" => "positive",
        "sad" | "angry" | "fearful" | "disgusted" => "negative",
        _ => return None,
    })
}

pub fn dimensions_of(class: &str) -> Option<(&'static str, &'static str)> {
    Some(match class {
        "neutral" => ("mid", "mid"),
        "calm" => ("mid", "low"),
        "happy" | "surprised" => ("high", "high"),
        "sad" => ("low", "low"),
        "angry" | "fearful" => ("low", "high"),
        "disgusted" => ("low", "mid"),
        _ => return None,
    })
}

/// View-specific label for a categorical class.
pub fn label_for(view: View, class: &str) -> Result<String> {
    let unknown = || Error::Config(format!("no {view} mapping for class {class:?}"));
    Ok(match view {
        View::Categorical => class.to_string(),
        View::Sentiment => sentiment_of(class).ok_or_else(unknown)?.to_string(),
        View::Dimensional => {
            let (v, a) = dimensions_of(class).ok_or_else(unknown)?;
            format!("valence {v} arousal {a}")
        }
    })
}

pub fn target_for(view: View, class: &str) -> Result<String> {
    let label = label_for(view, class)?;
    Ok(match view {
        View::Categorical => format!("{CATEGORICAL_PREFIX}{label}"),
        View::Sentiment | View::Dimensional => label,
    })
}

/// Inverse of the target templates: returns the label, or `None` when `text`
/// is not a well-formed target of `view`.
pub fn parse_target(view: View, text: &str) -> Option<String> {
    match view {
        View::Categorical => {
            let label = text.strip_prefix(CATEGORICAL_PREFIX)?;
            let ok = !label.is_empty() && label.bytes().all(|b| b.is_ascii_lowercase() || b == b'-');
            ok.then(|| label.to_string())
        }
        View::Sentiment => SENTIMENTS.contains(&text).then(|| text.to_string()),
        View::Dimensional => {
            let rest = text.strip_prefix("valence ")?;
            let (v, a) = rest.split_once(" arousal ")?;
            (LEVELS.contains(&v) && LEVELS.contains(&a)).then(|| text.to_string())
        }
    }
}

/// Lines for pretraining the language model, built from the same templates
/// as the dataset targets. Deterministic; contains every word in `extra_classes`.
pub fn lm_corpus(extra_classes: &[String]) -> Vec<String> {
    const SUBJECTS: [&str; 8] = [
        "this person is",
        "the speaker is",
        "this speaker is",
        "the caller is",
        "this voice is",
        "he is",
        "she is",
        "they are",
    ];
    let mut emotions: Vec<String> = EMOTIONS.iter().map(|s| s.to_string()).collect();
    for c in extra_classes {
        if !emotions.contains(c) {
            emotions.push(c.clone());
        }
    }
    let mut lines = Vec::new();
    for e in &emotions {
        for s in SUBJECTS {
            lines.push(format!("{s} {CATEGORICAL_PREFIX}{e}"));
        }
        lines.push(format!("{CATEGORICAL_PREFIX}{e}"));
        lines.push(e.clone());
        if let Some(s) = sentiment_of(e) {
            lines.push(format!("{e} is a {s} emotion"));
        }
    }
    for s in SENTIMENTS {
        lines.push(format!("this sentiment is {s}"));
        lines.push(s.to_string());
    }
    for v in LEVELS {
        for a in LEVELS {
            lines.push(format!("describe emotion parameters valence {v} arousal {a}"));
            lines.push(format!("valence {v} arousal {a}"));
        }
    }
    lines
}

// ---------------------------------------------------------------------------
// Feature files

pub const FEATURE_MAGIC: &[u8; 8] = b"SELMFEAT";
pub const FEATURE_VERSION: u32 = 1;
/// Bytes after the magic and before the payload: version, frames, dim, checksum.
pub const FEATURE_HEADER_LEN: usize = 16;

/// A frames × dim acoustic feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeature(Tensor);

impl AudioFeature {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Input("audio features need at least one frame and one dimension".into()));
        }
        let t = Tensor::new(vec![frames, dim], data)?;
        if !t.is_finite() {
            return Err(Error::InvalidValue("audio feature contains NaN or Inf".into()));
        }
        Ok(AudioFeature(t))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.0.data()[i * d..(i + 1) * d]
    }

    pub fn mean_frame(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for i in 0..self.frames() {
            for (a, &b) in m.iter_mut().zip(self.row(i)) {
                *a += b as f64;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.frames() as f64);
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: Vec<u8> = self.0.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let mut out = Vec::with_capacity(8 + FEATURE_HEADER_LEN + payload.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&checksum(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let head = 8 + FEATURE_HEADER_LEN;
        if bytes.len() < head {
            return Err(Error::format(bytes.len(), format!("truncated header: {} of {head} bytes", bytes.len())));
        }
        if &bytes[..8] != FEATURE_MAGIC {
            return Err(Error::format(0, "bad feature magic"));
        }
        let u = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = u(8);
        if version != FEATURE_VERSION {
            return Err(Error::format(8, format!("unsupported feature version {version}")));
        }
        let (frames, dim, sum) = (u(12) as usize, u(16) as usize, u(20));
        let expected = frames
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(head))
            .ok_or_else(|| Error::format(12, "frame/dim product overflows"))?;
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len().min(expected),
                format!("expected {expected} bytes for {frames}×{dim}, found {}", bytes.len()),
            ));
        }
        let payload = &bytes[head..];
        if checksum(payload) != sum {
            return Err(Error::format(20, "payload checksum mismatch"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        AudioFeature::new(frames, dim, data).map_err(|e| Error::format(head, e.to_string()))
    }
}

fn checksum(payload: &[u8]) -> u32 {
    let h = sha256(payload);
    u32::from_le_bytes([h[0], h[1], h[2], h[3]])
}

pub fn write_feature(path: &Path, feature: &AudioFeature) -> Result<()> {
    std::fs::write(path, feature.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_feature(path: &Path) -> Result<AudioFeature> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    AudioFeature::from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub feature_path: String,
    pub prompt: String,
    pub target: String,
    pub view: View,
    pub label: String,
    pub fold: u32,
    pub split: Split,
}

/// One training or evaluation example; `feature_ref` is resolved against the
/// manifest directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub id: String,
    pub feature_ref: PathBuf,
    pub prompt: String,
    pub target: String,
    pub view: View,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory feature paths are relative to.
    pub base_dir: PathBuf,
    pub n_folds: u32,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: PathBuf, n_folds: u32) -> Result<Self> {
        let m = DatasetManifest {
            records,
            base_dir,
            n_folds,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate manifest id {}", r.id)));
            }
            if r.fold >= self.n_folds.max(1) {
                return Err(Error::Data(format!("record {} has fold {} ≥ {}", r.id, r.fold, self.n_folds)));
            }
            if r.target.is_empty() {
                return Err(Error::Data(format!("record {} has an empty target", r.id)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// Parses JSON lines; `n_folds` is one more than the largest fold seen.
    pub fn from_jsonl(text: &str, base_dir: PathBuf) -> Result<Self> {
        let mut records = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.trim_end_matches('\n');
            if !body.trim().is_empty() {
                let r: ManifestRecord = serde_json::from_str(body)
                    .map_err(|e| Error::format(offset, format!("bad manifest record: {e}")))?;
                records.push(r);
            }
            offset += line.len();
        }
        let n_folds = records.iter().map(|r| r.fold + 1).max().unwrap_or(1);
        Self::new(records, base_dir, n_folds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_jsonl(&text, base)
    }

    pub fn resolve(&self, r: &ManifestRecord) -> PathBuf {
        self.base_dir.join(&r.feature_path)
    }

    pub fn triplet(&self, r: &ManifestRecord) -> Triplet {
        Triplet {
            id: r.id.clone(),
            feature_ref: self.resolve(r),
            prompt: r.prompt.clone(),
            target: r.target.clone(),
            view: r.view,
            label: r.label.clone(),
        }
    }

    pub fn triplets<'a>(&'a self, keep: impl Fn(&ManifestRecord) -> bool + 'a) -> Vec<Triplet> {
        self.records.iter().filter(|r| keep(r)).map(|r| self.triplet(r)).collect()
    }

    /// Distinct labels of `view` records, in first-appearance order.
    pub fn classes(&self, view: View) -> Vec<String> {
        let mut seen = Vec::new();
        for r in self.records.iter().filter(|r| r.view == view) {
            if !seen.contains(&r.label) {
                seen.push(r.label.clone());
            }
        }
        seen
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.id.as_str()).collect()
    }
}

/// Stratified fold assignment. Records sharing a feature file form one example
/// and always land in the same fold; examples are stratified by the label of
/// their first record.
pub fn make_folds(manifest: &DatasetManifest, n_folds: u32, seed: u64) -> Result<DatasetManifest> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    let mut example_class: BTreeMap<&str, &str> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for r in &manifest.records {
        if !example_class.contains_key(r.feature_path.as_str()) {
            example_class.insert(&r.feature_path, &r.label);
            order.push(&r.feature_path);
        }
    }
    let mut by_class: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for ex in &order {
        by_class.entry(example_class[ex]).or_default().push(ex);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of: BTreeMap<&str, u32> = BTreeMap::new();
    // Rotating the starting fold per class keeps overall fold sizes balanced too.
    let mut next_start = 0u32;
    for (class, examples) in &mut by_class {
        if examples.len() < n_folds as usize {
            return Err(Error::Data(format!(
                "class {class:?} has {} examples, fewer than {n_folds} folds",
                examples.len()
            )));
        }
        examples.shuffle(&mut rng);
        for (i, ex) in examples.iter().enumerate() {
            fold_of.insert(ex, (next_start + i as u32) % n_folds);
        }
        next_start = (next_start + examples.len() as u32) % n_folds;
    }
    let records = manifest
        .records
        .iter()
        .map(|r| ManifestRecord {
            fold: fold_of[r.feature_path.as_str()],
            ..r.clone()
        })
        .collect();
    DatasetManifest::new(records, manifest.base_dir.clone(), n_folds)
}

/// `n_per_class` train-split records of `view` per label, drawn uniformly
/// without replacement. Classes come out in first-appearance order.
pub fn sample_shots(manifest: &DatasetManifest, view: View, n_per_class: usize, seed: u64) -> Result<Vec<Triplet>> {
    let mut by_class: Vec<(String, Vec<&ManifestRecord>)> = Vec::new();
    for r in manifest.records.iter().filter(|r| r.view == view && r.split == Split::Train) {
        match by_class.iter_mut().find(|(c, _)| *c == r.label) {
            Some((_, v)) => v.push(r),
            None => by_class.push((r.label.clone(), vec![r])),
        }
    }
    for class in manifest.classes(view) {
        if !by_class.iter().any(|(c, _)| *c == class) {
            by_class.push((class, Vec::new()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (class, records) in &by_class {
        if records.len() < n_per_class {
            return Err(Error::Data(format!(
                "class {class:?} has {} train examples, need {n_per_class}",
                records.len()
            )));
        }
        let picked = rand::seq::index::sample(&mut rng, records.len(), n_per_class);
        let mut idx = picked.into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| manifest.triplet(records[i])));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic generator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: Vec<String>,
    pub d_a: usize,
    /// Explicit per-class means; generated from `geometry_seed` when absent.
    pub class_means: Option<Vec<Vec<f32>>>,
    /// Pairwise distance between generated class means, in units of `sigma`.
    pub mean_separation: f64,
    pub sigma: f64,
    pub frames_min: usize,
    pub frames_max: usize,
    pub per_class: usize,
    /// Domain shift δ, in units of `sigma`, along a seeded unit direction.
    pub shift: f64,
    pub geometry_seed: u64,
    pub shift_seed: u64,
    pub seed: u64,
    pub views: Vec<View>,
    pub test_fraction: f64,
    pub n_folds: u32,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: six_classes(),
            d_a: 32,
            class_means: None,
            mean_separation: 7.0,
            sigma: 1.0,
            frames_min: 8,
            frames_max: 24,
            per_class: 20,
            shift: 0.0,
            geometry_seed: 1234,
            shift_seed: 4321,
            seed: 0,
            views: vec![View::Categorical],
            test_fraction: 0.3,
            n_folds: 5,
            id_prefix: "syn".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let unique: HashSet<&String> = self.classes.iter().collect();
        if unique.len() != self.classes.len() {
            return Err(Error::Config("class names must be unique".into()));
        }
        if !(self.sigma > 0.0) || !(self.shift >= 0.0) {
            return Err(Error::Config("need sigma > 0 and shift ≥ 0".into()));
        }
        if self.d_a == 0 || self.frames_min == 0 || self.frames_min > self.frames_max || self.per_class == 0 {
            return Err(Error::Config("invalid feature size, frame range, or per-class count".into()));
        }
        if self.views.is_empty() {
            return Err(Error::Config("need at least one view".into()));
        }
        if let Some(means) = &self.class_means {
            if means.len() != self.classes.len() || means.iter().any(|m| m.len() != self.d_a) {
                return Err(Error::Config("class_means must be classes × d_a".into()));
            }
        }
        Ok(())
    }

    /// Class mean vectors: explicit, or `mean_separation·σ/√2` times seeded
    /// orthonormal directions (so every pair is `mean_separation·σ` apart).
    pub fn means(&self) -> Vec<Vec<f64>> {
        if let Some(m) = &self.class_means {
            return m.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.geometry_seed);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < self.classes.len() {
            let mut v: Vec<f64> = (0..self.d_a).map(|_| StandardNormal.sample(&mut rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                // more classes than dimensions: fall back to non-orthogonal random directions
                let mut w: Vec<f64> = (0..self.d_a).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                w.iter_mut().for_each(|x| *x /= n);
                basis.push(w);
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
        let scale = self.mean_separation * self.sigma / std::f64::consts::SQRT_2;
        basis
            .into_iter()
            .map(|b| b.into_iter().map(|x| x * scale).collect())
            .collect()
    }

    /// Seeded unit vector in the span of the class means, so the shift moves
    /// examples along directions the classes are separated by.
    pub fn shift_direction(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.shift_seed);
        let mut v = vec![0.0; self.d_a];
        for m in self.means() {
            let z: f64 = StandardNormal.sample(&mut rng);
            v.iter_mut().zip(&m).for_each(|(a, b)| *a += z * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            v[0] = 1.0;
            return v;
        }
        v.into_iter().map(|x| x / n).collect()
    }
}

/// One generated utterance before it is written anywhere.
#[derive(Clone, Debug)]
pub struct SynthUtterance {
    pub name: String,
    pub class: String,
    pub split: Split,
    pub feature: AudioFeature,
}

/// Draws every utterance of `cfg` in memory: per class, `per_class` feature
/// sequences around the (shifted) class mean, `test_fraction` of them marked test.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<SynthUtterance>> {
    cfg.validate()?;
    let means = cfg.means();
    let dir = cfg.shift_direction();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_test = ((cfg.per_class as f64) * cfg.test_fraction).round() as usize;

    let mut out = Vec::with_capacity(cfg.classes.len() * cfg.per_class);
    for (ci, class) in cfg.classes.iter().enumerate() {
        let center: Vec<f64> = means[ci]
            .iter()
            .zip(&dir)
            .map(|(m, u)| m + cfg.shift * cfg.sigma * u)
            .collect();
        let mut order: Vec<usize> = (0..cfg.per_class).collect();
        order.shuffle(&mut rng);
        let test: HashSet<usize> = order[..n_test.min(cfg.per_class)].iter().copied().collect();
        for i in 0..cfg.per_class {
            let frames = rng.random_range(cfg.frames_min..=cfg.frames_max);
            let mut data = Vec::with_capacity(frames * cfg.d_a);
            for _ in 0..frames {
                for c in &center {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push((c + cfg.sigma * z) as f32);
                }
            }
            out.push(SynthUtterance {
                name: format!("{}-{class}-{i:04}", cfg.id_prefix),
                class: class.clone(),
                split: if test.contains(&i) { Split::Test } else { Split::Train },
                feature: AudioFeature::new(frames, cfg.d_a, data)?,
            });
        }
    }
    Ok(out)
}

/// Writes `features/*.feat`, `manifest.jsonl`, and `corpus.txt` (language-model
/// pretraining lines) under `out_dir`.
pub fn synthesize_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    for view in &cfg.views {
        for c in &cfg.classes {
            label_for(*view, c)?;
        }
    }
    let feat_dir = out_dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;

    let mut records = Vec::new();
    for u in synthesize(cfg)? {
        let rel = format!("features/{}.feat", u.name);
        write_feature(&out_dir.join(&rel), &u.feature)?;
        for &view in &cfg.views {
            records.push(ManifestRecord {
                id: format!("{}-{view}", u.name),
                feature_path: rel.clone(),
                prompt: view.prompt().to_string(),
                target: target_for(view, &u.class)?,
                view,
                label: label_for(view, &u.class)?,
                fold: 0,
                split: u.split,
            });
        }
    }
    let manifest = DatasetManifest::new(records, out_dir.to_path_buf(), 1)?;
    let manifest = if cfg.n_folds >= 2 {
        make_folds(&manifest, cfg.n_folds, cfg.seed ^ 0x5eed_f01d)?
    } else {
        manifest
    };
    manifest.save(&out_dir.join("manifest.jsonl"))?;

    let corpus_path = out_dir.join("corpus.txt");
    let mut f = std::fs::File::create(&corpus_path).map_err(|e| Error::io(&corpus_path, e))?;
    for line in lm_corpus(&cfg.classes) {
        writeln!(f, "{line}").map_err(|e| Error::io(&corpus_path, e))?;
    }
    Ok(manifest)
}
