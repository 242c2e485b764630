//! Mapper training against the frozen language model, and few-shot
//! finetuning restricted to named parameter groups.
//!
//! | group  | parameters                               |
//! |--------|------------------------------------------|
//! | AL-Enc | `audio_projection.linear1.*`             |
//! | AL-Dec | `audio_mapper.sequence.*`                |
//! | AT     | `audio_mapper.transformer.*`             |
//! | TT     | `text_mapper.transformer.*`              |
//! | ALL    | every mapper parameter                   |

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{label_for, lm_corpus, read_feature, six_classes, target_for, AudioFeature, Triplet, View};
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, LmConfig};
use crate::model::{Backbone, SelmConfig, SelmModel, AUDIO_PROJECTION, AUDIO_SEQUENCE, AUDIO_TRANSFORMER, TEXT_TRANSFORMER};
use crate::numerics::{adam_step, grad_check, AdamConfig, AdamState, GradCheckReport, Gradients, Graph, Objective, ParameterTree};
use crate::tokenizer::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    #[serde(rename = "AL-Enc")]
    AlEnc,
    #[serde(rename = "AL-Dec")]
    AlDec,
    #[serde(rename = "AT")]
    At,
    #[serde(rename = "TT")]
    Tt,
    #[serde(rename = "ALL")]
    All,
}

impl ParamGroup {
    pub const ABLATION: [ParamGroup; 4] = [ParamGroup::AlEnc, ParamGroup::AlDec, ParamGroup::At, ParamGroup::Tt];

    fn prefix(self) -> Option<String> {
        match self {
            ParamGroup::AlEnc => Some(format!("{AUDIO_PROJECTION}.linear1.")),
            ParamGroup::AlDec => Some(format!("{AUDIO_SEQUENCE}.")),
            ParamGroup::At => Some(format!("{AUDIO_TRANSFORMER}.")),
            ParamGroup::Tt => Some(format!("{TEXT_TRANSFORMER}.")),
            ParamGroup::All => None,
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::AlEnc => "AL-Enc",
            ParamGroup::AlDec => "AL-Dec",
            ParamGroup::At => "AT",
            ParamGroup::Tt => "TT",
            ParamGroup::All => "ALL",
        })
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "AL-ENC" => ParamGroup::AlEnc,
            "AL-DEC" => ParamGroup::AlDec,
            "AT" => ParamGroup::At,
            "TT" => ParamGroup::Tt,
            "ALL" => ParamGroup::All,
            _ => return Err(Error::Config(format!("unknown parameter group {s:?}"))),
        })
    }
}

/// Non-empty set of parameter groups; parses from `"TT"` or `"AL-Enc,AT"`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ParamGroup>", into = "Vec<ParamGroup>")]
pub struct ParamGroupSpec(BTreeSet<ParamGroup>);

impl ParamGroupSpec {
    pub fn new(groups: impl IntoIterator<Item = ParamGroup>) -> Result<Self> {
        let set: BTreeSet<ParamGroup> = groups.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Config("parameter group selection is empty".into()));
        }
        Ok(ParamGroupSpec(set))
    }

    pub fn all() -> Self {
        ParamGroupSpec([ParamGroup::All].into())
    }

    pub fn one(g: ParamGroup) -> Self {
        ParamGroupSpec([g].into())
    }

    pub fn groups(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        self.0.iter().copied()
    }
}

impl TryFrom<Vec<ParamGroup>> for ParamGroupSpec {
    type Error = Error;

    fn try_from(v: Vec<ParamGroup>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ParamGroupSpec> for Vec<ParamGroup> {
    fn from(s: ParamGroupSpec) -> Self {
        s.0.into_iter().collect()
    }
}

impl FromStr for ParamGroupSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::new(s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<Vec<_>>>()?)
    }
}

impl fmt::Display for ParamGroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&names.join(","))
    }
}

/// Names of the mapper parameters covered by `spec`.
pub fn select_param_groups(spec: &ParamGroupSpec, params: &ParameterTree) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for g in spec.groups() {
        let before = out.len();
        match g.prefix() {
            None => out.extend(params.names().map(str::to_string)),
            Some(p) => out.extend(params.names().filter(|n| n.starts_with(&p)).map(str::to_string)),
        }
        if out.len() == before && g != ParamGroup::All {
            return Err(Error::Config(format!("parameter group {g} matches nothing")));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub k: usize,
    pub clip_norm: f64,
    pub groups: ParamGroupSpec,
    /// Stop once an epoch's mean loss falls below this.
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            k: 10,
            clip_norm: 1.0,
            groups: ParamGroupSpec::all(),
            stop_below: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || !(self.clip_norm > 0.0) || self.k == 0 {
            return Err(Error::Config("batch, lr, clip_norm, and k must be positive".into()));
        }
        Ok(())
    }
}

/// Finetuning settings; `batch = 0` means all shots in one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            lr: 1e-4,
            batch: 0,
            seed: 0,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// A triplet with its feature loaded.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub feature: Arc<AudioFeature>,
    pub prompt: String,
    pub target: String,
    pub view: View,
    pub label: String,
}

/// Reads every referenced feature once; failures name the triplet.
pub fn load_examples(triplets: &[Triplet]) -> Result<Vec<Example>> {
    let mut cache: HashMap<PathBuf, Arc<AudioFeature>> = HashMap::new();
    triplets
        .iter()
        .map(|t| {
            let feature = match cache.get(&t.feature_ref) {
                Some(f) => f.clone(),
                None => {
                    let f = Arc::new(
                        read_feature(&t.feature_ref)
                            .map_err(|e| Error::Data(format!("triplet {}: {e}", t.id)))?,
                    );
                    cache.insert(t.feature_ref.clone(), f.clone());
                    f
                }
            };
            if t.target.is_empty() {
                return Err(Error::Data(format!("triplet {} has an empty target", t.id)));
            }
            Ok(Example {
                id: t.id.clone(),
                feature,
                prompt: t.prompt.clone(),
                target: t.target.clone(),
                view: t.view,
                label: t.label.clone(),
            })
        })
        .collect()
}

struct Prepared<'a> {
    feature: &'a AudioFeature,
    prompt_ids: Vec<u32>,
    target_ids: Vec<u32>,
}

fn prepare<'a>(model: &SelmModel, batch: &'a [Example]) -> Result<Vec<Prepared<'a>>> {
    batch
        .iter()
        .map(|e| {
            let target_ids = model.vocab().encode(&e.target).0;
            if target_ids.is_empty() {
                return Err(Error::Data(format!("triplet {} has an empty target", e.id)));
            }
            Ok(Prepared {
                feature: &e.feature,
                prompt_ids: model.prompt_ids(&e.prompt)?,
                target_ids,
            })
        })
        .collect()
}

fn batch_loss(model: &SelmModel, batch: &[&Prepared], want_grads: bool) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads = Gradients::default();
    for p in batch {
        let mut g = Graph::new();
        let loss = model.loss_graph(&mut g, p.feature, &p.prompt_ids, &p.target_ids)?;
        total += g.scalar(loss) * scale;
        if want_grads {
            grads.accumulate(&g.backward(loss)?, scale);
        }
    }
    if !total.is_finite() {
        return Err(Error::Numerical(format!("batch loss is {total}")));
    }
    Ok((total, grads))
}

/// Mean over the batch of each example's target-token cross-entropy.
pub fn compute_loss(batch: &[Example], model: &SelmModel) -> Result<f64> {
    let prepared = prepare(model, batch)?;
    batch_loss(model, &prepared.iter().collect::<Vec<_>>(), false).map(|(l, _)| l)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Runs the optimization loop on the currently unfrozen mapper parameters.
fn fit(
    model: &mut SelmModel,
    examples: &[Example],
    epochs: usize,
    batch: usize,
    adam: AdamConfig,
    clip_norm: f64,
    seed: u64,
    stop_below: Option<f64>,
) -> Result<TrainReport> {
    let prepared = prepare(model, examples)?;
    let mut state = AdamState::new(adam);
    let mut report = TrainReport::default();
    for epoch in 1..=epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut epoch_rng(seed, epoch));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let b: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (loss, mut grads) = batch_loss(model, &b, true)?;
            loss_sum += loss * b.len() as f64;
            grads.clip_global_norm(clip_norm);
            adam_step(model.params_mut(), &grads, &mut state)?;
        }
        let mean_loss = loss_sum / prepared.len() as f64;
        report.epochs.push(EpochRecord {
            epoch,
            mean_loss,
            lr: adam.lr,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        if stop_below.is_some_and(|t| mean_loss < t) {
            break;
        }
    }
    Ok(report)
}

fn restrict(model: &mut SelmModel, selected: &BTreeSet<String>) -> Result<()> {
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for n in names {
        model.params_mut().set_frozen(&n, !selected.contains(&n))?;
    }
    Ok(())
}

fn unfreeze(model: &mut SelmModel) -> Result<()> {
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for n in names {
        model.params_mut().set_frozen(&n, false)?;
    }
    Ok(())
}

/// Trains fresh mappers (seeded by `config.seed`) against `backbone`.
pub fn train(dataset: &[Example], config: &TrainConfig, backbone: Arc<Backbone>) -> Result<(SelmModel, TrainReport)> {
    config.validate()?;
    let first = dataset.first().ok_or_else(|| Error::Data("training set is empty".into()))?;
    let selm = SelmConfig {
        d_a: first.feature.dim(),
        k: config.k,
        ..SelmConfig::default()
    };
    let mut model = SelmModel::new(backbone, selm, config.seed)?;
    let report = continue_training(&mut model, dataset, config)?;
    Ok((model, report))
}

/// Further training of an existing model on the groups in `config`.
pub fn continue_training(model: &mut SelmModel, dataset: &[Example], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let selected = select_param_groups(&config.groups, model.params())?;
    restrict(model, &selected)?;
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let r = fit(model, dataset, config.epochs, config.batch, adam, config.clip_norm, config.seed, config.stop_below);
    unfreeze(model)?;
    r
}

/// Per-label shot counts; errors unless every label has the same count.
pub fn check_equal_shots(shots: &[Example]) -> Result<usize> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in shots {
        *counts.entry(&s.label).or_default() += 1;
    }
    let mut values = counts.values();
    let n = *values.next().ok_or_else(|| Error::Data("no shots".into()))?;
    if values.any(|&c| c != n) {
        return Err(Error::Data(format!("unequal shots per class: {counts:?}")));
    }
    Ok(n)
}

/// Copies `base` and finetunes only the parameters selected by `spec`, with a
/// fresh optimizer. Everything else stays bit-identical.
pub fn few_shot_finetune(
    base: &SelmModel,
    shots: &[Example],
    spec: &ParamGroupSpec,
    config: &FinetuneConfig,
) -> Result<SelmModel> {
    check_equal_shots(shots)?;
    if !(config.lr > 0.0) || !(config.clip_norm > 0.0) {
        return Err(Error::Config("finetune lr and clip_norm must be positive".into()));
    }
    let mut model = base.clone();
    let selected = select_param_groups(spec, model.params())?;
    restrict(&mut model, &selected)?;
    let batch = if config.batch == 0 { shots.len() } else { config.batch };
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    fit(&mut model, shots, config.epochs, batch, adam, config.clip_norm, config.seed, None)?;
    unfreeze(&mut model)?;
    Ok(model)
}

/// Mean batch loss as a function of the model's unfrozen mapper parameters.
pub struct LossObjective {
    pub model: SelmModel,
    examples: Vec<Example>,
}

impl LossObjective {
    pub fn new(model: SelmModel, examples: Vec<Example>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        Ok(LossObjective { model, examples })
    }
}

impl Objective for LossObjective {
    fn params(&self) -> &ParameterTree {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParameterTree {
        self.model.params_mut()
    }

    fn loss(&self) -> Result<f64> {
        compute_loss(&self.examples, &self.model)
    }

    fn loss_and_grads(&self) -> Result<(f64, Gradients)> {
        let prepared = prepare(&self.model, &self.examples)?;
        batch_loss(&self.model, &prepared.iter().collect::<Vec<_>>(), true)
    }
}

/// Finite-difference check of every mapper tensor on a small randomly
/// initialized model (d_lm = 32) on one seeded triplet.
pub fn check_model_gradients(eps: f64, per_tensor: usize, seed: u64) -> Result<GradCheckReport> {
    let corpus = lm_corpus(&six_classes());
    let vocab = Vocabulary::train(&corpus, 320)?;
    let lm_config = LmConfig {
        d_lm: 32,
        n_layers: 2,
        n_heads: 2,
        context_length: 48,
        vocab: 320,
    };
    let backbone = Arc::new(Backbone::new(LanguageModel::init(lm_config, seed)?, vocab)?);
    let model = SelmModel::new(backbone, SelmConfig { d_a: 8, ..SelmConfig::default() }, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let frames = 5;
    let data = (0..frames * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let view = View::Categorical;
    let examples = vec![Example {
        id: "check".into(),
        feature: Arc::new(AudioFeature::new(frames, 8, data)?),
        prompt: view.prompt().to_string(),
        target: target_for(view, "happy")?,
        view,
        label: label_for(view, "happy")?,
    }];
    grad_check(&mut LossObjective::new(model, examples)?, eps, per_tensor, seed)
}
