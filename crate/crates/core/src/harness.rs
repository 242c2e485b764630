//! Unweighted accuracy and the experiment protocols: k-fold in-domain,
//! zero-shot out-of-domain, few-shot finetuning, and the parameter-group
//! ablation.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataio::{parse_target, sample_shots, DatasetManifest, Split, View};
use crate::error::{Error, Result};
use crate::model::{Backbone, ClassEmbeddings, ClassSet, SelmModel, DEFAULT_MAX_TOKENS};
use crate::trainer::{
    few_shot_finetune, load_examples, train, Example, FinetuneConfig, ParamGroup, ParamGroupSpec, TrainConfig,
};

/// Recall of each class; every class must occur in `labels`.
pub fn per_class_recall(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut total = vec![0usize; n_classes];
    let mut correct = vec![0usize; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(Error::Metric(format!("class index out of range 0..{n_classes}")));
        }
        total[l] += 1;
        if p == l {
            correct[l] += 1;
        }
    }
    if let Some(c) = total.iter().position(|&t| t == 0) {
        return Err(Error::Metric(format!("class {c} never occurs in the labels")));
    }
    Ok(correct.iter().zip(&total).map(|(&c, &t)| c as f64 / t as f64).collect())
}

/// Mean per-class recall.
pub fn unweighted_accuracy(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let r = per_class_recall(predictions, labels, n_classes)?;
    Ok(r.iter().sum::<f64>() / n_classes as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub view: View,
    pub beam: usize,
    pub max_tokens: usize,
    /// Class names to map onto; the manifest's labels for `view` when absent.
    pub classes: Option<Vec<String>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            view: View::Categorical,
            beam: 3,
            max_tokens: DEFAULT_MAX_TOKENS,
            classes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub finetune: FinetuneConfig,
    pub fsl_groups: ParamGroupSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            finetune: FinetuneConfig::default(),
            fsl_groups: ParamGroupSpec::one(ParamGroup::Tt),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub setup: String,
    pub per_class_recall: BTreeMap<String, f64>,
    pub unweighted_accuracy: f64,
    pub n_examples: usize,
    /// Predictions resolved by parsing the generated text directly.
    pub parsed_predictions: usize,
    pub config: serde_json::Value,
    pub seed: u64,
}

/// Generated text and the class it maps to.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub text: String,
    pub class: usize,
    pub parsed: bool,
}

/// Sees only the feature and prompt. Well-formed targets naming a known class
/// map directly; anything else goes through embedding similarity.
pub fn predict(
    model: &SelmModel,
    example: &Example,
    classes: &ClassEmbeddings,
    view: View,
    beam: usize,
    max_tokens: usize,
) -> Result<Prediction> {
    let text = model.generate(&example.feature, &example.prompt, beam, max_tokens)?;
    if let Some(i) = parse_target(view, &text).and_then(|l| classes.classes().index_of(&l)) {
        return Ok(Prediction { text, class: i, parsed: true });
    }
    let class = model.map_to_class_with(&text, classes)?;
    Ok(Prediction { text, class, parsed: false })
}

pub fn evaluate(
    model: &SelmModel,
    examples: &[Example],
    classes: &ClassSet,
    cfg: &EvalConfig,
    setup: &str,
    config_echo: serde_json::Value,
    seed: u64,
) -> Result<EvalReport> {
    let emb = model.class_embeddings(classes)?;
    let mut preds = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    let mut parsed = 0;
    for ex in examples {
        let label = classes
            .index_of(&ex.label)
            .ok_or_else(|| Error::Data(format!("example {} has label {:?} outside the class set", ex.id, ex.label)))?;
        let p = predict(model, ex, &emb, cfg.view, cfg.beam, cfg.max_tokens)?;
        parsed += p.parsed as usize;
        preds.push(p.class);
        labels.push(label);
    }
    let recall = per_class_recall(&preds, &labels, classes.len())?;
    Ok(EvalReport {
        setup: setup.to_string(),
        unweighted_accuracy: recall.iter().sum::<f64>() / recall.len() as f64,
        per_class_recall: classes.names().iter().cloned().zip(recall).collect(),
        n_examples: examples.len(),
        parsed_predictions: parsed,
        config: config_echo,
        seed,
    })
}

fn class_set(manifest: &DatasetManifest, cfg: &EvalConfig) -> Result<ClassSet> {
    match &cfg.classes {
        Some(c) => ClassSet::new(c.clone()),
        None => ClassSet::new(manifest.classes(cfg.view)),
    }
}

fn echo<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct FoldedReport {
    pub folds: Vec<EvalReport>,
    pub aggregate: EvalReport,
}

fn aggregate(setup: &str, reports: &[EvalReport], config: serde_json::Value, seed: u64) -> EvalReport {
    let n = reports.len() as f64;
    let mut recall: BTreeMap<String, f64> = BTreeMap::new();
    for r in reports {
        for (c, v) in &r.per_class_recall {
            *recall.entry(c.clone()).or_default() += v / n;
        }
    }
    EvalReport {
        setup: setup.to_string(),
        per_class_recall: recall,
        unweighted_accuracy: reports.iter().map(|r| r.unweighted_accuracy).sum::<f64>() / n,
        n_examples: reports.iter().map(|r| r.n_examples).sum(),
        parsed_predictions: reports.iter().map(|r| r.parsed_predictions).sum(),
        config,
        seed,
    }
}

/// Per fold: train on the other folds (all views), evaluate the held-out
/// fold's records of the configured view.
pub fn run_in_domain(manifest: &DatasetManifest, backbone: Arc<Backbone>, cfg: &ExperimentConfig) -> Result<FoldedReport> {
    if manifest.n_folds < 2 {
        return Err(Error::Data("manifest has no fold assignment".into()));
    }
    let classes = class_set(manifest, &cfg.eval)?;
    let config = echo(cfg)?;
    let mut folds = Vec::new();
    for f in 0..manifest.n_folds {
        let train_set = load_examples(&manifest.triplets(|r| r.fold != f))?;
        let test_set = load_examples(&manifest.triplets(|r| r.fold == f && r.view == cfg.eval.view))?;
        let (model, _) = train(&train_set, &cfg.train, backbone.clone())?;
        folds.push(evaluate(&model, &test_set, &classes, &cfg.eval, &format!("in-domain/fold-{f}"), config.clone(), cfg.train.seed)?);
    }
    let aggregate = aggregate("in-domain", &folds, config, cfg.train.seed);
    Ok(FoldedReport { folds, aggregate })
}

pub fn check_leakage(train: &DatasetManifest, test: &DatasetManifest) -> Result<()> {
    let ids = train.ids();
    if let Some(id) = test.ids().into_iter().find(|id| ids.contains(id)) {
        return Err(Error::Leakage(format!("id {id} appears in both training and test manifests")));
    }
    let features: HashSet<_> = train.records.iter().map(|r| train.resolve(r)).collect();
    if let Some(r) = test.records.iter().find(|r| features.contains(&test.resolve(r))) {
        return Err(Error::Leakage(format!("feature {} is shared by training and test data", r.feature_path)));
    }
    Ok(())
}

/// Test-split records of `view` in `manifest`.
pub fn test_examples(manifest: &DatasetManifest, view: View) -> Result<Vec<Example>> {
    load_examples(&manifest.triplets(|r| r.split == Split::Test && r.view == view))
}

/// Zero-shot evaluation of `model` on the test split of another domain.
pub fn evaluate_ood(model: &SelmModel, test: &DatasetManifest, cfg: &ExperimentConfig) -> Result<EvalReport> {
    let classes = class_set(test, &cfg.eval)?;
    let examples = test_examples(test, cfg.eval.view)?;
    evaluate(model, &examples, &classes, &cfg.eval, "ood", echo(cfg)?, cfg.train.seed)
}

/// Trains on every record of the source domain, then evaluates zero-shot.
pub fn run_ood(
    train_manifest: &DatasetManifest,
    test_manifest: &DatasetManifest,
    backbone: Arc<Backbone>,
    cfg: &ExperimentConfig,
) -> Result<(SelmModel, EvalReport)> {
    check_leakage(train_manifest, test_manifest)?;
    let train_set = load_examples(&train_manifest.triplets(|_| true))?;
    let (model, _) = train(&train_set, &cfg.train, backbone)?;
    let report = evaluate_ood(&model, test_manifest, cfg)?;
    Ok((model, report))
}

#[derive(Clone, Debug, Serialize)]
pub struct FslReport {
    pub n_per_class: usize,
    pub groups: String,
    pub seeds: Vec<EvalReport>,
    pub mean_ua: f64,
    /// Population standard deviation over seeds.
    pub std_ua: f64,
}

/// Per seed: draw shots from the target train split, finetune `spec`, and
/// evaluate on the target test split.
pub fn run_fsl(
    base: &SelmModel,
    test_manifest: &DatasetManifest,
    n_per_class: usize,
    spec: &ParamGroupSpec,
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Result<FslReport> {
    if seeds.is_empty() {
        return Err(Error::Config("few-shot evaluation needs at least one seed".into()));
    }
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    let classes = class_set(test_manifest, &cfg.eval)?;
    let test = test_examples(test_manifest, cfg.eval.view)?;
    let mut echo_cfg = echo(cfg)?;
    echo_cfg["fsl_groups"] = echo(spec)?;
    let mut reports = Vec::new();
    for &seed in seeds {
        let shots = load_examples(&sample_shots(test_manifest, cfg.eval.view, n_per_class, seed)?)?;
        let ft = FinetuneConfig { seed, ..cfg.finetune.clone() };
        let tuned = few_shot_finetune(base, &shots, spec, &ft)?;
        reports.push(evaluate(&tuned, &test, &classes, &cfg.eval, &format!("fsl/{n_per_class}-shot/{spec}"), echo_cfg.clone(), seed)?);
    }
    let uas: Vec<f64> = reports.iter().map(|r| r.unweighted_accuracy).collect();
    let mean = uas.iter().sum::<f64>() / uas.len() as f64;
    let var = uas.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / uas.len() as f64;
    Ok(FslReport {
        n_per_class,
        groups: spec.to_string(),
        seeds: reports,
        mean_ua: mean,
        std_ua: var.sqrt(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub zero_shot_ua: f64,
    pub groups: Vec<FslReport>,
}

/// Few-shot finetuning of each of AL-Enc, AL-Dec, AT, TT in turn.
pub fn run_ablation(
    base: &SelmModel,
    test_manifest: &DatasetManifest,
    n_per_class: usize,
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Result<AblationReport> {
    let zero = evaluate_ood(base, test_manifest, cfg)?;
    let groups = ParamGroup::ABLATION
        .iter()
        .map(|&g| run_fsl(base, test_manifest, n_per_class, &ParamGroupSpec::one(g), seeds, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        zero_shot_ua: zero.unweighted_accuracy,
        groups,
    })
}
