//! End-to-end acceptance checks. Run all with `cargo test --test acceptance`,
//! or a subset with `cargo test --test acceptance -- 3 9`.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selm::checkpoint::Container;
use selm::dataio::{
    lm_corpus, read_feature, six_classes, synthesize_dataset, write_feature, AudioFeature, DatasetManifest, Split,
    SynthConfig, View, CATEGORICAL_PROMPT,
};
use selm::harness::{
    evaluate_ood, run_ablation, run_fsl, run_in_domain, run_ood, unweighted_accuracy, EvalReport, ExperimentConfig,
    FoldedReport,
};
use selm::lm::{pretrain_lm, LanguageModel, LmConfig, PretrainConfig};
use selm::model::{Backbone, SelmConfig, SelmModel};
use selm::oracle::check_random_joints;
use selm::tokenizer::Vocabulary;
use selm::trainer::{check_model_gradients, load_examples, train, FinetuneConfig, ParamGroup, ParamGroupSpec, TrainConfig};

type Check = Result<(bool, String), String>;

struct Fixture {
    dir: tempfile::TempDir,
    lm_path: PathBuf,
    backbone: Arc<Backbone>,
    source: DatasetManifest,
    target: DatasetManifest,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let t = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let source = synthesize_dataset(&SynthConfig::default(), &dir.path().join("source")).unwrap();
        let target = synthesize_dataset(
            &SynthConfig {
                shift: 4.0,
                seed: 1,
                per_class: 40,
                id_prefix: "target".into(),
                ..SynthConfig::default()
            },
            &dir.path().join("target"),
        )
        .unwrap();
        let corpus = lm_corpus(&six_classes());
        let vocab = Vocabulary::train(&corpus, LmConfig::default().vocab).unwrap();
        let (lm, _) = pretrain_lm(&corpus, &vocab, LmConfig::default(), &PretrainConfig::default()).unwrap();
        let mut backbone = Backbone::new(lm, vocab).unwrap();
        let lm_path = dir.path().join("lm.ckpt");
        backbone.save(&lm_path).unwrap();
        eprintln!("  (setup: data and language model pretraining took {:.1?})", t.elapsed());
        Fixture {
            dir,
            lm_path,
            backbone: Arc::new(backbone),
            source,
            target,
        }
    })
}

fn experiment() -> ExperimentConfig {
    ExperimentConfig {
        train: TrainConfig {
            epochs: 30,
            stop_below: Some(1e-3),
            ..TrainConfig::default()
        },
        finetune: FinetuneConfig {
            epochs: 10,
            lr: 3e-4,
            batch: 8,
            ..FinetuneConfig::default()
        },
        fsl_groups: ParamGroupSpec::one(ParamGroup::AlEnc),
        ..ExperimentConfig::default()
    }
}

const FSL_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// In-domain and zero-shot results shared by criteria 5 to 8.
struct DomainRuns {
    in_domain: FoldedReport,
    ood_model: SelmModel,
    ood: EvalReport,
    in_domain_time: Duration,
}

static DOMAIN: OnceLock<Result<DomainRuns, String>> = OnceLock::new();

fn domain_runs() -> Result<&'static DomainRuns, String> {
    DOMAIN
        .get_or_init(|| {
            let fx = fixture();
            let cfg = experiment();
            let t = Instant::now();
            let in_domain = run_in_domain(&fx.source, fx.backbone.clone(), &cfg).map_err(|e| e.to_string())?;
            let in_domain_time = t.elapsed();
            let (ood_model, ood) =
                run_ood(&fx.source, &fx.target, fx.backbone.clone(), &cfg).map_err(|e| e.to_string())?;
            Ok(DomainRuns {
                in_domain,
                ood_model,
                ood,
                in_domain_time,
            })
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e <= limit, format!("{e:.1?} of {limit:?}"))
}

// 1
fn grad_check() -> Check {
    let t = Instant::now();
    let r = check_model_gradients(1e-3, 16, 0).map_err(err)?;
    let (fast, time) = within(t, Duration::from_secs(60));
    let worst = r
        .per_param
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(n, _)| n.as_str())
        .unwrap_or("-");
    // same scalars at a tenth of the step: central-difference error should drop ~100x
    let fine = check_model_gradients(1e-4, 16, 0).map_err(err)?;
    Ok((
        r.max_relative_error < 1e-3 && fast,
        format!(
            "max rel err {:.2e} over {} tensors / {} scalars (worst {worst}); at eps 1e-4: {:.2e}; {time}",
            r.max_relative_error,
            r.per_param.len(),
            r.checked_scalars,
            fine.max_relative_error
        ),
    ))
}

// 2
fn freeze_contract() -> Check {
    let fx = fixture();
    let t = Instant::now();
    let on_disk = std::fs::read(&fx.lm_path).map_err(err)?;
    let (pretrained, _) = Container::load(&fx.lm_path).map_err(err)?;
    let examples = load_examples(&fx.source.triplets(|r| r.split == Split::Train)[..16]).map_err(err)?;
    let cfg = TrainConfig {
        epochs: 50,
        batch: 4,
        ..TrainConfig::default()
    };
    let steps = cfg.epochs * examples.len().div_ceil(cfg.batch);
    let (model, _) = train(&examples, &cfg, fx.backbone.clone()).map_err(err)?;
    let after = model.lm().to_container();
    let mut same = 0;
    for (name, e) in pretrained.tensors.iter() {
        if after.tensors.get(name).is_some_and(|t| t.bit_eq(&e.tensor)) {
            same += 1;
        }
    }
    let embedding_ok = after.tensors.get("lm.wte.weight").is_some_and(|t| {
        pretrained.tensors.get("lm.wte.weight").is_some_and(|p| p.bit_eq(t))
    });
    let bytes_ok = model.lm().to_bytes() == on_disk && std::fs::read(&fx.lm_path).map_err(err)? == on_disk;
    let all_frozen = model.full_parameter_tree().iter().filter(|(n, _)| n.starts_with("lm.")).all(|(_, e)| e.frozen);
    let (fast, time) = within(t, Duration::from_secs(60));
    Ok((
        steps >= 200 && same == pretrained.tensors.len() && embedding_ok && bytes_ok && all_frozen && fast,
        format!("{steps} steps; {same}/{} LM tensors bit-identical; serialized bytes equal: {bytes_ok}; {time}", pretrained.tensors.len()),
    ))
}

// 3
fn formulation_oracle() -> Check {
    let t = Instant::now();
    let r = check_random_joints(200, 2024).map_err(err)?;
    let (fast, time) = within(t, Duration::from_secs(5));
    Ok((
        r.mismatches == 0 && r.queries > 0 && fast,
        format!("{} joints, {} queries, {} mismatches ({} undefined skipped); {time}", r.trials, r.queries, r.mismatches, r.skipped_undefined),
    ))
}

// 4
fn overfit() -> Check {
    let fx = fixture();
    let t = Instant::now();
    let dir = fx.dir.path().join("overfit");
    let m = synthesize_dataset(
        &SynthConfig {
            per_class: 4,
            views: View::ALL.to_vec(),
            n_folds: 1,
            seed: 17,
            id_prefix: "overfit".into(),
            ..SynthConfig::default()
        },
        &dir,
    )
    .map_err(err)?;
    let mut triplets = m.triplets(|_| true);
    triplets.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    triplets.truncate(32);
    let examples = load_examples(&triplets).map_err(err)?;
    let cfg = TrainConfig {
        epochs: 300,
        stop_below: Some(0.01),
        ..TrainConfig::default()
    };
    let (model, report) = train(&examples, &cfg, fx.backbone.clone()).map_err(err)?;
    let reached = report.epochs.iter().find(|e| e.mean_loss < 0.1).map(|e| e.epoch);
    let mut exact = 0;
    for ex in &examples {
        if model.generate(&ex.feature, &ex.prompt, 3, 20).map_err(err)? == ex.target {
            exact += 1;
        }
    }
    let rate = exact as f64 / examples.len() as f64;
    let (fast, time) = within(t, Duration::from_secs(300));
    Ok((
        reached.is_some() && rate >= 0.95 && fast,
        format!(
            "loss < 0.1 at epoch {}; final {:.4}; exact match {exact}/{}; {time}",
            reached.map_or("-".into(), |e| e.to_string()),
            report.final_loss().unwrap_or(f64::NAN),
            examples.len()
        ),
    ))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest class centroid of per-utterance mean frames, per fold.
fn nearest_centroid_ua(m: &DatasetManifest) -> f64 {
    let means: Vec<(u32, String, Vec<f64>)> = m
        .records
        .iter()
        .map(|r| (r.fold, r.label.clone(), read_feature(&m.resolve(r)).unwrap().mean_frame()))
        .collect();
    let classes: Vec<String> = m.classes(View::Categorical);
    let mut total = 0.0;
    for f in 0..m.n_folds {
        let mut sums: BTreeMap<&str, (Vec<f64>, f64)> = BTreeMap::new();
        for (_, label, x) in means.iter().filter(|r| r.0 != f) {
            let e = sums.entry(label).or_insert((vec![0.0; x.len()], 0.0));
            e.0.iter_mut().zip(x).for_each(|(a, b)| *a += b);
            e.1 += 1.0;
        }
        let centroids: Vec<Vec<f64>> = classes
            .iter()
            .map(|c| sums[c.as_str()].0.iter().map(|v| v / sums[c.as_str()].1).collect())
            .collect();
        let (mut pred, mut gold) = (Vec::new(), Vec::new());
        for (_, label, x) in means.iter().filter(|r| r.0 == f) {
            let best = (0..classes.len())
                .min_by(|&a, &b| dist2(x, &centroids[a]).total_cmp(&dist2(x, &centroids[b])))
                .unwrap();
            pred.push(best);
            gold.push(classes.iter().position(|c| c == label).unwrap());
        }
        total += unweighted_accuracy(&pred, &gold, classes.len()).unwrap();
    }
    total / m.n_folds as f64
}

// 5
fn in_domain() -> Check {
    let fx = fixture();
    let centroid = nearest_centroid_ua(&fx.source);
    let runs = domain_runs()?;
    let ua = runs.in_domain.aggregate.unweighted_accuracy;
    let limit = Duration::from_secs(600);
    let folds: Vec<String> = runs.in_domain.folds.iter().map(|f| format!("{:.3}", f.unweighted_accuracy)).collect();
    Ok((
        runs.in_domain.folds.len() == 5 && ua >= 0.90 && centroid >= 0.99 && runs.in_domain_time <= limit,
        format!(
            "mean UA {ua:.3} over folds [{}]; nearest-centroid {centroid:.3}; {:.1?} of {limit:?}",
            folds.join(", "),
            runs.in_domain_time
        ),
    ))
}

// 6
fn ood_gap() -> Check {
    let runs = domain_runs()?;
    let (ind, ood) = (runs.in_domain.aggregate.unweighted_accuracy, runs.ood.unweighted_accuracy);
    Ok((ind - ood >= 0.10, format!("in-domain {ind:.3}, zero-shot {ood:.3}, gap {:.3}", ind - ood)))
}

// 7
fn fsl_direction() -> Check {
    let fx = fixture();
    let runs = domain_runs()?;
    let cfg = experiment();
    let t = Instant::now();
    let zero = evaluate_ood(&runs.ood_model, &fx.target, &cfg).map_err(err)?.unweighted_accuracy;
    let mut means = Vec::new();
    for n in [4, 8, 16] {
        means.push(run_fsl(&runs.ood_model, &fx.target, n, &cfg.fsl_groups, &FSL_SEEDS, &cfg).map_err(err)?.mean_ua);
    }
    let (fast, time) = within(t, Duration::from_secs(900));
    let ordered = means[2] >= means[1] && means[1] >= means[0] && means[0] >= zero;
    Ok((
        ordered && means[1] - zero >= 0.05 && fast,
        format!(
            "{} seeds, {}: zero {zero:.3}, 4-shot {:.3}, 8-shot {:.3}, 16-shot {:.3}; {time}",
            FSL_SEEDS.len(),
            cfg.fsl_groups,
            means[0],
            means[1],
            means[2]
        ),
    ))
}

// 8
fn ablation() -> Check {
    let fx = fixture();
    let runs = domain_runs()?;
    let t = Instant::now();
    let r = run_ablation(&runs.ood_model, &fx.target, 8, &FSL_SEEDS[..2], &experiment()).map_err(err)?;
    let names: Vec<&str> = r.groups.iter().map(|g| g.groups.as_str()).collect();
    let expected: Vec<String> = ParamGroup::ABLATION.iter().map(|g| g.to_string()).collect();
    let comparable = r.groups.iter().all(|g| (0.0..=1.0).contains(&g.mean_ua) && g.seeds.len() == 2)
        && serde_json::to_string(&r).is_ok();
    let summary: Vec<String> = r.groups.iter().map(|g| format!("{} {:.3}", g.groups, g.mean_ua)).collect();
    Ok((
        names == expected && comparable,
        format!("zero {:.3}; {}; {:.1?}", r.zero_shot_ua, summary.join(", "), t.elapsed()),
    ))
}

fn beam_pair(model: &SelmModel, x: &AudioFeature, max_tokens: usize) -> Result<(bool, bool), String> {
    let prefix = model.prefix(x, CATEGORICAL_PROMPT).map_err(err)?;
    let greedy = model.greedy_prefix(&prefix, max_tokens).map_err(err)?;
    let b1 = model.beam_search_prefix(&prefix, 1, max_tokens).map_err(err)?.remove(0);
    let b3 = model.beam_search_prefix(&prefix, 3, max_tokens).map_err(err)?.remove(0);
    Ok((b1.tokens == greedy.tokens && b1.logprob == greedy.logprob, b3.logprob >= b1.logprob))
}

fn random_feature(rng: &mut ChaCha8Rng, frames: std::ops::Range<usize>, dim: usize, scale: f32) -> Result<AudioFeature, String> {
    let frames = rng.random_range(frames);
    let data = (0..frames * dim).map(|_| rng.random_range(-scale..scale)).collect();
    AudioFeature::new(frames, dim, data).map_err(err)
}

// 9
/// Seeded random mappers on the pretrained backbone. Untrained language models
/// are reported alongside: their near-uniform next-token distributions let
/// width-3 pruning lose to greedy on some seeds.
fn beam() -> Check {
    let fx = fixture();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut same, mut monotone) = (0, 0);
    for seed in 0..100u64 {
        let model = SelmModel::new(fx.backbone.clone(), SelmConfig::default(), seed).map_err(err)?;
        let x = random_feature(&mut rng, 4..24, 32, 3.0)?;
        let (s, m) = beam_pair(&model, &x, 20)?;
        same += s as usize;
        monotone += m as usize;
    }
    let (fast, time) = within(t, Duration::from_secs(60));

    let vocab = Vocabulary::byte_level();
    let (mut raw_same, mut raw_monotone) = (0, 0);
    for seed in 0..100u64 {
        let lm_cfg = LmConfig {
            d_lm: 16,
            n_layers: 1,
            n_heads: 2,
            context_length: 40,
            vocab: 300,
        };
        let lm = LanguageModel::init(lm_cfg, seed).map_err(err)?;
        let backbone = Arc::new(Backbone::new(lm, vocab.clone()).map_err(err)?);
        let model = SelmModel::new(backbone, SelmConfig { d_a: 6, k: 4, ..SelmConfig::default() }, seed).map_err(err)?;
        let x = random_feature(&mut rng, 1..6, 6, 2.0)?;
        let (s, m) = beam_pair(&model, &x, 12)?;
        raw_same += s as usize;
        raw_monotone += m as usize;
    }
    Ok((
        same == 100 && monotone == 100 && raw_same == 100 && fast,
        format!(
            "beam-1 == greedy on {same}/100; beam-3 ≥ beam-1 on {monotone}/100; {time} \
             (untrained language models: {raw_same}/100 and {raw_monotone}/100)"
        ),
    ))
}

fn confusion_recalls(table: &[Vec<usize>]) -> Vec<f64> {
    table
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[i] as f64 / n as f64)
        })
        .collect()
}

fn round_trips(dir: &Path) -> Result<Vec<&'static str>, String> {
    let mut failed = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..20 {
        let (frames, dim) = (rng.random_range(1..30), rng.random_range(1..40));
        let data: Vec<f32> = (0..frames * dim).map(|_| rng.random_range(-1e3f32..1e3)).collect();
        let f = AudioFeature::new(frames, dim, data).map_err(err)?;
        let p = dir.join(format!("{i}.feat"));
        write_feature(&p, &f).map_err(err)?;
        if !read_feature(&p).map_err(err)?.tensor().bit_eq(f.tensor()) || std::fs::read(&p).map_err(err)? != f.to_bytes() {
            failed.push("feature");
        }
    }

    let fx = fixture();
    let mp = dir.join("manifest.jsonl");
    fx.target.save(&mp).map_err(err)?;
    let back = DatasetManifest::load(&mp).map_err(err)?;
    if back.records != fx.target.records || back.to_jsonl().map_err(err)? != fx.target.to_jsonl().map_err(err)? {
        failed.push("manifest");
    }

    let lm_bytes = std::fs::read(&fx.lm_path).map_err(err)?;
    let (lm, _) = LanguageModel::load(&fx.lm_path).map_err(err)?;
    if lm.to_bytes() != lm_bytes {
        failed.push("lm checkpoint");
    }
    let model = SelmModel::new(fx.backbone.clone(), SelmConfig::default(), 5).map_err(err)?;
    let cp = dir.join("mappers.ckpt");
    model.save(&cp).map_err(err)?;
    let loaded = SelmModel::load(&cp).map_err(err)?;
    if !loaded.params().bit_eq(model.params()) || loaded.to_bytes().map_err(err)? != std::fs::read(&cp).map_err(err)? {
        failed.push("mapper checkpoint");
    }
    Ok(failed)
}

// 10
fn metric_and_formats() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut metric_ok = 0;
    for _ in 0..20 {
        let k = rng.random_range(2..8);
        let n = rng.random_range(1..60);
        // every class occurs at least once, so every recall is defined
        let gold: Vec<usize> = (0..k).chain((0..n).map(|_| rng.random_range(0..k))).collect();
        let pred: Vec<usize> = gold
            .iter()
            .map(|&g| if rng.random::<f64>() < 0.6 { g } else { rng.random_range(0..k) })
            .collect();
        let mut table = vec![vec![0usize; k]; k];
        for (&g, &p) in gold.iter().zip(&pred) {
            table[g][p] += 1;
        }
        let recalls = confusion_recalls(&table);
        let expected = recalls.iter().sum::<f64>() / recalls.len() as f64;
        let ua = unweighted_accuracy(&pred, &gold, k).map_err(err)?;
        if (ua - expected).abs() < 1e-12 {
            metric_ok += 1;
        }
    }
    let dir = tempfile::tempdir().map_err(err)?;
    let failed = round_trips(dir.path())?;
    Ok((
        metric_ok == 20 && failed.is_empty(),
        format!(
            "UA matched {metric_ok}/20 confusion tables; round trips {}",
            if failed.is_empty() { "bit-exact".to_string() } else { format!("failed: {failed:?}") }
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("grad check", grad_check),
        ("freeze contract", freeze_contract),
        ("formulation oracle", formulation_oracle),
        ("overfit", overfit),
        ("in-domain", in_domain),
        ("OOD gap", ood_gap),
        ("few-shot direction", fsl_direction),
        ("ablation", ablation),
        ("beam", beam),
        ("metric and formats", metric_and_formats),
    ];
    let wanted: HashSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let line = match check() {
            Ok((true, detail)) => format!("PASS {id:>2} {name}: {detail}"),
            Ok((false, detail)) => {
                failures += 1;
                format!("FAIL {id:>2} {name}: {detail}")
            }
            Err(e) => {
                failures += 1;
                format!("FAIL {id:>2} {name}: error: {e}")
            }
        };
        println!("{line}");
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
