use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use selm::dataio::{lm_corpus, read_feature, synthesize_dataset, DatasetManifest, SynthConfig};
use selm::harness::{evaluate_ood, run_ablation, run_fsl, run_in_domain, run_ood, ExperimentConfig};
use selm::lm::{pretrain_lm, LmConfig, PretrainConfig};
use selm::model::{Backbone, ClassSet, SelmModel};
use selm::oracle::check_random_joints;
use selm::tokenizer::Vocabulary;
use selm::trainer::{check_model_gradients, load_examples, train, ParamGroupSpec, TrainConfig};

#[derive(Parser)]
#[command(name = "selm", version, about = "Audio-conditioned language modeling for emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct Seed {
    /// Overrides the seed in any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (features, manifest.jsonl, corpus.txt).
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Domain shift in units of the within-class deviation.
        #[arg(long)]
        shift: Option<f64>,
        #[command(flatten)]
        seed: Seed,
    },
    /// Train a tokenizer and pretrain the language model on a line corpus.
    PretrainLm {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: Seed,
    },
    /// Train mappers on every record of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: Seed,
    },
    /// Generate text for one feature file.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        feature: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long, default_value_t = 20)]
        max_tokens: usize,
        #[command(flatten)]
        seed: Seed,
    },
    /// Map free text onto one of a comma-separated list of classes.
    MapClass {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[command(flatten)]
        seed: Seed,
    },
    /// Run an evaluation protocol.
    Eval {
        #[command(subcommand)]
        setup: EvalCommand,
    },
    /// Finite-difference gradient check of the assembled model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 8)]
        per_tensor: usize,
        #[command(flatten)]
        seed: Seed,
    },
    /// Compare the direct and factored posterior rankings on random joints.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[command(flatten)]
        seed: Seed,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// k-fold cross-validation on one manifest.
    InDomain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        seed: Seed,
    },
    /// Train on one domain, evaluate zero-shot on another.
    Ood {
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        test_manifest: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also save the trained mappers here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        seed: Seed,
    },
    /// Few-shot finetuning from a trained checkpoint.
    Fsl {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 8)]
        shots: usize,
        /// Parameter groups, e.g. TT or AL-Enc,AT; defaults to the config's.
        #[arg(long)]
        groups: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        seed: Seed,
    },
    /// Few-shot finetuning of each parameter group in turn.
    Ablation {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 8)]
        shots: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        seed: Seed,
    },
}

#[derive(Default, Deserialize, Serialize)]
#[serde(default)]
struct PretrainFile {
    lm: LmConfig,
    pretrain: PretrainConfig,
    vocab_size: Option<usize>,
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn experiment(config: Option<&Path>, seed: Seed) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = read_config(config)?;
    if let Some(s) = seed.seed {
        cfg.train.seed = s;
        cfg.finetune.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, shift, seed } => {
            let mut cfg: SynthConfig = read_config(config.as_deref())?;
            if let Some(s) = seed.seed {
                cfg.seed = s;
            }
            if let Some(d) = shift {
                cfg.shift = d;
            }
            let m = synthesize_dataset(&cfg, &out)?;
            eprintln!("wrote {} records to {}", m.records.len(), out.display());
            emit(&serde_json::json!({ "records": m.records.len(), "manifest": out.join("manifest.jsonl"), "config": cfg }))
        }
        Command::PretrainLm { corpus, config, out, seed } => {
            let mut cfg: PretrainFile = read_config(config.as_deref())?;
            if let Some(s) = seed.seed {
                cfg.pretrain.seed = s;
            }
            let lines: Vec<String> = match corpus {
                Some(p) => std::fs::read_to_string(&p)
                    .with_context(|| format!("reading {}", p.display()))?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(str::to_string)
                    .collect(),
                None => lm_corpus(&[]),
            };
            let vocab = Vocabulary::train(&lines, cfg.vocab_size.unwrap_or(cfg.lm.vocab))?;
            let (lm, report) = pretrain_lm(&lines, &vocab, cfg.lm, &cfg.pretrain)?;
            let mut backbone = Backbone::new(lm, vocab)?;
            backbone.save(&out)?;
            eprintln!(
                "held-out loss {:.3} -> {:.3}; wrote {}",
                report.initial_heldout_loss,
                report.final_heldout_loss,
                out.display()
            );
            emit(&report)
        }
        Command::Train { manifest, lm, config, out, seed } => {
            let mut cfg: TrainConfig = read_config(config.as_deref())?;
            if let Some(s) = seed.seed {
                cfg.seed = s;
            }
            let m = DatasetManifest::load(&manifest)?;
            let examples = load_examples(&m.triplets(|_| true))?;
            let backbone = Arc::new(Backbone::load(&lm)?);
            let (model, report) = train(&examples, &cfg, backbone)?;
            model.save(&out)?;
            eprintln!("final loss {:?}; wrote {}", report.final_loss(), out.display());
            print!("{}", report.to_jsonl()?);
            Ok(())
        }
        Command::Generate { ckpt, feature, prompt, beam, max_tokens, .. } => {
            let model = SelmModel::load(&ckpt)?;
            let x = read_feature(&feature)?;
            let hyps = model.beam_search(&x, &prompt, beam, max_tokens)?;
            let text = model.decode(&hyps[0])?;
            eprintln!("{text}");
            emit(&serde_json::json!({ "text": text, "logprob": hyps[0].logprob, "tokens": hyps[0].tokens.ids() }))
        }
        Command::MapClass { ckpt, text, classes, .. } => {
            let model = SelmModel::load(&ckpt)?;
            let set = ClassSet::new(classes)?;
            let emb = model.class_embeddings(&set)?;
            let q = model.text_embedding(&text)?;
            let sims: Vec<f64> = emb.rows().iter().map(|r| selm::model::cosine(&q, r)).collect();
            let i = model.map_to_class_with(&text, &emb)?;
            eprintln!("{text:?} -> {}", set.names()[i]);
            emit(&serde_json::json!({ "index": i, "class": set.names()[i], "similarities": sims }))
        }
        Command::Eval { setup } => run_eval(setup),
        Command::Gradcheck { eps, per_tensor, seed } => {
            let r = check_model_gradients(eps, per_tensor, seed.seed.unwrap_or(0))?;
            eprintln!("max relative error {:.3e} over {} scalars", r.max_relative_error, r.checked_scalars);
            emit(&r)
        }
        Command::OracleCheck { trials, seed } => {
            let r = check_random_joints(trials, seed.seed.unwrap_or(0))?;
            eprintln!("{} queries, {} mismatches", r.queries, r.mismatches);
            emit(&r)?;
            anyhow::ensure!(r.mismatches == 0, "posterior and factored rankings disagree");
            Ok(())
        }
    }
}

fn run_eval(setup: EvalCommand) -> Result<()> {
    match setup {
        EvalCommand::InDomain { manifest, lm, config, seed } => {
            let cfg = experiment(config.as_deref(), seed)?;
            let m = DatasetManifest::load(&manifest)?;
            let r = run_in_domain(&m, Arc::new(Backbone::load(&lm)?), &cfg)?;
            eprintln!("in-domain UA {:.4} over {} folds", r.aggregate.unweighted_accuracy, r.folds.len());
            emit(&r)
        }
        EvalCommand::Ood { train_manifest, test_manifest, lm, config, out, seed } => {
            let cfg = experiment(config.as_deref(), seed)?;
            let train_m = DatasetManifest::load(&train_manifest)?;
            let test_m = DatasetManifest::load(&test_manifest)?;
            let (model, r) = run_ood(&train_m, &test_m, Arc::new(Backbone::load(&lm)?), &cfg)?;
            if let Some(p) = out {
                model.save(&p)?;
            }
            eprintln!("zero-shot UA {:.4}", r.unweighted_accuracy);
            emit(&r)
        }
        EvalCommand::Fsl { ckpt, manifest, shots, groups, seeds, config, seed } => {
            let cfg = experiment(config.as_deref(), seed)?;
            let spec: ParamGroupSpec = match groups {
                Some(g) => g.parse()?,
                None => cfg.fsl_groups.clone(),
            };
            let model = SelmModel::load(&ckpt)?;
            let m = DatasetManifest::load(&manifest)?;
            let zero = evaluate_ood(&model, &m, &cfg)?;
            let r = run_fsl(&model, &m, shots, &spec, &seeds, &cfg)?;
            eprintln!(
                "{shots}-shot {spec}: UA {:.4} ± {:.4} (zero-shot {:.4})",
                r.mean_ua, r.std_ua, zero.unweighted_accuracy
            );
            emit(&serde_json::json!({ "zero_shot": zero, "fsl": r }))
        }
        EvalCommand::Ablation { ckpt, manifest, shots, seeds, config, seed } => {
            let cfg = experiment(config.as_deref(), seed)?;
            let model = SelmModel::load(&ckpt)?;
            let m = DatasetManifest::load(&manifest)?;
            let r = run_ablation(&model, &m, shots, &seeds, &cfg)?;
            for g in &r.groups {
                eprintln!("{:>6}: {:.4} ± {:.4}", g.groups, g.mean_ua, g.std_ua);
            }
            emit(&r)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
