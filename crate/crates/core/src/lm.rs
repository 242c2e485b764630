//! Miniature decoder-only language model: the frozen prior over emotion text.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256, CheckpointKind, Container};
use crate::error::{Error, Result};
use crate::layers;
use crate::numerics::{adam_step, AdamConfig, AdamState, Gradients, Graph, Mat, ParameterTree, Tensor, Var};
use crate::tokenizer::{TokenSequence, Vocabulary, BOS, EOS};

pub const TOKEN_EMBEDDING: &str = "lm.wte";
pub const POSITION_EMBEDDING: &str = "lm.wpe";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub d_lm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_length: usize,
    pub vocab: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_lm: 64,
            n_layers: 2,
            n_heads: 2,
            context_length: 96,
            vocab: 512,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_lm == 0 || self.n_heads == 0 || self.d_lm % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_lm {} must be a positive multiple of n_heads {}",
                self.d_lm, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.context_length < 2 || self.vocab < crate::tokenizer::MIN_VOCAB {
            return Err(Error::Config(format!("invalid language model config {self:?}")));
        }
        Ok(())
    }

    fn to_fields(self) -> Vec<u32> {
        [self.d_lm, self.n_layers, self.n_heads, self.context_length, self.vocab]
            .iter()
            .map(|&v| v as u32)
            .collect()
    }
}

/// Logits and final (post layer-norm) hidden states for every input position.
#[derive(Clone, Debug)]
pub struct LmOutput {
    pub logits: Mat,
    pub hidden: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    config: LmConfig,
    params: ParameterTree,
}

impl LanguageModel {
    /// Fresh, trainable weights.
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_lm;
        let mut p = ParameterTree::new();
        p.insert(format!("{TOKEN_EMBEDDING}.weight"), Tensor::normal(&[config.vocab, d], 0.02, &mut rng), false)?;
        p.insert(
            format!("{POSITION_EMBEDDING}.weight"),
            Tensor::normal(&[config.context_length, d], 0.02, &mut rng),
            false,
        )?;
        for i in 0..config.n_layers {
            layers::init_block(&mut p, &format!("lm.blocks.{i}"), d, false, &mut rng)?;
        }
        layers::init_layer_norm(&mut p, "lm.ln_f", d, false)?;
        p.insert("lm.head.weight", Tensor::xavier(d, config.vocab, &mut rng), false)?;
        Ok(LanguageModel { config, params: p })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterTree {
        &self.params
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.config.vocab) {
            Some(&id) => Err(Error::OutOfVocabulary {
                id: id as usize,
                vocab: self.config.vocab,
            }),
            None => Ok(()),
        }
    }

    /// Token embedding lookup recorded on `g`.
    pub fn embed(&self, g: &mut Graph, ids: &[u32]) -> Result<Var> {
        self.check_ids(ids)?;
        let table = g.param_from(&self.params, &format!("{TOKEN_EMBEDDING}.weight"))?;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(g.gather_rows(table, &idx))
    }

    /// Embedding rows for `tokens` as an n × d_lm tensor.
    pub fn embed_tokens(&self, tokens: &TokenSequence) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.embed(&mut g, tokens.ids())?;
        Ok(g.value(v).to_tensor(&[tokens.len(), self.config.d_lm]))
    }

    /// Runs the transformer over already-embedded inputs (n × d_lm), adding
    /// absolute position embeddings 0..n. Returns final hidden states.
    pub fn hidden(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.value(x).rows;
        if n > self.config.context_length {
            return Err(Error::ContextOverflow {
                len: n,
                context: self.config.context_length,
            });
        }
        let wpe = g.param_from(&self.params, &format!("{POSITION_EMBEDDING}.weight"))?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather_rows(wpe, &positions);
        let mut h = g.add(x, pos);
        for i in 0..self.config.n_layers {
            h = layers::block(g, &self.params, &format!("lm.blocks.{i}"), h, self.config.n_heads, true)?;
        }
        layers::layer_norm(g, &self.params, "lm.ln_f", h)
    }

    pub fn head(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let w = g.param_from(&self.params, "lm.head.weight")?;
        Ok(g.matmul(hidden, w))
    }

    /// `[prefix; embed(tokens)] → hidden states → logits`, recorded on `g`.
    pub fn forward_graph(&self, g: &mut Graph, prefix: Option<Var>, tokens: &[u32]) -> Result<(Var, Var)> {
        let n = prefix.map_or(0, |p| g.value(p).rows) + tokens.len();
        if n > self.config.context_length {
            return Err(Error::ContextOverflow {
                len: n,
                context: self.config.context_length,
            });
        }
        let emb = self.embed(g, tokens)?;
        let x = match prefix {
            Some(p) => {
                if g.value(p).cols != self.config.d_lm {
                    return Err(Error::Shape(format!(
                        "prefix width {} != d_lm {}",
                        g.value(p).cols,
                        self.config.d_lm
                    )));
                }
                g.concat_rows(&[p, emb])
            }
            None => emb,
        };
        let h = self.hidden(g, x)?;
        let logits = self.head(g, h)?;
        Ok((logits, h))
    }

    pub fn forward(&self, prefix: Option<&Mat>, tokens: &TokenSequence) -> Result<LmOutput> {
        let mut g = Graph::new();
        let p = prefix.filter(|m| m.rows > 0).map(|m| g.constant(m.clone()));
        let (logits, hidden) = self.forward_graph(&mut g, p, tokens.ids())?;
        Ok(LmOutput {
            logits: g.value(logits).clone(),
            hidden: g.value(hidden).clone(),
        })
    }

    /// Argmax next token after `tokens` (ties to the lowest id).
    pub fn greedy_next(&self, tokens: &TokenSequence) -> Result<u32> {
        let out = self.forward(None, tokens)?;
        let row = out.logits.row(out.logits.rows - 1);
        Ok(argmax(row) as u32)
    }

    pub fn to_container(&self) -> Container {
        let mut tensors = self.params.clone();
        tensors.freeze_all();
        Container {
            kind: CheckpointKind::LanguageModel,
            config: self.config.to_fields(),
            lm_ref: None,
            tensors,
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != CheckpointKind::LanguageModel {
            return Err(Error::Config("not a language model checkpoint".into()));
        }
        let [d_lm, n_layers, n_heads, context_length, vocab] = c.config[..] else {
            return Err(Error::Config(format!("expected 5 LM config fields, got {}", c.config.len())));
        };
        let config = LmConfig {
            d_lm: d_lm as usize,
            n_layers: n_layers as usize,
            n_heads: n_heads as usize,
            context_length: context_length as usize,
            vocab: vocab as usize,
        };
        config.validate()?;
        let reference = Self::init(config, 0)?;
        for (name, e) in reference.params.iter() {
            let t = c
                .tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
            if t.shape() != e.tensor.shape() {
                return Err(Error::Shape(format!(
                    "{name}: expected {:?}, found {:?}",
                    e.tensor.shape(),
                    t.shape()
                )));
            }
        }
        if c.tensors.len() != reference.params.len() {
            return Err(Error::Config("checkpoint has unexpected tensors".into()));
        }
        Ok(LanguageModel {
            config,
            params: c.tensors,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn content_hash(&self) -> [u8; 32] {
        sha256(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path).map(|_| ())
    }

    /// Loads a checkpoint (all tensors frozen) and returns its content hash.
    pub fn load(path: &Path) -> Result<(Self, [u8; 32])> {
        let (c, bytes) = Container::load(path)?;
        Ok((Self::from_container(c)?, sha256(&bytes)))
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub heldout_fraction: f64,
    pub clip_norm: f64,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 600,
            batch: 4,
            lr: 3e-3,
            seed: 0,
            heldout_fraction: 0.1,
            clip_norm: 1.0,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainReport {
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    /// (step, mean training loss over the logging window)
    pub curve: Vec<(usize, f64)>,
}

struct Stream {
    ids: Vec<u32>,
    line_starts: Vec<usize>,
}

fn build_stream(lines: &[&str], vocab: &Vocabulary) -> Stream {
    let mut ids = Vec::new();
    let mut line_starts = Vec::new();
    for line in lines {
        line_starts.push(ids.len());
        ids.push(BOS);
        ids.extend(vocab.encode(line).0);
        ids.push(EOS);
    }
    Stream { ids, line_starts }
}

fn window_loss(
    lm: &LanguageModel,
    window: &[u32],
    want_grads: bool,
) -> Result<(f64, Option<Gradients>)> {
    let mut g = Graph::new();
    let (logits, _) = lm.forward_graph(&mut g, None, &window[..window.len() - 1])?;
    let targets: Vec<usize> = window[1..].iter().map(|&t| t as usize).collect();
    let mask = vec![true; targets.len()];
    let loss = g.cross_entropy(logits, &targets, &mask)?;
    let grads = if want_grads { Some(g.backward(loss)?) } else { None };
    Ok((g.scalar(loss), grads))
}

fn heldout_loss(lm: &LanguageModel, stream: &Stream) -> Result<f64> {
    let l = lm.config.context_length + 1;
    let mut total = 0.0;
    let mut n = 0;
    let mut start = 0;
    while start + 1 < stream.ids.len() && n < 8 {
        let end = (start + l).min(stream.ids.len());
        total += window_loss(lm, &stream.ids[start..end], false)?.0;
        n += 1;
        start = end - 1;
    }
    Ok(if n == 0 { f64::NAN } else { total / n as f64 })
}

/// Next-token pretraining on a line corpus packed into a single stream of
/// `BOS line EOS` records; each training window starts at a line boundary.
pub fn pretrain_lm<S: AsRef<str>>(
    corpus: &[S],
    vocab: &Vocabulary,
    config: LmConfig,
    pc: &PretrainConfig,
) -> Result<(LanguageModel, PretrainReport)> {
    if pc.steps == 0 || pc.batch == 0 {
        return Err(Error::Config("pretraining needs steps ≥ 1 and batch ≥ 1".into()));
    }
    if vocab.len() > config.vocab {
        return Err(Error::Config(format!(
            "tokenizer has {} ids but the model vocabulary is {}",
            vocab.len(),
            config.vocab
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
    let mut lines: Vec<&str> = corpus.iter().map(AsRef::as_ref).collect();
    lines.shuffle(&mut rng);
    let n_held = ((lines.len() as f64) * pc.heldout_fraction).ceil() as usize;
    let n_held = n_held.min(lines.len().saturating_sub(1));
    let (train_lines, held_lines) = lines.split_at(lines.len() - n_held);
    let train = build_stream(train_lines, vocab);
    let held = build_stream(held_lines, vocab);

    let window = config.context_length + 1;
    if train.ids.len() < window {
        return Err(Error::Data(format!(
            "training corpus has {} tokens, shorter than one context window ({window})",
            train.ids.len()
        )));
    }
    let starts: Vec<usize> = train
        .line_starts
        .iter()
        .copied()
        .filter(|&s| s + window <= train.ids.len())
        .collect();

    let mut lm = LanguageModel::init(config, pc.seed)?;
    let initial = if held.ids.is_empty() { f64::NAN } else { heldout_loss(&lm, &held)? };
    let mut adam = AdamState::new(AdamConfig {
        lr: pc.lr,
        ..AdamConfig::default()
    });
    let mut curve = Vec::new();
    let mut window_sum = 0.0;
    let mut window_n = 0;
    for step in 1..=pc.steps {
        let mut grads = Gradients::default();
        let mut loss = 0.0;
        for _ in 0..pc.batch {
            let s = starts[rng.random_range(0..starts.len())];
            let (l, g) = window_loss(&lm, &train.ids[s..s + window], true)?;
            loss += l / pc.batch as f64;
            grads.accumulate(&g.expect("requested"), 1.0 / pc.batch as f64);
        }
        grads.clip_global_norm(pc.clip_norm);
        adam_step(&mut lm.params, &grads, &mut adam)?;
        window_sum += loss;
        window_n += 1;
        if step % pc.log_every.max(1) == 0 || step == pc.steps {
            curve.push((step, window_sum / window_n as f64));
            window_sum = 0.0;
            window_n = 0;
        }
    }
    let final_loss = if held.ids.is_empty() { f64::NAN } else { heldout_loss(&lm, &held)? };
    lm.freeze();
    Ok((
        lm,
        PretrainReport {
            initial_heldout_loss: initial,
            final_heldout_loss: final_loss,
            curve,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenSequence;

    fn tiny() -> LmConfig {
        LmConfig {
            d_lm: 16,
            n_layers: 1,
            n_heads: 2,
            context_length: 24,
            vocab: 300,
        }
    }

    #[test]
    fn embedding_examples() {
        let lm = LanguageModel::init(tiny(), 1).unwrap();
        assert_eq!(lm.embed_tokens(&TokenSequence(vec![])).unwrap().shape(), &[0, 16]);
        let two = lm.embed_tokens(&TokenSequence(vec![5, 5])).unwrap();
        assert_eq!(two.data()[..16], two.data()[16..]);
        assert!(matches!(
            lm.embed_tokens(&TokenSequence(vec![300])),
            Err(Error::OutOfVocabulary { id: 300, vocab: 300 })
        ));
    }

    #[test]
    fn every_embedding_row_is_its_own_nearest_neighbor() {
        let lm = LanguageModel::init(tiny(), 2).unwrap();
        let table = lm.params().get("lm.wte.weight").unwrap();
        let ids: Vec<u32> = (0..300).collect();
        let rows = lm.embed_tokens(&TokenSequence(ids)).unwrap();
        let d = 16;
        for i in 0..300 {
            let q = &rows.data()[i * d..(i + 1) * d];
            let nearest = (0..300)
                .min_by(|&a, &b| {
                    let da: f32 = table.data()[a * d..(a + 1) * d].iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f32 = table.data()[b * d..(b + 1) * d].iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(nearest, i);
        }
    }

    #[test]
    fn forward_shapes_and_normalization() {
        let lm = LanguageModel::init(tiny(), 3).unwrap();
        let out = lm.forward(None, &TokenSequence(vec![BOS])).unwrap();
        assert_eq!((out.logits.rows, out.logits.cols), (1, 300));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prefix = Mat::from_tensor(&Tensor::normal(&[4, 16], 1.0, &mut rng));
        let toks = TokenSequence((0..6).map(|_| rng.random_range(0..300)).collect());
        let out = lm.forward(Some(&prefix), &toks).unwrap();
        assert_eq!(out.hidden.rows, 10);
        for i in 0..out.logits.rows {
            let row = out.logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - max).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn context_overflow_is_an_error() {
        let lm = LanguageModel::init(tiny(), 3).unwrap();
        let prefix = Mat::zeros(20, 16);
        let toks = TokenSequence(vec![BOS; 5]);
        assert!(matches!(
            lm.forward(Some(&prefix), &toks),
            Err(Error::ContextOverflow { len: 25, context: 24 })
        ));
    }

    #[test]
    fn causal_mask_protects_earlier_positions() {
        let lm = LanguageModel::init(tiny(), 4).unwrap();
        let base = TokenSequence(vec![BOS, 10, 20, 30, 40, 50]);
        let a = lm.forward(None, &base).unwrap();
        for j in 1..base.len() {
            let mut t = base.clone();
            t.0[j] = 99;
            let b = lm.forward(None, &t).unwrap();
            for i in 0..j {
                assert_eq!(a.logits.row(i), b.logits.row(i), "position {i} changed when {j} was perturbed");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let lm = LanguageModel::init(tiny(), 5).unwrap();
        let bytes = lm.to_bytes();
        let back = LanguageModel::from_container(Container::from_bytes(&bytes).unwrap()).unwrap();
        assert!(back.params().bit_eq(&lm.to_container().tensors));
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn short_corpus_is_a_data_error() {
        let vocab = Vocabulary::byte_level();
        let cfg = LmConfig { vocab: 259, ..tiny() };
        let r = pretrain_lm(&["hi", "yo"], &vocab, cfg, &PretrainConfig { steps: 1, ..Default::default() });
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
