//! The speech-to-emotion-text model: an audio projection and audio mapper turn
//! a feature sequence into `k` prefix vectors, a text mapper turns the prompt
//! into another `k`, and the frozen language model continues from
//! `[audio; text]`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{hex, sha256, CheckpointKind, Container, LmReference};
use crate::dataio::AudioFeature;
use crate::error::{Error, Result};
use crate::layers;
use crate::lm::LanguageModel;
use crate::numerics::{Graph, Mat, ParameterTree, Var};
use crate::tokenizer::{TokenSequence, Vocabulary, BOS, EOS, PAD};

pub const AUDIO_PROJECTION: &str = "audio_projection";
pub const AUDIO_SEQUENCE: &str = "audio_mapper.sequence";
pub const AUDIO_TRANSFORMER: &str = "audio_mapper.transformer";
pub const TEXT_TRANSFORMER: &str = "text_mapper.transformer";

pub const DEFAULT_MAX_TOKENS: usize = 20;

/// Frozen language model plus its tokenizer and checkpoint identity.
#[derive(Debug)]
pub struct Backbone {
    lm: LanguageModel,
    vocab: Vocabulary,
    hash: [u8; 32],
    path: Option<PathBuf>,
}

impl Backbone {
    pub fn new(mut lm: LanguageModel, vocab: Vocabulary) -> Result<Self> {
        if vocab.len() > lm.config().vocab {
            return Err(Error::Config(format!(
                "tokenizer has {} ids but the model vocabulary is {}",
                vocab.len(),
                lm.config().vocab
            )));
        }
        lm.freeze();
        let hash = lm.content_hash();
        Ok(Backbone {
            lm,
            vocab,
            hash,
            path: None,
        })
    }

    pub fn vocab_path(lm_path: &Path) -> PathBuf {
        lm_path.with_extension("vocab")
    }

    /// Writes the checkpoint and its `.vocab` sidecar, and remembers the location.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.lm.save(path)?;
        self.vocab.save(&Self::vocab_path(path))?;
        self.path = Some(std::fs::canonicalize(path).map_err(|e| Error::io(path, e))?);
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (lm, hash) = LanguageModel::load(path)?;
        let vocab = Vocabulary::load(&Self::vocab_path(path))?;
        let mut b = Self::new(lm, vocab)?;
        debug_assert_eq!(b.hash, hash);
        b.hash = hash;
        b.path = Some(std::fs::canonicalize(path).map_err(|e| Error::io(path, e))?);
        Ok(b)
    }

    pub fn lm(&self) -> &LanguageModel {
        &self.lm
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn hash(&self) -> [u8; 32] {
        self.hash
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelmConfig {
    pub d_a: usize,
    /// Width of the audio projection output; 0 means "same as d_lm".
    pub d_proj: usize,
    /// Prefix rows per modality.
    pub k: usize,
    pub mapper_heads: usize,
}

impl Default for SelmConfig {
    fn default() -> Self {
        SelmConfig {
            d_a: 32,
            d_proj: 0,
            k: 10,
            mapper_heads: 2,
        }
    }
}

/// Ordered, non-empty list of unique class names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSet(Vec<String>);

impl ClassSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Input("class set is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Input(format!("class {n:?} listed twice")));
            }
        }
        Ok(ClassSet(names))
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }
}

/// `2k × d_lm`: audio latents in rows `0..k`, text latents in rows `k..2k`.
#[derive(Clone, Debug)]
pub struct Prefix {
    mat: Mat,
    k: usize,
}

impl Prefix {
    pub fn mat(&self) -> &Mat {
        &self.mat
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

pub fn build_prefix(audio: &Mat, text: &Mat) -> Result<Prefix> {
    if audio.rows != text.rows || audio.cols != text.cols || audio.rows == 0 {
        return Err(Error::Shape(format!(
            "audio latents {}×{} vs text latents {}×{}",
            audio.rows, audio.cols, text.rows, text.cols
        )));
    }
    let mut data = audio.data.clone();
    data.extend_from_slice(&text.data);
    Ok(Prefix {
        mat: Mat::from_vec(2 * audio.rows, audio.cols, data),
        k: audio.rows,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated ids after BOS, including the closing EOS when there is one.
    pub tokens: TokenSequence,
    pub logprob: f64,
    pub finished: bool,
}

/// Precomputed class-name embeddings for repeated [`SelmModel::map_to_class`] calls.
#[derive(Clone, Debug)]
pub struct ClassEmbeddings {
    classes: ClassSet,
    rows: Vec<Vec<f64>>,
}

impl ClassEmbeddings {
    pub fn classes(&self) -> &ClassSet {
        &self.classes
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Index of the row most cosine-similar to `query`; ties go to the lowest index.
pub fn cosine_argmax(query: &[f64], rows: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, r) in rows.iter().enumerate() {
        let s = cosine(query, r);
        if s > best_sim {
            best = i;
            best_sim = s;
        }
    }
    best
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - z).collect()
}

#[derive(Clone, Debug)]
pub struct SelmModel {
    backbone: Arc<Backbone>,
    config: SelmConfig,
    params: ParameterTree,
}

impl SelmModel {
    /// Fresh trainable mappers around a frozen backbone.
    pub fn new(backbone: Arc<Backbone>, config: SelmConfig, seed: u64) -> Result<Self> {
        let config = Self::resolve(config, &backbone)?;
        let d = backbone.lm.config().d_lm;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterTree::new();
        layers::init_linear(&mut p, &format!("{AUDIO_PROJECTION}.linear1"), config.d_a, config.d_proj, false, &mut rng)?;
        layers::init_linear(&mut p, &format!("{AUDIO_PROJECTION}.linear2"), config.d_proj, config.d_proj, false, &mut rng)?;
        layers::init_linear(&mut p, AUDIO_SEQUENCE, config.d_proj, config.k * d, false, &mut rng)?;
        layers::init_block(&mut p, AUDIO_TRANSFORMER, d, false, &mut rng)?;
        layers::init_block(&mut p, TEXT_TRANSFORMER, d, false, &mut rng)?;
        Ok(SelmModel {
            backbone,
            config,
            params: p,
        })
    }

    fn resolve(mut config: SelmConfig, backbone: &Backbone) -> Result<SelmConfig> {
        let lm = backbone.lm.config();
        if config.d_proj == 0 {
            config.d_proj = lm.d_lm;
        }
        if config.d_a == 0 || config.k == 0 {
            return Err(Error::Config("d_a and k must be positive".into()));
        }
        if 2 * config.k >= lm.context_length {
            return Err(Error::Config(format!(
                "prefix of 2·{} rows leaves no room in a context of {}",
                config.k, lm.context_length
            )));
        }
        if config.mapper_heads == 0 || lm.d_lm % config.mapper_heads != 0 {
            return Err(Error::Config(format!(
                "mapper heads {} must divide d_lm {}",
                config.mapper_heads, lm.d_lm
            )));
        }
        Ok(config)
    }

    pub fn config(&self) -> &SelmConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn lm(&self) -> &LanguageModel {
        &self.backbone.lm
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.backbone.vocab
    }

    /// Mapper parameters (the only tensors training may touch).
    pub fn params(&self) -> &ParameterTree {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterTree {
        &mut self.params
    }

    /// Mapper parameters and the frozen language model in one tree.
    pub fn full_parameter_tree(&self) -> ParameterTree {
        let mut all = self.params.clone();
        for (name, e) in self.backbone.lm.params().iter() {
            all.insert(name, e.tensor.clone(), true).expect("disjoint names");
        }
        all
    }

    fn d_lm(&self) -> usize {
        self.backbone.lm.config().d_lm
    }

    fn check_feature(&self, x: &AudioFeature) -> Result<()> {
        if x.dim() != self.config.d_a {
            return Err(Error::Shape(format!(
                "feature width {} but the audio projection expects {}",
                x.dim(),
                self.config.d_a
            )));
        }
        Ok(())
    }

    pub(crate) fn project_graph(&self, g: &mut Graph, x: &AudioFeature) -> Result<Var> {
        self.check_feature(x)?;
        let xv = g.constant(Mat::from_tensor(x.tensor()));
        let h = layers::linear(g, &self.params, &format!("{AUDIO_PROJECTION}.linear1"), xv)?;
        let h = g.gelu(h);
        let h = layers::linear(g, &self.params, &format!("{AUDIO_PROJECTION}.linear2"), h)?;
        Ok(g.mean_rows(h))
    }

    pub(crate) fn audio_map_graph(&self, g: &mut Graph, pooled: Var) -> Result<Var> {
        let (k, d) = (self.config.k, self.d_lm());
        if g.value(pooled).data.len() != self.config.d_proj {
            return Err(Error::Shape(format!(
                "pooled width {} != d_proj {}",
                g.value(pooled).data.len(),
                self.config.d_proj
            )));
        }
        let pooled = g.reshape(pooled, 1, self.config.d_proj);
        let s = layers::linear(g, &self.params, AUDIO_SEQUENCE, pooled)?;
        let s = g.reshape(s, k, d);
        layers::block(g, &self.params, AUDIO_TRANSFORMER, s, self.config.mapper_heads, false)
    }

    /// Prompt ids padded with PAD or truncated to exactly `k`.
    pub fn prompt_ids(&self, prompt: &str) -> Result<Vec<u32>> {
        let mut ids = self.backbone.vocab.encode(prompt).0;
        if ids.is_empty() {
            return Err(Error::Input("prompt is empty".into()));
        }
        ids.resize(self.config.k, PAD);
        Ok(ids)
    }

    pub(crate) fn text_map_graph(&self, g: &mut Graph, prompt_ids: &[u32]) -> Result<Var> {
        let emb = self.backbone.lm.embed(g, prompt_ids)?;
        layers::block(g, &self.params, TEXT_TRANSFORMER, emb, self.config.mapper_heads, false)
    }

    pub(crate) fn prefix_graph(&self, g: &mut Graph, x: &AudioFeature, prompt_ids: &[u32]) -> Result<Var> {
        let pooled = self.project_graph(g, x)?;
        let a = self.audio_map_graph(g, pooled)?;
        let t = self.text_map_graph(g, prompt_ids)?;
        Ok(g.concat_rows(&[a, t]))
    }

    /// Per-frame linear → GELU → linear, mean-pooled to 1 × d_proj.
    pub fn audio_project(&self, x: &AudioFeature) -> Result<Mat> {
        let mut g = Graph::new();
        let v = self.project_graph(&mut g, x)?;
        Ok(g.value(v).clone())
    }

    /// Pooled vector → `k × d_lm` audio latents.
    pub fn audio_map(&self, pooled: &Mat) -> Result<Mat> {
        if !pooled.is_finite() {
            return Err(Error::InvalidValue("pooled audio vector is not finite".into()));
        }
        let mut g = Graph::new();
        let p = g.constant(pooled.clone());
        let v = self.audio_map_graph(&mut g, p)?;
        Ok(g.value(v).clone())
    }

    /// Prompt → `k × d_lm` text latents.
    pub fn text_map(&self, prompt: &str) -> Result<Mat> {
        let ids = self.prompt_ids(prompt)?;
        let mut g = Graph::new();
        let v = self.text_map_graph(&mut g, &ids)?;
        Ok(g.value(v).clone())
    }

    pub fn prefix(&self, x: &AudioFeature, prompt: &str) -> Result<Prefix> {
        let a = self.audio_map(&self.audio_project(x)?)?;
        build_prefix(&a, &self.text_map(prompt)?)
    }

    /// Mean next-token cross-entropy of `target` (then EOS) given the prefix;
    /// only positions from BOS onwards are scored.
    pub(crate) fn loss_graph(
        &self,
        g: &mut Graph,
        x: &AudioFeature,
        prompt_ids: &[u32],
        target_ids: &[u32],
    ) -> Result<Var> {
        let prefix = self.prefix_graph(g, x, prompt_ids)?;
        let mut input = Vec::with_capacity(target_ids.len() + 1);
        input.push(BOS);
        input.extend_from_slice(target_ids);
        let lm = &self.backbone.lm;
        let n_prefix = g.value(prefix).rows;
        let total = n_prefix + input.len();
        if total > lm.config().context_length {
            return Err(Error::ContextOverflow {
                len: total,
                context: lm.config().context_length,
            });
        }
        let emb = lm.embed(g, &input)?;
        let x = g.concat_rows(&[prefix, emb]);
        let h = lm.hidden(g, x)?;
        let h = g.slice_rows(h, n_prefix, total);
        let logits = lm.head(g, h)?;
        let mut targets: Vec<usize> = target_ids.iter().map(|&t| t as usize).collect();
        targets.push(EOS as usize);
        let mask = vec![true; targets.len()];
        g.cross_entropy(logits, &targets, &mask)
    }

    /// Log-probabilities of the next token after `[prefix; BOS, tokens]`.
    fn next_logprobs(&self, prefix: &Prefix, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut seq = Vec::with_capacity(tokens.len() + 1);
        seq.push(BOS);
        seq.extend_from_slice(tokens);
        let out = self.backbone.lm.forward(Some(prefix.mat()), &TokenSequence(seq))?;
        Ok(log_softmax(out.logits.row(out.logits.rows - 1)))
    }

    /// Length-unnormalized beam search from BOS. Returns the final beam, best
    /// first; equal scores keep expansion order (hypothesis order, then token id).
    pub fn beam_search_prefix(&self, prefix: &Prefix, beam: usize, max_tokens: usize) -> Result<Vec<BeamHypothesis>> {
        if beam == 0 || max_tokens == 0 {
            return Err(Error::Input("beam and max_tokens must be at least 1".into()));
        }
        let context = self.backbone.lm.config().context_length;
        let needed = prefix.mat().rows + max_tokens;
        if needed > context {
            return Err(Error::ContextOverflow { len: needed, context });
        }
        let mut hyps = vec![BeamHypothesis {
            tokens: TokenSequence(Vec::new()),
            logprob: 0.0,
            finished: false,
        }];
        while hyps.iter().any(|h| !h.finished) {
            let mut candidates = Vec::new();
            for h in &hyps {
                if h.finished {
                    candidates.push(h.clone());
                    continue;
                }
                let lp = self.next_logprobs(prefix, h.tokens.ids())?;
                for (tok, &l) in lp.iter().enumerate() {
                    let score = h.logprob + l;
                    if !score.is_finite() {
                        continue;
                    }
                    let mut tokens = h.tokens.0.clone();
                    tokens.push(tok as u32);
                    let finished = tok as u32 == EOS || tokens.len() >= max_tokens;
                    candidates.push(BeamHypothesis {
                        tokens: TokenSequence(tokens),
                        logprob: score,
                        finished,
                    });
                }
            }
            if candidates.is_empty() {
                return Err(Error::Numerical("no hypothesis has a finite log-probability".into()));
            }
            // stable: ties keep expansion order
            candidates.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
            candidates.truncate(beam);
            hyps = candidates;
        }
        Ok(hyps)
    }

    pub fn beam_search(&self, x: &AudioFeature, prompt: &str, beam: usize, max_tokens: usize) -> Result<Vec<BeamHypothesis>> {
        let prefix = self.prefix(x, prompt)?;
        self.beam_search_prefix(&prefix, beam, max_tokens)
    }

    /// Repeated argmax until EOS or `max_tokens`.
    pub fn greedy_prefix(&self, prefix: &Prefix, max_tokens: usize) -> Result<BeamHypothesis> {
        let mut tokens = Vec::new();
        let mut logprob = 0.0;
        loop {
            let lp = self.next_logprobs(prefix, &tokens)?;
            let tok = crate::lm::argmax(&lp);
            logprob += lp[tok];
            tokens.push(tok as u32);
            if tok as u32 == EOS || tokens.len() >= max_tokens {
                break;
            }
        }
        Ok(BeamHypothesis {
            tokens: TokenSequence(tokens),
            logprob,
            finished: true,
        })
    }

    pub fn decode(&self, h: &BeamHypothesis) -> Result<String> {
        self.backbone.vocab.decode(&h.tokens)
    }

    pub fn generate(&self, x: &AudioFeature, prompt: &str, beam: usize, max_tokens: usize) -> Result<String> {
        let best = self.beam_search(x, prompt, beam, max_tokens)?;
        self.decode(&best[0])
    }

    /// Mean of the frozen LM's final hidden states over the text tokens of
    /// `[BOS, text]`; empty text uses the BOS position.
    pub fn text_embedding(&self, text: &str) -> Result<Vec<f64>> {
        let ids = self.backbone.vocab.encode(text).0;
        let mut seq = vec![BOS];
        seq.extend_from_slice(&ids);
        let out = self.backbone.lm.forward(None, &TokenSequence(seq))?;
        let h = &out.hidden;
        let rows = if ids.is_empty() { 0..1 } else { 1..h.rows };
        let n = rows.len() as f64;
        let mut mean = vec![0.0; h.cols];
        for i in rows {
            for (m, v) in mean.iter_mut().zip(h.row(i)) {
                *m += v / n;
            }
        }
        Ok(mean)
    }

    pub fn class_embeddings(&self, classes: &ClassSet) -> Result<ClassEmbeddings> {
        let rows = classes
            .names()
            .iter()
            .map(|c| self.text_embedding(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassEmbeddings {
            classes: classes.clone(),
            rows,
        })
    }

    pub fn map_to_class_with(&self, generated: &str, classes: &ClassEmbeddings) -> Result<usize> {
        let q = self.text_embedding(generated)?;
        Ok(cosine_argmax(&q, &classes.rows))
    }

    pub fn map_to_class(&self, generated: &str, classes: &ClassSet) -> Result<usize> {
        self.map_to_class_with(generated, &self.class_embeddings(classes)?)
    }

    fn config_fields(&self) -> Vec<u32> {
        [self.config.d_a, self.config.d_proj, self.config.k, self.config.mapper_heads, self.d_lm()]
            .iter()
            .map(|&v| v as u32)
            .collect()
    }

    pub fn to_container(&self) -> Result<Container> {
        let path = self
            .backbone
            .path
            .as_ref()
            .ok_or_else(|| Error::Config("the language model must be saved before the mappers".into()))?;
        let mut tensors = self.params.clone();
        tensors.freeze_all();
        Ok(Container {
            kind: CheckpointKind::Mappers,
            config: self.config_fields(),
            lm_ref: Some(LmReference {
                sha256: self.backbone.hash,
                path: path.to_string_lossy().into_owned(),
            }),
            tensors,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path).map(|_| ())
    }

    /// Rebuilds a model from mapper tensors, checking them against `backbone`.
    pub fn from_container(c: Container, backbone: Arc<Backbone>) -> Result<Self> {
        if c.kind != CheckpointKind::Mappers {
            return Err(Error::Config("not a mapper checkpoint".into()));
        }
        let lm_ref = c.lm_ref.as_ref().expect("mapper checkpoints carry an LM reference");
        if lm_ref.sha256 != backbone.hash {
            return Err(Error::HashMismatch {
                expected: hex(&lm_ref.sha256),
                found: hex(&backbone.hash),
            });
        }
        let [d_a, d_proj, k, heads, d_lm] = c.config[..] else {
            return Err(Error::Config(format!("expected 5 mapper config fields, got {}", c.config.len())));
        };
        if d_lm as usize != backbone.lm.config().d_lm {
            return Err(Error::Shape(format!(
                "mappers were built for d_lm {d_lm}, backbone has {}",
                backbone.lm.config().d_lm
            )));
        }
        let config = SelmConfig {
            d_a: d_a as usize,
            d_proj: d_proj as usize,
            k: k as usize,
            mapper_heads: heads as usize,
        };
        let reference = Self::new(backbone.clone(), config, 0)?;
        if c.tensors.len() != reference.params.len() {
            return Err(Error::Config("checkpoint has unexpected tensors".into()));
        }
        let mut params = c.tensors;
        for (name, e) in reference.params.iter() {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
            if t.shape() != e.tensor.shape() {
                return Err(Error::Shape(format!("{name}: expected {:?}, found {:?}", e.tensor.shape(), t.shape())));
            }
            params.set_frozen(name, false)?;
        }
        Ok(SelmModel {
            backbone,
            config: reference.config,
            params,
        })
    }

    /// Loads mappers and the language model they reference, verifying its hash.
    /// A recorded LM path that no longer exists is retried next to `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let (c, _) = Container::load(path)?;
        let lm_ref = c
            .lm_ref
            .clone()
            .ok_or_else(|| Error::Config("not a mapper checkpoint".into()))?;
        let mut lm_path = PathBuf::from(&lm_ref.path);
        if !lm_path.exists() {
            if let (Some(dir), Some(name)) = (path.parent(), lm_path.file_name()) {
                lm_path = dir.join(name);
            }
        }
        let backbone = Backbone::load(&lm_path)?;
        Self::from_container(c, Arc::new(backbone))
    }

    /// Mapper-only checkpoint against an already-loaded backbone.
    pub fn load_with(path: &Path, backbone: Arc<Backbone>) -> Result<Self> {
        let (c, _) = Container::load(path)?;
        Self::from_container(c, backbone)
    }

    pub fn content_hash(&self) -> Result<[u8; 32]> {
        Ok(sha256(&self.to_bytes()?))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::numerics::gelu_scalar;
    use rand::Rng;

    pub(crate) fn tiny_backbone(seed: u64) -> Arc<Backbone> {
        let cfg = LmConfig {
            d_lm: 16,
            n_layers: 1,
            n_heads: 2,
            context_length: 40,
            vocab: 300,
        };
        let corpus = ["this person is feeling emotion of happy", "feeling emotion of sad"];
        let vocab = Vocabulary::train(&corpus, 300).unwrap();
        Arc::new(Backbone::new(LanguageModel::init(cfg, seed).unwrap(), vocab).unwrap())
    }

    pub(crate) fn tiny_model(seed: u64) -> SelmModel {
        let cfg = SelmConfig {
            d_a: 6,
            k: 4,
            ..SelmConfig::default()
        };
        SelmModel::new(tiny_backbone(seed), cfg, seed + 100).unwrap()
    }

    pub(crate) fn random_feature(frames: usize, dim: usize, seed: u64) -> AudioFeature {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioFeature::new(frames, dim, (0..frames * dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()).unwrap()
    }

    fn w(tree: &ParameterTree, name: &str) -> (Vec<f64>, usize, usize) {
        let t = tree.get(name).unwrap();
        let (r, c) = t.matrix_dims();
        (t.data().iter().map(|&v| v as f64).collect(), r, c)
    }

    pub(crate) fn affine(x: &[f64], tree: &ParameterTree, prefix: &str) -> Vec<f64> {
        let (wd, r, c) = w(tree, &format!("{prefix}.weight"));
        let (b, _, _) = w(tree, &format!("{prefix}.bias"));
        assert_eq!(x.len(), r);
        (0..c)
            .map(|j| b[j] + (0..r).map(|i| x[i] * wd[i * c + j]).sum::<f64>())
            .collect()
    }

    pub(crate) fn ln(x: &[f64], tree: &ParameterTree, prefix: &str) -> Vec<f64> {
        let (g, _, _) = w(tree, &format!("{prefix}.weight"));
        let (b, _, _) = w(tree, &format!("{prefix}.bias"));
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
            .collect()
    }

    /// Straight-line pre-LN block over a list of rows.
    pub(crate) fn block_oracle(rows: &[Vec<f64>], tree: &ParameterTree, p: &str, heads: usize, causal: bool) -> Vec<Vec<f64>> {
        let d = rows[0].len();
        let hd = d / heads;
        let qkv: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| affine(&ln(r, tree, &format!("{p}.ln1")), tree, &format!("{p}.attn.qkv")))
            .collect();
        let n = rows.len();
        let mut attn = vec![vec![0.0; d]; n];
        for h in 0..heads {
            for i in 0..n {
                let upto = if causal { i + 1 } else { n };
                let scores: Vec<f64> = (0..upto)
                    .map(|j| {
                        (0..hd).map(|c| qkv[i][h * hd + c] * qkv[j][d + h * hd + c]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..hd {
                    attn[i][h * hd + c] = (0..upto).map(|j| e[j] / z * qkv[j][2 * d + h * hd + c]).sum();
                }
            }
        }
        rows.iter()
            .zip(&attn)
            .map(|(r, a)| {
                let proj = affine(a, tree, &format!("{p}.attn.proj"));
                let x: Vec<f64> = r.iter().zip(&proj).map(|(u, v)| u + v).collect();
                let h = affine(&ln(&x, tree, &format!("{p}.ln2")), tree, &format!("{p}.mlp.fc"));
                let h: Vec<f64> = h.iter().map(|&v| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()))).collect();
                let h = affine(&h, tree, &format!("{p}.mlp.proj"));
                x.iter().zip(&h).map(|(u, v)| u + v).collect()
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn audio_project_matches_straight_line_oracle() {
        let m = tiny_model(1);
        let x = random_feature(5, 6, 7);
        let got = m.audio_project(&x).unwrap();
        let p = m.params();
        let mut mean = vec![0.0; 16];
        for i in 0..5 {
            let row: Vec<f64> = x.row(i).iter().map(|&v| v as f64).collect();
            let h: Vec<f64> = affine(&row, p, "audio_projection.linear1")
                .iter()
                .map(|&v| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt())))
                .collect();
            let o = affine(&h, p, "audio_projection.linear2");
            mean.iter_mut().zip(&o).for_each(|(a, b)| *a += b / 5.0);
        }
        close(&got.data, &mean, 1e-9);
        assert!((gelu_scalar(1.0) - 0.5 * (1.0 + libm::erf(1.0 / 2f64.sqrt()))).abs() < 1e-15);
    }

    #[test]
    fn audio_project_pooling_properties() {
        let m = tiny_model(2);
        let row: Vec<f32> = (0..6).map(|i| i as f32 * 0.3 - 0.7).collect();
        let rep = AudioFeature::new(4, 6, row.repeat(4)).unwrap();
        let one = AudioFeature::new(1, 6, row).unwrap();
        close(&m.audio_project(&rep).unwrap().data, &m.audio_project(&one).unwrap().data, 1e-12);

        let x = random_feature(6, 6, 3);
        let mut perm = Vec::new();
        for i in [3, 0, 5, 1, 4, 2] {
            perm.extend_from_slice(x.row(i));
        }
        let px = AudioFeature::new(6, 6, perm).unwrap();
        close(&m.audio_project(&x).unwrap().data, &m.audio_project(&px).unwrap().data, 1e-12);

        let wrong = random_feature(3, 5, 1);
        assert!(matches!(m.audio_project(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn audio_map_shapes_and_zero_input() {
        let backbone = {
            let cfg = LmConfig { d_lm: 64, n_layers: 1, n_heads: 2, context_length: 40, vocab: 300 };
            Arc::new(Backbone::new(LanguageModel::init(cfg, 0).unwrap(), Vocabulary::byte_level()).unwrap())
        };
        let m = SelmModel::new(backbone, SelmConfig::default(), 0).unwrap();
        let out = m.audio_map(&Mat::zeros(1, 64)).unwrap();
        assert_eq!((out.rows, out.cols), (10, 64));
        // zero input and zero biases: every sequence row is zero, so the block
        // sees identical rows and must return identical rows
        let again = m.audio_map(&Mat::zeros(1, 64)).unwrap();
        assert_eq!(out, again);
        for i in 1..10 {
            assert_eq!(out.row(i), out.row(0));
        }
        let oracle = block_oracle(&vec![vec![0.0; 64]; 10], m.params(), AUDIO_TRANSFORMER, 2, false);
        close(out.row(0), &oracle[0], 1e-9);
        assert!(matches!(m.audio_map(&Mat::zeros(1, 8)), Err(Error::Shape(_))));
    }

    #[test]
    fn text_map_matches_oracle_and_has_fixed_shape() {
        let m = tiny_model(4);
        for prompt in ["This person is", "a", "This person is feeling something rather long today"] {
            let t = m.text_map(prompt).unwrap();
            assert_eq!((t.rows, t.cols), (4, 16));
        }
        let ids = m.prompt_ids("This person is").unwrap();
        let table = m.lm().params().get("lm.wte.weight").unwrap();
        let rows: Vec<Vec<f64>> = ids
            .iter()
            .map(|&i| table.data()[i as usize * 16..(i as usize + 1) * 16].iter().map(|&v| v as f64).collect())
            .collect();
        let oracle = block_oracle(&rows, m.params(), TEXT_TRANSFORMER, 2, false);
        let got = m.text_map("This person is").unwrap();
        for i in 0..4 {
            close(got.row(i), &oracle[i], 1e-9);
        }
        assert!(matches!(m.text_map(""), Err(Error::Input(_))));
        assert_eq!(m.text_map("ab").unwrap(), m.text_map("ab").unwrap());
        assert_ne!(m.text_map("ab").unwrap(), m.text_map("ba").unwrap());
    }

    #[test]
    fn prefix_layout() {
        let m = tiny_model(5);
        let p = m.prefix(&random_feature(3, 6, 1), "This person is").unwrap();
        assert_eq!((p.mat().rows, p.mat().cols), (8, 16));

        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = Mat::from_vec(2, 3, vec![-1.0, -2.0, -3.0, -4.0, -5.0, -6.0]);
        let p = build_prefix(&a, &t).unwrap();
        assert_eq!(&p.mat().data[..6], &a.data[..]);
        assert_eq!(&p.mat().data[6..], &t.data[..]);
        assert_ne!(build_prefix(&t, &a).unwrap().mat().data, p.mat().data);
        assert!(matches!(build_prefix(&a, &Mat::zeros(2, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn trainable_and_frozen_sets_are_exact() {
        let m = tiny_model(6);
        let all = m.full_parameter_tree();
        for (name, e) in all.iter() {
            let mapper = ["audio_projection.", "audio_mapper.", "text_mapper."].iter().any(|p| name.starts_with(p));
            assert_eq!(!e.frozen, mapper, "{name}");
            assert!(mapper || name.starts_with("lm."), "{name}");
        }
        assert_eq!(m.params().trainable_names().len(), m.params().len());
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..5 {
            let m = tiny_model(seed);
            let p = m.prefix(&random_feature(4, 6, seed), "This person is").unwrap();
            let g = m.greedy_prefix(&p, 6).unwrap();
            let b = m.beam_search_prefix(&p, 1, 6).unwrap();
            assert_eq!(b[0].tokens, g.tokens);
            assert!((b[0].logprob - g.logprob).abs() < 1e-12);
            let b3 = m.beam_search_prefix(&p, 3, 6).unwrap();
            assert_eq!(b3.len(), 3);
            assert!(b3.windows(2).all(|w| w[0].logprob >= w[1].logprob));
            assert!(b3.iter().all(|h| h.finished));
        }
    }

    #[test]
    fn beam_logprob_is_sum_of_steps() {
        let m = tiny_model(9);
        let p = m.prefix(&random_feature(4, 6, 2), "This person is").unwrap();
        let h = &m.beam_search_prefix(&p, 2, 5).unwrap()[0];
        let mut sum = 0.0;
        for i in 0..h.tokens.len() {
            let lp = m.next_logprobs(&p, &h.tokens.0[..i]).unwrap();
            sum += lp[h.tokens.0[i] as usize];
        }
        assert!((sum - h.logprob).abs() < 1e-9);
        assert!(h.tokens.len() == 5 || *h.tokens.0.last().unwrap() == EOS);
    }

    #[test]
    fn generate_errors() {
        let m = tiny_model(1);
        let x = random_feature(2, 6, 0);
        assert!(matches!(m.generate(&x, "hi", 0, 5), Err(Error::Input(_))));
        assert!(matches!(m.generate(&x, "hi", 1, 0), Err(Error::Input(_))));
        assert!(matches!(m.generate(&x, "hi", 1, 40), Err(Error::ContextOverflow { .. })));
    }

    #[test]
    fn map_to_class_contracts() {
        let m = tiny_model(3);
        let classes = ClassSet::new(["happy", "sad", "angry", "neutral"]).unwrap();
        for (i, c) in classes.names().iter().enumerate() {
            assert_eq!(m.map_to_class(c, &classes).unwrap(), i);
        }
        let single = ClassSet::new(["calm"]).unwrap();
        assert_eq!(m.map_to_class("anything at all", &single).unwrap(), 0);
        assert!(m.map_to_class("", &classes).is_ok());

        // brute force over classes
        let q = m.text_embedding("emotion of happy").unwrap();
        let sims: Vec<f64> = classes
            .names()
            .iter()
            .map(|c| {
                let e = m.text_embedding(c).unwrap();
                let dot: f64 = q.iter().zip(&e).map(|(a, b)| a * b).sum();
                dot / (q.iter().map(|a| a * a).sum::<f64>().sqrt() * e.iter().map(|a| a * a).sum::<f64>().sqrt())
            })
            .collect();
        let best = (0..4).fold(0, |b, i| if sims[i] > sims[b] { i } else { b });
        assert_eq!(m.map_to_class("emotion of happy", &classes).unwrap(), best);

        let perm = ClassSet::new(["neutral", "angry", "happy", "sad"]).unwrap();
        let label = &classes.names()[best];
        assert_eq!(&perm.names()[m.map_to_class("emotion of happy", &perm).unwrap()], label);

        assert!(matches!(ClassSet::new(Vec::<String>::new()), Err(Error::Input(_))));
        assert!(matches!(ClassSet::new(["a", "a"]), Err(Error::Input(_))));
    }

    #[test]
    fn cosine_argmax_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let q: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
            let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
            let best = cosine_argmax(&q, &rows);
            let s: f64 = rng.random_range(0.01..100.0);
            let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
            let sq: Vec<f64> = q.iter().map(|v| v * s).collect();
            assert_eq!(cosine_argmax(&sq, &scaled), best);
        }
        assert_eq!(cosine_argmax(&[1.0, 0.0], &[vec![1.0, 1.0], vec![2.0, 2.0]]), 0);
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_model(8);
        let mut backbone = Backbone::new(m.lm().clone(), m.vocab().clone()).unwrap();
        let lm_path = dir.path().join("lm.ckpt");
        backbone.save(&lm_path).unwrap();
        let m = SelmModel {
            backbone: Arc::new(backbone),
            ..m
        };
        let path = dir.path().join("selm.ckpt");
        m.save(&path).unwrap();
        let back = SelmModel::load(&path).unwrap();
        assert!(back.params().bit_eq(m.params()));
        assert_eq!(back.to_bytes().unwrap(), m.to_bytes().unwrap());

        let other = tiny_backbone(99);
        assert!(matches!(SelmModel::load_with(&path, other), Err(Error::HashMismatch { .. })));

        // tampered LM on disk
        let mut lm = LanguageModel::from_container(m.lm().to_container()).unwrap();
        let t = lm.to_container();
        let mut tensors = t.tensors.clone();
        tensors.get_mut("lm.head.weight").unwrap().data_mut()[0] += 1.0;
        lm = LanguageModel::from_container(Container { tensors, ..t }).unwrap();
        lm.save(&lm_path).unwrap();
        assert!(matches!(SelmModel::load(&path), Err(Error::HashMismatch { .. })));
    }
}
