//! Browser demo. Each operation is a plain function returning a serializable
//! value; the `#[wasm_bindgen]` wrappers at the bottom hand JSON to the page.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use selm::dataio::{lm_corpus, six_classes, synthesize, Split, SynthConfig};
use selm::lm::{pretrain_lm, LmConfig, PretrainConfig};
use selm::model::{cosine, Backbone, ClassSet, SelmConfig, SelmModel};
use selm::oracle::{factored_rank, posterior_rank, JointDistribution};
use selm::tokenizer::Vocabulary;
use selm::Error;

#[derive(Debug, Serialize)]
pub struct Query {
    pub x: usize,
    pub w: usize,
    /// p(e | x, w) for every e; empty when the conditional is undefined.
    pub posterior: Vec<f64>,
    pub posterior_rank: Option<usize>,
    pub factored_rank: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct OracleView {
    pub dims: (usize, usize, usize),
    pub queries: Vec<Query>,
    pub agree: usize,
    pub undefined: usize,
}

/// Random joint p(e, x, w) and both rankings for every (x, w).
pub fn oracle_view(n_e: usize, n_x: usize, n_w: usize, sparsity: f64, seed: u64) -> selm::Result<OracleView> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidValue("sparsity must be in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = JointDistribution::random(n_e, n_x, n_w, sparsity, &mut rng)?;
    let mut view = OracleView {
        dims: j.dims(),
        queries: Vec::new(),
        agree: 0,
        undefined: 0,
    };
    for x in 0..n_x {
        for w in 0..n_w {
            let evidence = j.p_xw(x, w);
            let a = posterior_rank(&j, x, w).ok();
            let b = factored_rank(&j, x, w).ok();
            match (a, b) {
                (Some(a), Some(b)) if a == b => view.agree += 1,
                (None, None) => view.undefined += 1,
                _ => {}
            }
            view.queries.push(Query {
                x,
                w,
                posterior: if evidence > 0.0 {
                    (0..n_e).map(|e| j.p(e, x, w) / evidence).collect()
                } else {
                    Vec::new()
                },
                posterior_rank: a,
                factored_rank: b,
            });
        }
    }
    Ok(view)
}

#[derive(Debug, Serialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub class: usize,
    pub shifted: bool,
}

#[derive(Debug, Serialize)]
pub struct ShiftView {
    pub classes: Vec<String>,
    pub points: Vec<Point>,
    pub source_ua: f64,
    pub shifted_ua: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Source and shifted synthetic domains projected onto the shift direction and
/// one class axis, plus the UA of a nearest-centroid classifier fit on source.
pub fn shift_view(delta: f64, per_class: usize, seed: u64) -> selm::Result<ShiftView> {
    let source_cfg = SynthConfig {
        per_class,
        seed,
        ..SynthConfig::default()
    };
    let shifted_cfg = SynthConfig {
        shift: delta,
        seed: seed.wrapping_add(1),
        ..source_cfg.clone()
    };
    let source = synthesize(&source_cfg)?;
    let shifted = synthesize(&shifted_cfg)?;
    let classes = source_cfg.classes.clone();

    let u = source_cfg.shift_direction();
    let mut v = source_cfg.means()[0].clone();
    let along = dot(&v, &u);
    v.iter_mut().zip(&u).for_each(|(a, b)| *a -= along * b);
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|a| *a /= n);

    let mut centroids = vec![vec![0.0; source_cfg.d_a]; classes.len()];
    let mut counts = vec![0.0; classes.len()];
    let index = |c: &str| classes.iter().position(|k| k == c).expect("synthesized class");
    for s in source.iter().filter(|s| s.split == Split::Train) {
        let ci = index(&s.class);
        centroids[ci].iter_mut().zip(s.feature.mean_frame()).for_each(|(a, b)| *a += b);
        counts[ci] += 1.0;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|a| *a /= n);
    }

    let mut points = Vec::new();
    let mut ua = [0.0, 0.0];
    for (d, set) in [&source, &shifted].into_iter().enumerate() {
        let mut pred = Vec::new();
        let mut gold = Vec::new();
        for s in set {
            let m = s.feature.mean_frame();
            let ci = index(&s.class);
            points.push(Point {
                x: dot(&m, &u),
                y: dot(&m, &v),
                class: ci,
                shifted: d == 1,
            });
            if s.split == Split::Test {
                let best = (0..classes.len())
                    .min_by(|&a, &b| {
                        let da: f64 = m.iter().zip(&centroids[a]).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = m.iter().zip(&centroids[b]).map(|(x, y)| (x - y).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .expect("at least two classes");
                pred.push(best);
                gold.push(ci);
            }
        }
        ua[d] = selm::harness::unweighted_accuracy(&pred, &gold, classes.len())?;
    }
    Ok(ShiftView {
        classes,
        points,
        source_ua: ua[0],
        shifted_ua: ua[1],
    })
}

#[derive(Debug, Serialize)]
pub struct ClassScores {
    pub classes: Vec<String>,
    pub similarities: Vec<f64>,
    pub best: usize,
}

/// A small language model pretrained in place, used to embed free text and
/// map it onto a class list by cosine similarity.
#[wasm_bindgen]
pub struct TextMapper {
    model: SelmModel,
    heldout_loss: (f64, f64),
}

impl TextMapper {
    pub fn pretrain(steps: usize, seed: u64) -> selm::Result<Self> {
        let corpus = lm_corpus(&six_classes());
        let config = LmConfig {
            d_lm: 24,
            n_layers: 1,
            n_heads: 2,
            context_length: 32,
            vocab: 360,
        };
        let vocab = Vocabulary::train(&corpus, config.vocab)?;
        let pc = PretrainConfig {
            steps,
            seed,
            ..PretrainConfig::default()
        };
        let (lm, report) = pretrain_lm(&corpus, &vocab, config, &pc)?;
        let backbone = Arc::new(Backbone::new(lm, vocab)?);
        Ok(TextMapper {
            model: SelmModel::new(backbone, SelmConfig::default(), seed)?,
            heldout_loss: (report.initial_heldout_loss, report.final_heldout_loss),
        })
    }

    pub fn scores(&self, text: &str, classes: &[String]) -> selm::Result<ClassScores> {
        let set = ClassSet::new(classes.to_vec())?;
        let emb = self.model.class_embeddings(&set)?;
        let q = self.model.text_embedding(text)?;
        Ok(ClassScores {
            classes: set.names().to_vec(),
            similarities: emb.rows().iter().map(|r| cosine(&q, r)).collect(),
            best: self.model.map_to_class_with(text, &emb)?,
        })
    }
}

fn js<T: Serialize>(r: selm::Result<T>) -> Result<String, JsValue> {
    let v = r.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = oracleView)]
pub fn oracle_view_js(n_e: usize, n_x: usize, n_w: usize, sparsity: f64, seed: u32) -> Result<String, JsValue> {
    js(oracle_view(n_e, n_x, n_w, sparsity, seed as u64))
}

#[wasm_bindgen(js_name = shiftView)]
pub fn shift_view_js(delta: f64, per_class: usize, seed: u32) -> Result<String, JsValue> {
    js(shift_view(delta, per_class, seed as u64))
}

#[wasm_bindgen]
impl TextMapper {
    #[wasm_bindgen(constructor)]
    pub fn new_js(steps: usize, seed: u32) -> Result<TextMapper, JsValue> {
        Self::pretrain(steps, seed as u64).map_err(|e| JsValue::from_str(&e.to_string()))
    }

    /// Held-out loss before and after pretraining, as `[before, after]`.
    #[wasm_bindgen(js_name = heldoutLoss)]
    pub fn heldout_loss(&self) -> Vec<f64> {
        vec![self.heldout_loss.0, self.heldout_loss.1]
    }

    /// `classes` is comma-separated.
    #[wasm_bindgen(js_name = mapText)]
    pub fn map_text_js(&self, text: &str, classes: &str) -> Result<String, JsValue> {
        let list: Vec<String> = classes.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect();
        js(self.scores(text, &list))
    }
}
