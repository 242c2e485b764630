//! Brute-force check of the ranking identity behind the acoustic-model /
//! language-model split: for a finite joint p(e, x, w),
//! `argmax_e p(e | x, w) = argmax_e p(x | e, w) · p(e | w)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Joint table over |E| × |X| × |W|, indexed `[e][x][w]` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution {
    n_e: usize,
    n_x: usize,
    n_w: usize,
    p: Vec<f64>,
}

impl JointDistribution {
    pub fn new(n_e: usize, n_x: usize, n_w: usize, p: Vec<f64>) -> Result<Self> {
        if n_e == 0 || n_x == 0 || n_w == 0 || p.len() != n_e * n_x * n_w {
            return Err(Error::Shape(format!("table of {} for {n_e}×{n_x}×{n_w}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidValue("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidValue(format!("table sums to {total}")));
        }
        Ok(JointDistribution { n_e, n_x, n_w, p })
    }

    /// Scales non-negative weights to sum to one.
    pub fn normalized(n_e: usize, n_x: usize, n_w: usize, mut w: Vec<f64>) -> Result<Self> {
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidValue("weights sum to zero".into()));
        }
        w.iter_mut().for_each(|v| *v /= total);
        Self::new(n_e, n_x, n_w, w)
    }

    pub fn uniform(n_e: usize, n_x: usize, n_w: usize) -> Result<Self> {
        Self::normalized(n_e, n_x, n_w, vec![1.0; n_e * n_x * n_w])
    }

    /// Random joint whose entries are zero with probability `sparsity`.
    pub fn random<R: Rng>(n_e: usize, n_x: usize, n_w: usize, sparsity: f64, rng: &mut R) -> Result<Self> {
        let mut w: Vec<f64> = (0..n_e * n_x * n_w)
            .map(|_| if rng.random::<f64>() < sparsity { 0.0 } else { rng.random::<f64>() })
            .collect();
        if w.iter().all(|v| *v == 0.0) {
            w[0] = 1.0;
        }
        Self::normalized(n_e, n_x, n_w, w)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_e, self.n_x, self.n_w)
    }

    pub fn p(&self, e: usize, x: usize, w: usize) -> f64 {
        self.p[(e * self.n_x + x) * self.n_w + w]
    }

    fn check(&self, x: usize, w: usize) -> Result<()> {
        if x >= self.n_x || w >= self.n_w {
            return Err(Error::Input(format!("query ({x}, {w}) outside {}×{}", self.n_x, self.n_w)));
        }
        Ok(())
    }

    pub fn p_xw(&self, x: usize, w: usize) -> f64 {
        (0..self.n_e).map(|e| self.p(e, x, w)).sum()
    }

    pub fn p_ew(&self, e: usize, w: usize) -> f64 {
        (0..self.n_x).map(|x| self.p(e, x, w)).sum()
    }

    pub fn p_w(&self, w: usize) -> f64 {
        (0..self.n_e).map(|e| self.p_ew(e, w)).sum()
    }
}

fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// `argmax_e p(e | x, w)` by normalizing the joint slice.
pub fn posterior_rank(j: &JointDistribution, x: usize, w: usize) -> Result<usize> {
    j.check(x, w)?;
    let evidence = j.p_xw(x, w);
    if evidence <= 0.0 {
        return Err(Error::UndefinedConditional(format!("p(x={x}, w={w}) = 0")));
    }
    let scores: Vec<f64> = (0..j.n_e).map(|e| j.p(e, x, w) / evidence).collect();
    Ok(argmax_lowest(&scores))
}

/// `argmax_e p(x | e, w) · p(e | w)`, each conditional taken from the joint.
/// Hypotheses with p(e, w) = 0 have an undefined likelihood and score zero
/// (their prior factor is zero).
pub fn factored_rank(j: &JointDistribution, x: usize, w: usize) -> Result<usize> {
    j.check(x, w)?;
    let pw = j.p_w(w);
    if pw <= 0.0 {
        return Err(Error::UndefinedConditional(format!("p(w={w}) = 0")));
    }
    if j.p_xw(x, w) <= 0.0 {
        return Err(Error::UndefinedConditional(format!("p(x={x}, w={w}) = 0")));
    }
    let scores: Vec<f64> = (0..j.n_e)
        .map(|e| {
            let pew = j.p_ew(e, w);
            if pew <= 0.0 {
                return 0.0;
            }
            let likelihood = j.p(e, x, w) / pew;
            let prior = pew / pw;
            likelihood * prior
        })
        .collect();
    Ok(argmax_lowest(&scores))
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub trials: usize,
    pub queries: usize,
    pub skipped_undefined: usize,
    pub mismatches: usize,
}

/// Compares both rankings on every defined query of `trials` seeded random joints
/// with each dimension in 1..=6.
pub fn check_random_joints(trials: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport {
        trials,
        queries: 0,
        skipped_undefined: 0,
        mismatches: 0,
    };
    for _ in 0..trials {
        let (ne, nx, nw) = (rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6));
        let sparsity = [0.0, 0.3, 0.7][rng.random_range(0..3)];
        let j = JointDistribution::random(ne, nx, nw, sparsity, &mut rng)?;
        for x in 0..nx {
            for w in 0..nw {
                match (posterior_rank(&j, x, w), factored_rank(&j, x, w)) {
                    (Ok(a), Ok(b)) => {
                        report.queries += 1;
                        if a != b {
                            report.mismatches += 1;
                        }
                    }
                    (Err(Error::UndefinedConditional(_)), Err(Error::UndefinedConditional(_))) => {
                        report.skipped_undefined += 1
                    }
                    (Err(e), _) | (_, Err(e)) => return Err(e),
                }
            }
        }
    }
    Ok(report)
}
