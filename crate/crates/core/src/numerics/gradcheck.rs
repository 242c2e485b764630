use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::Gradients;
use super::tensor::ParameterTree;
use crate::error::Result;

/// Something with parameters whose scalar loss can be evaluated and differentiated.
pub trait Objective {
    fn params(&self) -> &ParameterTree;
    fn params_mut(&mut self) -> &mut ParameterTree;
    fn loss(&self) -> Result<f64>;
    fn loss_and_grads(&self) -> Result<(f64, Gradients)>;
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Worst relative error per checked parameter tensor.
    pub per_param: BTreeMap<String, f64>,
    pub checked_scalars: usize,
}

/// Compares analytic gradients against central differences for up to
/// `per_tensor` seeded-sampled scalars of every trainable tensor.
///
/// The perturbation is applied to 32-bit storage, so the divisor is the
/// difference actually realized there (≈ 2·eps).
pub fn grad_check<O: Objective>(
    obj: &mut O,
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = obj.loss_and_grads()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = obj.params().trainable_names();
    let mut per_param = BTreeMap::new();
    let mut max_err: f64 = 0.0;
    let mut checked = 0;

    for name in names {
        let len = obj.params().get(&name).map_or(0, |t| t.len());
        let analytic_all = grads.get(&name);
        let idx: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst: f64 = 0.0;
        for i in idx {
            let analytic = analytic_all.map_or(0.0, |g| g[i]);
            let orig = obj.params().get(&name).expect("listed")[i];
            let plus = (orig as f64 + eps) as f32;
            let minus = (orig as f64 - eps) as f32;

            obj.params_mut().get_mut(&name).expect("listed").data_mut()[i] = plus;
            let lp = obj.loss();
            obj.params_mut().get_mut(&name).expect("listed").data_mut()[i] = minus;
            let lm = obj.loss();
            obj.params_mut().get_mut(&name).expect("listed").data_mut()[i] = orig;
            let (lp, lm) = (lp?, lm?);

            let numeric = (lp - lm) / (plus as f64 - minus as f64);
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-8);
            worst = worst.max(err);
            checked += 1;
        }
        max_err = max_err.max(worst);
        per_param.insert(name, worst);
    }

    Ok(GradCheckReport {
        max_relative_error: max_err,
        per_param,
        checked_scalars: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Mat, Tensor};

    struct Linear {
        p: ParameterTree,
        x: Mat,
        targets: Vec<usize>,
        ignore_params: bool,
    }

    impl Linear {
        fn build(&self) -> Result<(Graph, crate::numerics::Var)> {
            let mut g = Graph::new();
            let w = g.param_from(&self.p, "w")?;
            let b = g.param_from(&self.p, "b")?;
            let x = g.constant(self.x.clone());
            let y = if self.ignore_params {
                x
            } else {
                g.linear(x, w, b)
            };
            let mask = vec![true; self.targets.len()];
            let l = g.cross_entropy(y, &self.targets, &mask)?;
            Ok((g, l))
        }
    }

    impl Objective for Linear {
        fn params(&self) -> &ParameterTree {
            &self.p
        }
        fn params_mut(&mut self) -> &mut ParameterTree {
            &mut self.p
        }
        fn loss(&self) -> Result<f64> {
            let (g, l) = self.build()?;
            Ok(g.scalar(l))
        }
        fn loss_and_grads(&self) -> Result<(f64, Gradients)> {
            let (g, l) = self.build()?;
            Ok((g.scalar(l), g.backward(l)?))
        }
    }

    fn linear(ignore_params: bool) -> Linear {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParameterTree::new();
        p.insert("w", Tensor::xavier(4, 4, &mut rng), false).unwrap();
        p.insert("b", Tensor::normal(&[4], 0.1, &mut rng), false).unwrap();
        let x = Mat::from_tensor(&Tensor::normal(&[3, 4], 1.0, &mut rng));
        Linear {
            p,
            x,
            targets: vec![0, 2, 3],
            ignore_params,
        }
    }

    #[test]
    fn single_linear_layer_passes() {
        let mut m = linear(false);
        let r = grad_check(&mut m, 1e-3, 100, 0).unwrap();
        assert_eq!(r.checked_scalars, 20);
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn parameter_independent_loss_has_zero_error() {
        let mut m = linear(true);
        let r = grad_check(&mut m, 1e-3, 100, 0).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn check_restores_parameters() {
        let mut m = linear(false);
        let before = m.p.clone();
        grad_check(&mut m, 1e-3, 3, 1).unwrap();
        assert!(m.p.bit_eq(&before));
    }
}
