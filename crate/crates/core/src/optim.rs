//! Adam over parameter trees.

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Var};
use crate::params::{visit, ParamTree};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

/// Gradients of every leaf in traversal order; `None` for frozen leaves.
pub fn grads_in_order<Q: ParamTree<Var>>(bound: &Q, grads: &Gradients) -> Vec<Option<Tensor>> {
    let mut out = Vec::new();
    visit(bound, &mut |_, v: &Var| out.push(grads.get(*v).cloned()));
    out
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One bias-corrected update. `grads` follows the traversal order of `p`.
    pub fn update<P: ParamTree<Tensor>>(&mut self, p: &mut P, grads: &[Option<Tensor>]) {
        if self.m.is_empty() {
            visit(p, &mut |_, t: &Tensor| {
                self.m.push(Tensor::zeros(t.shape()));
                self.v.push(Tensor::zeros(t.shape()));
            });
        }
        assert_eq!(grads.len(), self.m.len(), "gradient list does not match parameter tree");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        p.visit_mut("", &mut |_, t| {
            if let Some(g) = &grads[i] {
                let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
                for (k, x) in t.data_mut().iter_mut().enumerate() {
                    let gk = g.data()[k];
                    m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                    v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                    *x -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                }
            }
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Linear;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Linear { weight: Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap(), bias: Tensor::zeros(&[2]) };
        let g = vec![Some(Tensor::new(&[1, 2], vec![0.3, -5.0]).unwrap()), None];
        let mut opt = Adam::new(AdamConfig::default());
        opt.update(&mut p, &g);
        assert!((p.weight.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.weight.data()[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p.bias.data(), &[0.0, 0.0]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Linear { weight: Tensor::new(&[1, 1], vec![3.0]).unwrap(), bias: Tensor::new(&[1], vec![-2.0]).unwrap() };
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..2000 {
            let g = vec![Some(p.weight.scale(2.0)), Some(p.bias.scale(2.0))];
            opt.update(&mut p, &g);
        }
        assert!(p.weight.max_abs() < 1e-2 && p.bias.max_abs() < 1e-2);
    }
}
