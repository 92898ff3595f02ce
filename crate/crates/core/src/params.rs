//! Named parameter trees.
//!
//! Parameter structs are generic over their leaf type: `T = Tensor` for
//! storage, `T = Var` once bound to a [`Graph`]. Every struct implements
//! [`ParamTree`], which fixes one traversal order shared by binding,
//! checkpointing and the optimizer.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

pub trait ParamTree<T> {
    type With<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::With<U>;

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Visits leaves in traversal order, read-only.
pub fn visit<T, P: ParamTree<T>>(p: &P, f: &mut dyn FnMut(&str, &T)) {
    let _ = p.map_leaves("", &mut |n, t| f(n, t));
}

pub fn named<T: Clone, P: ParamTree<T>>(p: &P) -> Vec<(String, T)> {
    let mut out = Vec::new();
    visit(p, &mut |n, t: &T| out.push((n.to_string(), t.clone())));
    out
}

pub fn count_params<P: ParamTree<Tensor>>(p: &P) -> usize {
    let mut n = 0;
    visit(p, &mut |_, t: &Tensor| n += t.numel());
    n
}

/// Places every leaf on the graph; `trainable(name)` decides which receive gradients.
pub fn bind<P: ParamTree<Tensor>>(p: &P, g: &mut Graph, trainable: &dyn Fn(&str) -> bool) -> P::With<Var> {
    p.map_leaves("", &mut |n, t| g.leaf(t.clone(), trainable(n)))
}

pub fn bind_constant<P: ParamTree<Tensor>>(p: &P, g: &mut Graph) -> P::With<Var> {
    p.map_leaves("", &mut |_, t| g.constant(t.clone()))
}

/// Gaussian init with the given standard deviation.
pub(crate) fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("positive dims")
}

/// Dense layer `y = x W + b`, `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

impl Linear<Tensor> {
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self::init_scaled(c_in, c_out, 1.0, rng)
    }

    pub fn init_scaled<R: Rng + ?Sized>(c_in: usize, c_out: usize, gain: f64, rng: &mut R) -> Self {
        Linear {
            weight: normal(&[c_in, c_out], gain / (c_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Linear { weight: Tensor::zeros(&[c_in, c_out]), bias: Tensor::zeros(&[c_out]) }
    }
}

impl Linear<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> crate::Result<Var> {
        g.linear(x, self.weight, Some(self.bias))
    }
}

impl<T> ParamTree<T> for Linear<T> {
    type With<U> = Linear<U>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Linear<U> {
        Linear { weight: f(&join(prefix, "weight"), &self.weight), bias: f(&join(prefix, "bias"), &self.bias) }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T, P: ParamTree<T>> ParamTree<T> for Vec<P> {
    type With<U> = Vec<P::With<U>>;

    fn map_leaves<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Vec<P::With<U>> {
        self.iter().enumerate().map(|(i, p)| p.map_leaves(&join(prefix, &i.to_string()), f)).collect()
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
