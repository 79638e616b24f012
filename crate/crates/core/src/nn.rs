//! Layer bookkeeping shared by the generator and the feature networks.

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Grads, Graph, ParamSet, Tensor, Var};

/// A 3×3 (or 1×1) convolution whose tensors live in a [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub(crate) w: usize,
    pub(crate) b: usize,
}

impl Conv {
    pub(crate) fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = params.push(
            format!("{}.weight", name),
            Tensor::he_normal(vec![cout, cin, k, k], cin * k * k, rng),
        );
        let b = params.push(format!("{}.bias", name), Tensor::zeros(vec![cout]));
        Self { w, b }
    }

    pub(crate) fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        g.conv2d(x, vars[self.w], vars[self.b])
    }
}

/// Independent linear map per horizontal part.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PartLinear {
    pub(crate) w: usize,
    pub(crate) b: usize,
}

impl PartLinear {
    pub(crate) fn new(
        params: &mut ParamSet,
        name: &str,
        parts: usize,
        din: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = params.push(
            format!("{}.weight", name),
            Tensor::he_normal(vec![parts, dout, din], din, rng),
        );
        let b = params.push(format!("{}.bias", name), Tensor::zeros(vec![parts, dout]));
        Self { w, b }
    }

    pub(crate) fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        g.part_linear(x, vars[self.w], vars[self.b])
    }
}

pub(crate) const LEAKY_SLOPE: f64 = 0.1;

/// Records every parameter tensor as a leaf, in order.
pub(crate) fn bind(g: &mut Graph, params: &ParamSet, trainable: bool) -> Vec<Var> {
    (0..params.len()).map(|i| g.leaf(params.shared(i), trainable)).collect()
}

pub(crate) fn collect_grads(grads: &Grads, vars: &[Var], params: &ParamSet) -> Vec<Vec<f64>> {
    vars.iter()
        .enumerate()
        .map(|(i, &v)| grads.get_or_zeros(v, params.get(i).len()))
        .collect()
}

/// Evaluates `per_item` for every item in parallel and sums losses and
/// gradients in item order, so the result does not depend on scheduling.
pub(crate) fn summed_gradients<T: Sync>(
    items: &[T],
    params: &ParamSet,
    per_item: impl Fn(&T) -> (f64, Vec<Vec<f64>>) + Sync,
) -> (f64, Vec<Vec<f64>>) {
    let parts: Vec<(f64, Vec<Vec<f64>>)> = items.par_iter().map(|t| per_item(t)).collect();
    let mut total = 0.0;
    let mut acc: Vec<Vec<f64>> = (0..params.len()).map(|i| vec![0.0; params.get(i).len()]).collect();
    for (loss, grads) in parts {
        total += loss;
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    (total, acc)
}
