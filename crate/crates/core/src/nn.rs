//! Parameter initialisation and small graph-building helpers shared by the models.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BiasAxis, Graph, NodeId};
use crate::error::Result;
use crate::{Array, Params, Real, Tensor};

/// Xavier/Glorot uniform weights of shape `shape`, with the given fan sizes.
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Array {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Array {
    let dist = Normal::new(0.0, std).expect("finite standard deviation");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Inserts `<prefix>.w` (`out×inp`, Xavier) and `<prefix>.b` (`out`, zero).
pub fn init_linear(params: &mut Params, prefix: &str, out: usize, inp: usize, rng: &mut impl Rng) {
    params.insert(format!("{prefix}.w"), xavier_uniform(&[out, inp], inp, out, rng));
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[out]));
}

/// Inserts a same-padded `k×k` convolution `<prefix>.w` (`out×inp×k×k`) and zero bias.
pub fn init_conv(params: &mut Params, prefix: &str, out: usize, inp: usize, k: usize, rng: &mut impl Rng) {
    let w = xavier_uniform(&[out, inp, k, k], inp * k * k, out * k * k, rng);
    params.insert(format!("{prefix}.w"), w);
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[out]));
}

/// Declares the parameters of a linear layer and applies it to `x: [inp, N]`,
/// giving `[out, N]`.
pub fn linear_cols<T: Real>(g: &mut Graph<T>, prefix: &str, x: NodeId, out: usize) -> Result<NodeId> {
    let inp = g.shape(x)[0];
    let w = g.param(&format!("{prefix}.w"), &[out, inp])?;
    let b = g.param(&format!("{prefix}.b"), &[out])?;
    let y = g.matmul(w, x)?;
    g.bias_add(y, b, BiasAxis::First)
}

/// Applies a linear layer to row vectors `x: [N, inp]`, giving `[N, out]`.
pub fn linear_rows<T: Real>(g: &mut Graph<T>, prefix: &str, x: NodeId, out: usize) -> Result<NodeId> {
    let inp = g.shape(x)[1];
    let w = g.param(&format!("{prefix}.w"), &[out, inp])?;
    let b = g.param(&format!("{prefix}.b"), &[out])?;
    let wt = g.transpose(w)?;
    let y = g.matmul(x, wt)?;
    g.bias_add(y, b, BiasAxis::Last)
}

/// Same-padded convolution with bias on a `[C, H, W]` node.
pub fn conv<T: Real>(g: &mut Graph<T>, prefix: &str, x: NodeId, out: usize, k: usize) -> Result<NodeId> {
    let inp = g.shape(x)[0];
    let w = g.param(&format!("{prefix}.w"), &[out, inp, k, k])?;
    let b = g.param(&format!("{prefix}.b"), &[out])?;
    let y = g.conv2d(x, w)?;
    g.bias_add(y, b, BiasAxis::First)
}

/// Every parameter a graph declares, in name order.
pub fn param_names<T: Real>(g: &Graph<T>) -> Vec<String> {
    g.input_specs()
        .filter(|(_, _, trainable)| *trainable)
        .map(|(n, _, _)| n.to_string())
        .collect()
}
