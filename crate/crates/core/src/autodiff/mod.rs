//! Reverse-mode differentiation over static graphs of coarse array primitives.

mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use checkpoint::{checkpoint_paths, CheckpointEntry, CheckpointHeader, ParamSet};
pub use gradcheck::{grad_check, grad_check_steps, grad_check_wrt, GradCheckReport};
pub use kernels::Border;
pub use graph::{BiasAxis, Bindings, Evaluation, Gradients, Graph, NodeId};
pub use tensor::Tensor;

use crate::scalar::Real;

/// Samples a D×H×W map at continuous `(x, y)` points with zero padding.
/// Returns one D-vector per point.
pub fn bilinear_sample<T: Real>(map: &Tensor<T>, points: &[(T, T)]) -> Vec<Vec<T>> {
    let s = map.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let flat: Vec<T> = points.iter().flat_map(|&(x, y)| [x, y]).collect();
    let mut out = vec![T::zero(); points.len() * c];
    kernels::bilinear_forward(map.data(), &flat, &mut out, c, h, w, kernels::Border::Zero);
    out.chunks(c).map(<[T]>::to_vec).collect()
}
