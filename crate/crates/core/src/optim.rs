//! AdamW with global gradient-norm clipping.

use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::{Array, Params, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Decoupled-weight-decay Adam. Only parameters that receive gradients are touched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Array, Array)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter named in `grads`.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients<f64>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::UnknownName(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("`{name}` parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let decay = 1.0 - self.lr * self.weight_decay;
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + EPSILON);
                *pv = *pv * decay - self.lr * update;
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm(grads: &Gradients<f64>) -> f64 {
    grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients<f64>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Adds `src` into `dst`, creating entries as needed.
pub fn accumulate(dst: &mut Gradients<f64>, src: Gradients<f64>) {
    for (name, g) in src {
        match dst.get_mut(&name) {
            Some(d) => d.add_assign(&g),
            None => {
                dst.insert(name, g);
            }
        }
    }
}

/// Multiplies every gradient by `s`.
pub fn scale(grads: &mut Gradients<f64>, s: f64) {
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v *= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: Vec<f64>) -> Gradients<f64> {
        let n = v.len();
        let mut g = Gradients::new();
        g.insert(name.to_string(), Tensor::new(vec![n], v).unwrap());
        g
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Params::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut p, &single("w", vec![3.0, -0.5])).unwrap();
        // Bias-corrected first step is lr·sign(g) up to ε.
        approx::assert_abs_diff_eq!(p.get("w").unwrap().data()[0], 0.9, epsilon = 1e-7);
        approx::assert_abs_diff_eq!(p.get("w").unwrap().data()[1], -0.9, epsilon = 1e-7);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = Params::new();
        p.insert("w", Tensor::new(vec![1], vec![2.0]).unwrap());
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut p, &single("w", vec![0.0])).unwrap();
        approx::assert_abs_diff_eq!(p.get("w").unwrap().data()[0], 2.0 * 0.95, epsilon = 1e-12);
    }

    #[test]
    fn untouched_parameters_stay_put() {
        let mut p = Params::new();
        p.insert("a", Tensor::new(vec![1], vec![1.0]).unwrap());
        p.insert("b", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut p, &single("a", vec![1.0])).unwrap();
        assert_eq!(p.get("b").unwrap().data()[0], 1.0);
        assert!(opt.step(&mut p, &single("c", vec![1.0])).is_err());
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = single("a", vec![3.0, 4.0]);
        g.insert("b".into(), Tensor::new(vec![1], vec![12.0]).unwrap());
        let before = clip_global_norm(&mut g, 1.0);
        approx::assert_abs_diff_eq!(before, 13.0, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(global_norm(&g), 1.0, epsilon = 1e-12);
        let mut small = single("a", vec![0.3]);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small["a"].data()[0], 0.3);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Params::new();
        p.insert("x", Tensor::new(vec![1], vec![5.0]).unwrap());
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..2000 {
            let x = p.get("x").unwrap().data()[0];
            opt.step(&mut p, &single("x", vec![2.0 * (x - 1.5)])).unwrap();
        }
        approx::assert_abs_diff_eq!(p.get("x").unwrap().data()[0], 1.5, epsilon = 1e-3);
    }
}
