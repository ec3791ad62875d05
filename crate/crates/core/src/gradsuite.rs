//! Finite-difference checks of every differentiable block on small random
//! shapes, shared by the `gradcheck` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check_steps, GradCheckReport, NodeId};
use crate::detector::{build_det_loss, build_detect, init_detector, target_tensors, DetDims};
use crate::error::Result;
use crate::hfp::{build_predict, deform_attn, history_input, init_deform_layer, init_hfp, tempred_loss, AttnDims, HfpDims};
use crate::nn::param_names;
use crate::streams::{DetectionTarget, Modality};
use crate::ucf::{build_fuse, build_nll, build_uncertainty, build_variance, fuse_loss, init_ucf, UcfDims};
use crate::{Array, Bindings, Graph64, Params, Tensor};

/// Step sizes tried per element. The larger one handles tiny gradients, the
/// smaller one the kinks of bilinear sampling.
pub const STEPS: [f64; 2] = [1e-4, 1e-6];

/// Relative-error threshold every block must meet.
pub const TOLERANCE: f64 = 1e-4;

/// Shapes of the suite.
pub const D: usize = 4;
pub const H: usize = 6;
pub const W: usize = 6;
pub const TAU: usize = 3;
pub const K: usize = 2;

#[derive(Clone, Debug, Serialize)]
pub struct BlockResult {
    pub block: &'static str,
    pub max_relative_error: f64,
    pub checked: usize,
    pub worst: Option<(String, usize)>,
}

impl BlockResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

struct Case {
    graph: Graph64,
    params: Params,
    data: Vec<(String, Array)>,
    /// Data inputs checked in addition to every parameter.
    data_wrt: Vec<String>,
}

impl Case {
    fn new() -> Self {
        Self {
            graph: Graph64::new(),
            params: Params::new(),
            data: vec![],
            data_wrt: vec![],
        }
    }

    fn input(&mut self, name: &str, shape: &[usize], rng: &mut ChaCha8Rng, differentiable: bool) -> Result<NodeId> {
        let id = self.graph.input(name, shape)?;
        self.data.push((name.to_string(), random(shape, 1.0, rng)));
        if differentiable {
            self.data_wrt.push(name.to_string());
        }
        Ok(id)
    }

    fn check(mut self, loss: NodeId, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        self.graph.set_output("loss", loss);
        for (_, t) in self.params.iter_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-0.4..0.4);
            }
        }
        let mut b = Bindings::new();
        self.params.bind_all(&mut b);
        for (name, t) in &self.data {
            b.bind(name.clone(), t);
        }
        let mut wrt = param_names(&self.graph);
        wrt.extend(self.data_wrt.iter().cloned());
        let wrt: Vec<&str> = wrt.iter().map(String::as_str).collect();
        grad_check_steps(&self.graph, &b, "loss", &wrt, &STEPS)
    }
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Array {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn attn_dims() -> AttnDims {
    AttnDims {
        query_channels: D,
        kv_channels: D,
        height: H,
        width: W,
        points: K,
    }
}

fn ucf_dims() -> UcfDims {
    UcfDims {
        img_channels: D,
        pts_channels: D,
        height: H,
        width: W,
        points: K,
    }
}

fn det_dims() -> DetDims {
    DetDims {
        img_channels: D,
        pts_channels: D,
        hidden: 2 * D,
        height: H,
        width: W,
    }
}

fn random_target(rng: &mut ChaCha8Rng) -> Result<DetectionTarget> {
    let occupancy: Vec<bool> = (0..H * W).map(|_| rng.random_bool(0.2)).collect();
    Ok(DetectionTarget {
        height: H,
        width: W,
        occupancy,
        offsets: random(&[2, H, W], 0.5, rng),
    })
}

fn bind_target(case: &mut Case, target: &DetectionTarget) {
    for (name, t) in target_tensors::<f64>(target) {
        case.data.push((name.to_string(), t));
    }
}

fn deform_block(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut c = Case::new();
    let dims = attn_dims();
    let q = c.input("q", &[D, H, W], rng, true)?;
    let kv = c.input("kv", &[D, H, W], rng, true)?;
    let u = c.input("u", &[1, H, W], rng, true)?;
    let target = c.input("target", &[D, H, W], rng, false)?;
    init_deform_layer(&mut c.params, "attn", dims, rng);
    let out = deform_attn(&mut c.graph, "attn", dims, q, kv, Some(u))?.output;
    let loss = c.graph.mse(out, target)?;
    c.check(loss, rng)
}

fn hfp_block(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut c = Case::new();
    let dims = HfpDims {
        channels: D,
        height: H,
        width: W,
        tau: TAU,
        points: K,
    };
    let window = (0..TAU)
        .map(|i| c.input(&history_input(Modality::Img, i), &[D, H, W], rng, true))
        .collect::<Result<Vec<_>>>()?;
    let target = c.input("target", &[D, H, W], rng, false)?;
    init_hfp(&mut c.params, Modality::Img, dims, rng);
    let pred = build_predict(&mut c.graph, Modality::Img, dims, &window)?.prediction;
    let loss = tempred_loss(&mut c.graph, pred, target)?;
    c.check(loss, rng)
}

fn variance_block(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut c = Case::new();
    let dims = ucf_dims();
    let f = c.input("f", &[D, H, W], rng, true)?;
    let gt = c.input("gt", &[D, H, W], rng, true)?;
    let mut full = Params::new();
    init_ucf(&mut full, dims, rng);
    c.params = full.filtered("ucf.img.var");
    let var = build_variance(&mut c.graph, Modality::Img, dims, f)?;
    let loss = build_nll(&mut c.graph, f, gt, var)?;
    c.check(loss, rng)
}

fn fusion_block(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut c = Case::new();
    let dims = ucf_dims();
    let mut f = vec![];
    let mut gt = vec![];
    for m in Modality::ALL {
        f.push(c.input(&format!("f.{m}"), &[D, H, W], rng, true)?);
        gt.push(c.input(&format!("gt.{m}"), &[D, H, W], rng, true)?);
    }
    init_ucf(&mut c.params, dims, rng);
    let mut u = vec![];
    for m in Modality::ALL {
        let var = build_variance(&mut c.graph, m, dims, f[m.index()])?;
        u.push(build_uncertainty(&mut c.graph, var));
    }
    let mut fused = vec![];
    for q in Modality::ALL {
        let (qi, ki) = (q.index(), q.other().index());
        fused.push(build_fuse(&mut c.graph, q, dims, f[qi], f[ki], Some(u[ki]))?.fused);
    }
    let loss = fuse_loss(&mut c.graph, fused[0], fused[1], gt[0], gt[1])?;
    c.check(loss, rng)
}

fn detector_block(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut c = Case::new();
    let dims = det_dims();
    let img = c.input("img", &[D, H, W], rng, true)?;
    let pts = c.input("pts", &[D, H, W], rng, true)?;
    init_detector(&mut c.params, dims, rng);
    let det = build_detect(&mut c.graph, dims, img, pts)?;
    let loss = build_det_loss(&mut c.graph, det)?;
    let target = random_target(rng)?;
    bind_target(&mut c, &target);
    c.check(loss, rng)
}

fn loss_block(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    // Every loss on free inputs, summed so one check covers them all.
    let mut c = Case::new();
    let pred = c.input("pred", &[D, H, W], rng, true)?;
    let gt = c.input("gt", &[D, H, W], rng, true)?;
    let other = c.input("other", &[D, H, W], rng, true)?;
    let other_gt = c.input("other_gt", &[D, H, W], rng, true)?;
    let log_var = c.input("log_var", &[1, H, W], rng, true)?;
    let logits = c.input("logits", &[1, H, W], rng, true)?;
    let offsets = c.input("offsets", &[2, H, W], rng, true)?;
    let g = &mut c.graph;
    let tempred = tempred_loss(g, pred, gt)?;
    let sigma2 = g.exp(log_var);
    let nll = build_nll(g, pred, gt, sigma2)?;
    let fuse = fuse_loss(g, pred, other, gt, other_gt)?;
    let det = build_det_loss(
        g,
        crate::detector::DetectNodes {
            logits,
            offsets,
        },
    )?;
    let a = g.add(tempred, nll)?;
    let b = g.add(fuse, det)?;
    let loss = g.add(a, b)?;
    let target = random_target(rng)?;
    bind_target(&mut c, &target);
    c.check(loss, rng)
}

type BlockFn = fn(&mut ChaCha8Rng) -> Result<GradCheckReport>;

/// The differentiable blocks, in reporting order.
pub const BLOCKS: [(&str, BlockFn); 6] = [
    ("deformable_attention", deform_block),
    ("history_projection", hfp_block),
    ("variance_head", variance_block),
    ("fusion", fusion_block),
    ("detector_head", detector_block),
    ("losses", loss_block),
];

/// Checks every block over `seeds` random instances; reports the worst error per block.
pub fn run(seed: u64, seeds: usize) -> Result<Vec<BlockResult>> {
    let mut out = vec![];
    for (i, (block, f)) in BLOCKS.iter().enumerate() {
        let mut worst = BlockResult {
            block,
            max_relative_error: 0.0,
            checked: 0,
            worst: None,
        };
        for s in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::streams::derive_seed(seed, &[i as u64, s as u64]));
            let r = f(&mut rng)?;
            worst.checked += r.checked;
            if r.max_relative_error >= worst.max_relative_error {
                worst.max_relative_error = r.max_relative_error;
                worst.worst = r.worst;
            }
        }
        out.push(worst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_block_passes() {
        for r in super::run(7, 2).unwrap() {
            assert!(r.passed(), "{r:?}");
            assert!(r.checked > 0);
        }
    }
}
