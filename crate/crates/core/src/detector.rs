//! Small convolutional detection head: per-cell objectness logits and sub-cell
//! offsets from the concatenated modality features.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamSet};
use crate::error::{Error, Result};
use crate::nn::{conv, init_conv, init_linear, linear_cols};
use crate::scalar::sigmoid;
use crate::streams::{DetectionTarget, Modality};
use crate::{Bindings, Params, Real, Tensor};

/// Prior probability of a cell being occupied, used to initialise the
/// classification bias so early training is not dominated by easy negatives.
pub const PRIOR_OCCUPANCY: f64 = 0.01;

pub const TARGET_OCCUPANCY: &str = "target.occupancy";
pub const TARGET_OFFSETS: &str = "target.offsets";
pub const TARGET_REG_WEIGHT: &str = "target.reg_weight";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetDims {
    pub img_channels: usize,
    pub pts_channels: usize,
    pub hidden: usize,
    pub height: usize,
    pub width: usize,
}

impl DetDims {
    pub fn feature_shape(&self, m: Modality) -> [usize; 3] {
        let c = match m {
            Modality::Img => self.img_channels,
            Modality::Pts => self.pts_channels,
        };
        [c, self.height, self.width]
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

pub fn init_detector(params: &mut Params, dims: DetDims, rng: &mut impl Rng) {
    let (din, dh) = (dims.img_channels + dims.pts_channels, dims.hidden);
    init_linear(params, "det.proj", dh, din, rng);
    init_conv(params, "det.conv1", dh, dh, 3, rng);
    init_conv(params, "det.conv2", dh, dh, 3, rng);
    init_linear(params, "det.cls", 1, dh, rng);
    init_linear(params, "det.reg", 2, dh, rng);
    let prior = (PRIOR_OCCUPANCY / (1.0 - PRIOR_OCCUPANCY)).ln();
    params.insert("det.cls.b", Tensor::full(&[1], prior));
}

#[derive(Clone, Copy, Debug)]
pub struct DetectNodes {
    /// `1×H×W`.
    pub logits: NodeId,
    /// `2×H×W`.
    pub offsets: NodeId,
}

pub fn build_detect<T: Real>(g: &mut Graph<T>, dims: DetDims, img: NodeId, pts: NodeId) -> Result<DetectNodes> {
    for (m, id) in [(Modality::Img, img), (Modality::Pts, pts)] {
        if g.shape(id) != dims.feature_shape(m) {
            return Err(Error::shape(
                "detect",
                format!("{m} input {:?}, expected {:?}", g.shape(id), dims.feature_shape(m)),
            ));
        }
    }
    let (h, w, n) = (dims.height, dims.width, dims.cells());
    let x = g.concat(&[img, pts])?;
    let x = g.reshape(x, &[dims.img_channels + dims.pts_channels, n])?;
    let x = linear_cols(g, "det.proj", x, dims.hidden)?;
    let x = g.silu(x);
    let x = g.reshape(x, &[dims.hidden, h, w])?;
    let x = conv(g, "det.conv1", x, dims.hidden, 3)?;
    let x = g.silu(x);
    let x = conv(g, "det.conv2", x, dims.hidden, 3)?;
    let x = g.silu(x);
    let x = g.reshape(x, &[dims.hidden, n])?;
    let logits = linear_cols(g, "det.cls", x, 1)?;
    let logits = g.reshape(logits, &[1, h, w])?;
    let offsets = linear_cols(g, "det.reg", x, 2)?;
    let offsets = g.reshape(offsets, &[2, h, w])?;
    Ok(DetectNodes { logits, offsets })
}

/// Binary cross-entropy on logits (mean over cells) plus the squared offset
/// error averaged over occupied cells and both coordinates. The target inputs
/// are declared here under the `target.*` names.
pub fn build_det_loss<T: Real>(g: &mut Graph<T>, det: DetectNodes) -> Result<NodeId> {
    let s = g.shape(det.logits).to_vec();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape("det_loss", format!("logits {s:?}, expected [1, H, W]")));
    }
    let (h, w) = (s[1], s[2]);
    let occ = g.input(TARGET_OCCUPANCY, &[1, h, w])?;
    let off = g.input(TARGET_OFFSETS, &[2, h, w])?;
    let reg_w = g.input(TARGET_REG_WEIGHT, &[2, h, w])?;
    let sp = g.softplus(det.logits);
    let yz = g.mul(occ, det.logits)?;
    let bce = g.sub(sp, yz)?;
    let bce = g.mean(bce);
    let diff = g.sub(det.offsets, off)?;
    let sq = g.square(diff);
    let weighted = g.mul(reg_w, sq)?;
    let reg = g.sum(weighted);
    g.add(bce, reg)
}

/// Target tensors for [`build_det_loss`]: occupancy, offsets and the
/// regression weight `mask / (2·n_occupied)` (zero when nothing is occupied).
pub fn target_tensors<T: Real>(target: &DetectionTarget) -> [(&'static str, Tensor<T>); 3] {
    let (h, w) = (target.height, target.width);
    let n_occ = target.num_occupied();
    let weight = if n_occ == 0 { 0.0 } else { 1.0 / (2.0 * n_occ as f64) };
    let reg_w = Tensor::from_fn(&[2, h, w], |i| {
        if target.occupancy[i % (h * w)] {
            T::lit(weight)
        } else {
            T::zero()
        }
    });
    [
        (TARGET_OCCUPANCY, target.occupancy_map().cast()),
        (TARGET_OFFSETS, target.offsets.cast()),
        (TARGET_REG_WEIGHT, reg_w),
    ]
}

/// Detector output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection<T = f64> {
    pub logits: Tensor<T>,
    pub offsets: Tensor<T>,
}

/// Cell-level confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct F1Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl F1Counts {
    pub fn add(&mut self, other: F1Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `2tp / (2tp + fp + fn)`, and 1 when nothing is predicted or present.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// Counts cells where `sigmoid(logit) > threshold` against the occupancy.
pub fn f1_counts<T: Real>(logits: &Tensor<T>, target: &DetectionTarget, threshold: f64) -> Result<F1Counts> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!("F1 threshold {threshold} outside (0, 1)")));
    }
    if logits.len() != target.occupancy.len() {
        return Err(Error::shape(
            "det_f1",
            format!("{} logits for {} target cells", logits.len(), target.occupancy.len()),
        ));
    }
    let mut c = F1Counts::default();
    for (&z, &occ) in logits.data().iter().zip(&target.occupancy) {
        let pred = sigmoid(z).to_f64_lossy() > threshold;
        match (pred, occ) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

pub fn det_f1<T: Real>(logits: &Tensor<T>, target: &DetectionTarget, threshold: f64) -> Result<f64> {
    Ok(f1_counts(logits, target, threshold)?.f1())
}

/// Graph input names used by [`Detector`].
pub fn detector_input(m: Modality) -> String {
    format!("det.in.{m}")
}

/// Inference-only detector graph.
#[derive(Clone, Debug)]
pub struct Detector<T> {
    dims: DetDims,
    graph: Graph<T>,
    nodes: DetectNodes,
}

impl<T: Real> Detector<T> {
    pub fn new(dims: DetDims) -> Result<Self> {
        let mut graph = Graph::new();
        let img = graph.input(&detector_input(Modality::Img), &dims.feature_shape(Modality::Img))?;
        let pts = graph.input(&detector_input(Modality::Pts), &dims.feature_shape(Modality::Pts))?;
        let nodes = build_detect(&mut graph, dims, img, pts)?;
        Ok(Self { dims, graph, nodes })
    }

    pub fn dims(&self) -> DetDims {
        self.dims
    }

    pub fn detect(&self, params: &ParamSet<T>, img: &Tensor<T>, pts: &Tensor<T>) -> Result<Detection<T>> {
        let mut b = Bindings::new();
        params.bind_all(&mut b);
        b.bind(detector_input(Modality::Img), img);
        b.bind(detector_input(Modality::Pts), pts);
        let ev = self.graph.evaluate(&b)?;
        Ok(Detection {
            logits: ev.value(self.nodes.logits).clone(),
            offsets: ev.value(self.nodes.offsets).clone(),
        })
    }
}

/// Evaluates the detection loss of a prediction directly.
pub fn det_loss(pred: &Detection, target: &DetectionTarget) -> Result<f64> {
    let (h, w) = (target.height, target.width);
    if pred.logits.shape() != [1, h, w] || pred.offsets.shape() != [2, h, w] {
        return Err(Error::shape(
            "det_loss",
            format!("logits {:?} offsets {:?}", pred.logits.shape(), pred.offsets.shape()),
        ));
    }
    let mut g = Graph::<f64>::new();
    let logits = g.input("logits", pred.logits.shape())?;
    let offsets = g.input("offsets", pred.offsets.shape())?;
    let loss = build_det_loss(&mut g, DetectNodes { logits, offsets })?;
    g.set_output("loss", loss);
    let targets = target_tensors::<f64>(target);
    let mut b = Bindings::new();
    b.bind("logits", &pred.logits).bind("offsets", &pred.offsets);
    for (name, t) in &targets {
        b.bind(*name, t);
    }
    Ok(g.evaluate(&b)?.into_output("loss")?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Array;
    use crate::autodiff::grad_check_steps;
    use crate::nn::param_names;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn dims() -> DetDims {
        DetDims {
            img_channels: 3,
            pts_channels: 2,
            hidden: 4,
            height: 5,
            width: 5,
        }
    }

    fn random_tensor(shape: &[usize], scale: f64, r: &mut ChaCha8Rng) -> Array {
        Tensor::from_fn(shape, |_| r.random_range(-scale..scale))
    }

    fn target(h: usize, w: usize, occupied: &[(usize, usize, f64, f64)]) -> DetectionTarget {
        let mut occupancy = vec![false; h * w];
        let mut off = vec![0.0; 2 * h * w];
        for &(r, c, dx, dy) in occupied {
            occupancy[r * w + c] = true;
            off[r * w + c] = dx;
            off[h * w + r * w + c] = dy;
        }
        DetectionTarget {
            height: h,
            width: w,
            occupancy,
            offsets: Tensor::new(vec![2, h, w], off).unwrap(),
        }
    }

    #[test]
    fn zero_inputs_zero_biases_give_zero_logits() {
        let d = dims();
        let mut p = Params::new();
        init_detector(&mut p, d, &mut rng(1));
        p.get_mut("det.cls.b").unwrap().data_mut().fill(0.0);
        let det = Detector::new(d).unwrap();
        let out = det
            .detect(&p, &Tensor::zeros(&d.feature_shape(Modality::Img)), &Tensor::zeros(&d.feature_shape(Modality::Pts)))
            .unwrap();
        assert!(out.logits.data().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn classification_bias_starts_at_prior() {
        let mut p = Params::new();
        init_detector(&mut p, dims(), &mut rng(1));
        let b = p.get("det.cls.b").unwrap().item();
        approx::assert_abs_diff_eq!(sigmoid(b), PRIOR_OCCUPANCY, epsilon = 1e-12);
    }

    #[test]
    fn detection_is_deterministic() {
        let d = dims();
        let mut r = rng(2);
        let mut p = Params::new();
        init_detector(&mut p, d, &mut r);
        let img = random_tensor(&d.feature_shape(Modality::Img), 1.0, &mut r);
        let pts = random_tensor(&d.feature_shape(Modality::Pts), 1.0, &mut r);
        let det = Detector::new(d).unwrap();
        assert_eq!(det.detect(&p, &img, &pts).unwrap(), det.detect(&p, &img, &pts).unwrap());
        let bad = Tensor::zeros(&[3, 5, 4]);
        assert!(det.detect(&p, &bad, &pts).is_err());
    }

    #[test]
    fn gradient_check_through_inputs_and_params() {
        let d = dims();
        for seed in 0..3 {
            let mut r = rng(10 + seed);
            let mut p = Params::new();
            init_detector(&mut p, d, &mut r);
            for (_, t) in p.iter_mut() {
                for v in t.data_mut() {
                    *v += r.random_range(-0.3..0.3);
                }
            }
            let mut g = Graph::new();
            let img = g.input("img", &d.feature_shape(Modality::Img)).unwrap();
            let pts = g.input("pts", &d.feature_shape(Modality::Pts)).unwrap();
            let nodes = build_detect(&mut g, d, img, pts).unwrap();
            let loss = build_det_loss(&mut g, nodes).unwrap();
            g.set_output("loss", loss);
            let xi = random_tensor(&d.feature_shape(Modality::Img), 1.0, &mut r);
            let xp = random_tensor(&d.feature_shape(Modality::Pts), 1.0, &mut r);
            let tgt = target(5, 5, &[(1, 2, 0.2, -0.3), (4, 0, -0.5, 0.1)]);
            let tt = target_tensors::<f64>(&tgt);
            let mut b = Bindings::new();
            p.bind_all(&mut b);
            b.bind("img", &xi).bind("pts", &xp);
            for (n, t) in &tt {
                b.bind(*n, t);
            }
            let mut names = param_names(&g);
            names.extend(["img".to_string(), "pts".to_string()]);
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let rep = grad_check_steps(&g, &b, "loss", &names, &[1e-5]).unwrap();
            assert!(rep.max_relative_error < 1e-4, "{rep:?}");
        }
    }

    #[test]
    fn saturated_correct_prediction_has_tiny_loss() {
        let tgt = target(4, 4, &[(0, 1, 0.25, -0.5), (3, 3, 0.0, 0.4)]);
        let logits = Tensor::from_fn(&[1, 4, 4], |i| if tgt.occupancy[i] { 20.0 } else { -20.0 });
        let pred = Detection {
            logits,
            offsets: tgt.offsets.clone(),
        };
        assert!(det_loss(&pred, &tgt).unwrap() < 1e-6);
    }

    #[test]
    fn empty_scene_zero_logits_is_log_two() {
        let tgt = target(3, 4, &[]);
        let mut r = rng(3);
        let pred = Detection {
            logits: Tensor::zeros(&[1, 3, 4]),
            offsets: random_tensor(&[2, 3, 4], 1.0, &mut r),
        };
        approx::assert_abs_diff_eq!(det_loss(&pred, &tgt).unwrap(), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn loss_matches_straight_loop() {
        let mut r = rng(4);
        let tgt = target(4, 5, &[(0, 0, 0.1, 0.2), (2, 3, -0.4, 0.3), (3, 4, 0.5, -0.5)]);
        let pred = Detection {
            logits: random_tensor(&[1, 4, 5], 4.0, &mut r),
            offsets: random_tensor(&[2, 4, 5], 1.0, &mut r),
        };
        let n = 20;
        let mut bce = 0.0;
        let mut reg = 0.0;
        for i in 0..n {
            let z = pred.logits.data()[i];
            let p = 1.0 / (1.0 + (-z).exp());
            let y = if tgt.occupancy[i] { 1.0 } else { 0.0 };
            bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            if tgt.occupancy[i] {
                for c in 0..2 {
                    reg += (pred.offsets.data()[c * n + i] - tgt.offsets.data()[c * n + i]).powi(2);
                }
            }
        }
        let expect = bce / n as f64 + reg / (2.0 * 3.0);
        approx::assert_abs_diff_eq!(det_loss(&pred, &tgt).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn f1_examples() {
        let tgt = target(2, 3, &[(0, 0, 0.0, 0.0), (1, 2, 0.0, 0.0)]);
        let perfect = Tensor::from_fn(&[1, 2, 3], |i| if tgt.occupancy[i] { 3.0 } else { -3.0 });
        assert_eq!(det_f1(&perfect, &tgt, 0.5).unwrap(), 1.0);
        assert_eq!(det_f1(&Tensor::full(&[1, 2, 3], -1.0), &tgt, 0.5).unwrap(), 0.0);
        // One hit at (0,0), one false alarm at (0,1), one miss at (1,2).
        let mut z = Tensor::full(&[1, 2, 3], -1.0);
        z.data_mut()[0] = 1.0;
        z.data_mut()[1] = 1.0;
        let c = f1_counts(&z, &tgt, 0.5).unwrap();
        assert_eq!(c, F1Counts { tp: 1, fp: 1, fn_: 1 });
        assert_eq!(c.f1(), 0.5);
        let empty = target(2, 3, &[]);
        assert_eq!(det_f1(&Tensor::full(&[1, 2, 3], -1.0), &empty, 0.5).unwrap(), 1.0);
        assert!(det_f1(&z, &tgt, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn f1_is_monotone_in_false_positives(
            occ in prop::collection::vec(any::<bool>(), 16),
            pred in prop::collection::vec(any::<bool>(), 16),
            extra in prop::collection::vec(0usize..16, 1..6),
        ) {
            let occupied: Vec<_> = occ.iter().enumerate().filter(|(_, o)| **o).map(|(i, _)| (i / 4, i % 4, 0.0, 0.0)).collect();
            let tgt = target(4, 4, &occupied);
            let mut z = Tensor::from_fn(&[1, 4, 4], |i| if pred[i] { 2.0 } else { -2.0 });
            let mut prev = det_f1(&z, &tgt, 0.5).unwrap();
            for &i in &extra {
                if !occ[i] {
                    z.data_mut()[i] = 2.0;
                }
                let now = det_f1(&z, &tgt, 0.5).unwrap();
                prop_assert!(now <= prev + 1e-15);
                prev = now;
            }
        }
    }
}
