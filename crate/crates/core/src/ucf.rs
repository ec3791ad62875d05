//! Uncertainty estimation and uncertainty-guided cross-modality fusion.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamSet};
use crate::error::{Error, Result};
use crate::hfp::{deform_attn, init_deform_layer, AttnDims, DeformNodes};
use crate::nn::{init_linear, linear_cols};
use crate::streams::Modality;
use crate::{Array, Bindings, Params, Real, Tensor};

/// Log-variance is clamped to `[-LOG_VAR_BOUND, LOG_VAR_BOUND]`.
pub const LOG_VAR_BOUND: f64 = 10.0;

/// `½·ln 2π`, the per-location NLL at zero residual and unit variance.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UcfDims {
    pub img_channels: usize,
    pub pts_channels: usize,
    pub height: usize,
    pub width: usize,
    pub points: usize,
}

impl UcfDims {
    pub fn channels(&self, m: Modality) -> usize {
        match m {
            Modality::Img => self.img_channels,
            Modality::Pts => self.pts_channels,
        }
    }

    pub fn feature_shape(&self, m: Modality) -> [usize; 3] {
        [self.channels(m), self.height, self.width]
    }

    /// Width of the variance head's hidden layer.
    pub fn hidden(&self, m: Modality) -> usize {
        (self.channels(m) / 2).max(1)
    }

    /// Layer that refines modality `q` by attending to the other modality.
    pub fn attn(&self, q: Modality) -> AttnDims {
        AttnDims {
            query_channels: self.channels(q),
            kv_channels: self.channels(q.other()),
            height: self.height,
            width: self.width,
            points: self.points,
        }
    }
}

pub fn prefix(m: Modality) -> String {
    format!("ucf.{m}")
}

/// Fresh parameters for both modalities: a variance head per modality and a
/// fusion layer per direction (`ucf.<q>.fuse` refines `q` from the other modality).
pub fn init_ucf(params: &mut Params, dims: UcfDims, rng: &mut impl Rng) {
    for m in Modality::ALL {
        let p = prefix(m);
        init_linear(params, &format!("{p}.var.hidden"), dims.hidden(m), dims.channels(m), rng);
        init_linear(params, &format!("{p}.var.out"), 1, dims.hidden(m), rng);
        init_deform_layer(params, &format!("{p}.fuse"), dims.attn(m), rng);
        // The fusion residual starts at zero so training begins from F̂.
        let d = dims.channels(m);
        params.insert(format!("{p}.fuse.output.w"), Tensor::zeros(&[d, d]));
    }
}

/// `σ² = exp(clamp(head(F̂)))` as a `1×H×W` node.
pub fn build_variance<T: Real>(g: &mut Graph<T>, m: Modality, dims: UcfDims, feature: NodeId) -> Result<NodeId> {
    let shape = dims.feature_shape(m);
    if g.shape(feature) != shape {
        return Err(Error::shape(
            "estimate_variance",
            format!("{m} feature has shape {:?}, expected {shape:?}", g.shape(feature)),
        ));
    }
    let p = prefix(m);
    let (h, w) = (dims.height, dims.width);
    let x = g.reshape(feature, &[shape[0], h * w])?;
    let hidden = linear_cols(g, &format!("{p}.var.hidden"), x, dims.hidden(m))?;
    let hidden = g.silu(hidden);
    let log_var = linear_cols(g, &format!("{p}.var.out"), hidden, 1)?;
    let log_var = g.clamp(log_var, -LOG_VAR_BOUND, LOG_VAR_BOUND);
    let var = g.exp(log_var);
    g.reshape(var, &[1, h, w])
}

/// `U = sqrt(σ²)`.
pub fn build_uncertainty<T: Real>(g: &mut Graph<T>, sigma2: NodeId) -> NodeId {
    g.sqrt(sigma2)
}

/// Gaussian negative log-likelihood: sum over locations of
/// `½(‖F̂ᵢ − Fᵢ‖²/σ²ᵢ + ln σ²ᵢ + ln 2π)`, the norm summing over channels.
pub fn build_nll<T: Real>(g: &mut Graph<T>, prediction: NodeId, target: NodeId, sigma2: NodeId) -> Result<NodeId> {
    let s = g.shape(prediction).to_vec();
    if s.len() != 3 || g.shape(sigma2) != [1, s[1], s[2]] {
        return Err(Error::shape(
            "uncert_loss",
            format!("prediction {:?} with variance {:?}", s, g.shape(sigma2)),
        ));
    }
    let r = g.sub(prediction, target)?;
    let r2 = g.square(r);
    let r2 = g.reshape(r2, &[s[0], s[1] * s[2]])?;
    let sq = g.sum_rows(r2)?;
    let sq = g.reshape(sq, &[1, s[1], s[2]])?;
    let ratio = g.div(sq, sigma2)?;
    let log_var = g.log(sigma2);
    let sum = g.add(ratio, log_var)?;
    let total = g.sum(sum);
    let half = g.scale(total, 0.5);
    Ok(g.shift(half, (s[1] * s[2]) as f64 * HALF_LN_2PI))
}

#[derive(Clone, Copy, Debug)]
pub struct FuseNodes {
    /// `F_enh = F̂_q + attention output`.
    pub fused: NodeId,
    pub attn: DeformNodes,
}

/// Refines modality `q` with samples of the other modality. With `u_kv`
/// given, attention weights are scaled down where the key modality is uncertain.
pub fn build_fuse<T: Real>(
    g: &mut Graph<T>,
    q: Modality,
    dims: UcfDims,
    f_q: NodeId,
    f_kv: NodeId,
    u_kv: Option<NodeId>,
) -> Result<FuseNodes> {
    let attn = deform_attn(g, &format!("{}.fuse", prefix(q)), dims.attn(q), f_q, f_kv, u_kv)?;
    let fused = g.add(f_q, attn.output)?;
    Ok(FuseNodes { fused, attn })
}

/// Squared ℓ2 distance of the img pair plus that of the pts pair.
pub fn fuse_loss<T: Real>(
    g: &mut Graph<T>,
    enh_img: NodeId,
    enh_pts: NodeId,
    gt_img: NodeId,
    gt_pts: NodeId,
) -> Result<NodeId> {
    let a = g.sq_dist(enh_img, gt_img)?;
    let b = g.sq_dist(enh_pts, gt_pts)?;
    g.add(a, b)
}

/// Evaluates the NLL directly. Fails on a non-positive or non-finite variance.
pub fn uncert_loss(prediction: &Array, target: &Array, sigma2: &Array) -> Result<f64> {
    let s = prediction.shape();
    if s.len() != 3 || target.shape() != s || sigma2.shape() != [1, s[1], s[2]] {
        return Err(Error::shape(
            "uncert_loss",
            format!("prediction {:?} target {:?} variance {:?}", s, target.shape(), sigma2.shape()),
        ));
    }
    if let Some(v) = sigma2.data().iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::contract(format!("variance must be positive and finite, found {v}")));
    }
    let n = s[1] * s[2];
    let mut total = 0.0;
    for (i, &var) in sigma2.data().iter().enumerate() {
        let sq: f64 = (0..s[0])
            .map(|c| (prediction.data()[c * n + i] - target.data()[c * n + i]).powi(2))
            .sum();
        total += 0.5 * (sq / var + var.ln()) + HALF_LN_2PI;
    }
    Ok(total)
}

/// Elementwise standard deviation. Fails on a non-positive variance.
pub fn uncertainty_map(sigma2: &Array) -> Result<Array> {
    if let Some(v) = sigma2.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::contract(format!("variance must be positive, found {v}")));
    }
    Ok(sigma2.map(f64::sqrt))
}

/// Graph input names used by [`Fuser`].
pub fn feature_input(m: Modality) -> String {
    format!("{m}.compensated")
}

/// Inference graph: variance of both modalities and the fused pair.
#[derive(Clone, Debug)]
pub struct Fuser<T> {
    graph: Graph<T>,
    fused: [NodeId; 2],
    variance: [NodeId; 2],
    scaling: bool,
}

/// Result of [`Fuser::run`], indexed by [`Modality::index`].
#[derive(Clone, Debug)]
pub struct FuseOutput<T> {
    pub fused: [Tensor<T>; 2],
    pub variance: [Tensor<T>; 2],
}

impl<T: Real> Fuser<T> {
    /// `scaling = false` disables the uncertainty scaling of attention weights.
    pub fn new(dims: UcfDims, scaling: bool) -> Result<Self> {
        let mut g = Graph::new();
        let f = [
            g.input(&feature_input(Modality::Img), &dims.feature_shape(Modality::Img))?,
            g.input(&feature_input(Modality::Pts), &dims.feature_shape(Modality::Pts))?,
        ];
        let var = [
            build_variance(&mut g, Modality::Img, dims, f[0])?,
            build_variance(&mut g, Modality::Pts, dims, f[1])?,
        ];
        let u = [build_uncertainty(&mut g, var[0]), build_uncertainty(&mut g, var[1])];
        let mut fused = [f[0]; 2];
        for q in Modality::ALL {
            let (qi, ki) = (q.index(), q.other().index());
            let u_kv = scaling.then_some(u[ki]);
            fused[qi] = build_fuse(&mut g, q, dims, f[qi], f[ki], u_kv)?.fused;
        }
        Ok(Self {
            graph: g,
            fused,
            variance: var,
            scaling,
        })
    }

    pub fn scaling(&self) -> bool {
        self.scaling
    }

    pub fn run(&self, params: &ParamSet<T>, img: &Tensor<T>, pts: &Tensor<T>) -> Result<FuseOutput<T>> {
        let mut b = Bindings::new();
        params.bind_all(&mut b);
        b.bind(feature_input(Modality::Img), img);
        b.bind(feature_input(Modality::Pts), pts);
        let ev = self.graph.evaluate(&b)?;
        Ok(FuseOutput {
            fused: self.fused.map(|id| ev.value(id).clone()),
            variance: self.variance.map(|id| ev.value(id).clone()),
        })
    }
}
