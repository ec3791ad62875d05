//! History-based feature prediction: a two-layer deformable-attention
//! transformer that predicts the current feature map of a modality from its
//! memory-bank window.

use rand::Rng;

use crate::autodiff::{Border, Graph, NodeId, ParamSet};
use crate::error::{Error, Result};
use crate::nn::{init_linear, linear_cols, linear_rows, normal};
use crate::streams::{FeatureMap, Modality, Source};
use crate::{Bindings, Params, Real, Tensor};

/// Default number of sampling points per query.
pub const DEFAULT_POINTS: usize = 4;

/// Standard deviation of the learnable query embedding at initialisation.
pub const QUERY_INIT_STD: f64 = 0.02;

/// Dimensions of one deformable-attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub query_channels: usize,
    pub kv_channels: usize,
    pub height: usize,
    pub width: usize,
    pub points: usize,
}

impl AttnDims {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

/// Inserts the four linear maps of a layer under `prefix`:
/// `offset` (D→2K), `weight` (D→K), `value` (D_kv→D) and `output` (D→D).
pub fn init_deform_layer(params: &mut Params, prefix: &str, dims: AttnDims, rng: &mut impl Rng) {
    let (d, k) = (dims.query_channels, dims.points);
    init_linear(params, &format!("{prefix}.offset"), 2 * k, d, rng);
    init_linear(params, &format!("{prefix}.weight"), k, d, rng);
    init_linear(params, &format!("{prefix}.value"), d, dims.kv_channels, rng);
    init_linear(params, &format!("{prefix}.output"), d, d, rng);
}

/// Interesting intermediate nodes of a deformable-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct DeformNodes {
    /// `D×H×W` layer output.
    pub output: NodeId,
    /// `(N·K)×2` absolute sampling coordinates `(x, y)`, query-major.
    pub points: NodeId,
    /// `N×K` softmax attention weights.
    pub weights: NodeId,
    /// `N×K` weights actually used to combine values (scaled when an uncertainty map is given).
    pub effective_weights: NodeId,
    /// `N×K` scale factors `1 − s` gathered from the uncertainty softmax.
    pub scale: Option<NodeId>,
    /// `1×H×W` softmax of the uncertainty map over all locations.
    pub uncertainty_softmax: Option<NodeId>,
}

/// Lattice coordinates of every query repeated for each of its `K` points.
pub fn base_grid<T: Real>(dims: AttnDims) -> Tensor<T> {
    let k = dims.points;
    let w = dims.width;
    Tensor::from_fn(&[dims.cells() * k, 2], |i| {
        let (row, coord) = (i / 2, i % 2);
        let cell = row / k;
        let v = if coord == 0 { cell % w } else { cell / w };
        T::from_usize(v).unwrap()
    })
}

/// Builds one deformable-attention layer. `query` is `D_q×H×W`, `kv` is
/// `D_kv×H×W`. When `uncertainty` (`1×H×W`) is given, each attention weight is
/// multiplied by `1 − s`, where `s` is the spatial softmax of the uncertainty
/// map gathered at the sampling point. The scaled weights are not renormalised.
pub fn deform_attn<T: Real>(
    g: &mut Graph<T>,
    prefix: &str,
    dims: AttnDims,
    query: NodeId,
    kv: NodeId,
    uncertainty: Option<NodeId>,
) -> Result<DeformNodes> {
    let AttnDims {
        query_channels: dq,
        kv_channels: dkv,
        height: h,
        width: w,
        points: k,
    } = dims;
    let n = h * w;
    let expect = |g: &Graph<T>, id: NodeId, c: usize, what: &str| {
        if g.shape(id) != [c, h, w] {
            return Err(Error::shape(
                "deform_attn",
                format!("{what} has shape {:?}, expected [{c}, {h}, {w}]", g.shape(id)),
            ));
        }
        Ok(())
    };
    expect(g, query, dq, "query")?;
    expect(g, kv, dkv, "key/value map")?;
    if let Some(u) = uncertainty {
        expect(g, u, 1, "uncertainty map")?;
    }

    let q = g.reshape(query, &[dq, n])?;
    let off = linear_cols(g, &format!("{prefix}.offset"), q, 2 * k)?;
    let off = g.transpose(off)?;
    let off = g.reshape(off, &[n * k, 2])?;
    let grid = g.constant(base_grid(dims));
    let points = g.add(off, grid)?;

    let logits = linear_cols(g, &format!("{prefix}.weight"), q, k)?;
    let logits = g.transpose(logits)?;
    let weights = g.softmax_rows(logits)?;

    let samples = g.bilinear_sample(kv, points)?;
    let values = linear_rows(g, &format!("{prefix}.value"), samples, dq)?;

    let (effective_weights, scale, uncertainty_softmax) = match uncertainty {
        None => (weights, None, None),
        Some(u) => {
            let flat = g.reshape(u, &[1, n])?;
            let s = g.softmax_rows(flat)?;
            let s_map = g.reshape(s, &[1, h, w])?;
            let gathered = g.bilinear_sample_with(s_map, points, Border::Clamp)?;
            let gathered = g.reshape(gathered, &[n, k])?;
            let neg = g.scale(gathered, -1.0);
            let factor = g.shift(neg, 1.0);
            (g.mul(weights, factor)?, Some(factor), Some(s_map))
        }
    };

    let agg = g.point_combine(effective_weights, values)?;
    let agg = g.transpose(agg)?;
    let out = linear_cols(g, &format!("{prefix}.output"), agg, dq)?;
    let output = g.reshape(out, &[dq, h, w])?;
    Ok(DeformNodes {
        output,
        points,
        weights,
        effective_weights,
        scale,
        uncertainty_softmax,
    })
}

/// Shape of a modality's predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HfpDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub tau: usize,
    pub points: usize,
}

impl HfpDims {
    pub fn attn(&self) -> AttnDims {
        AttnDims {
            query_channels: self.channels,
            kv_channels: self.channels,
            height: self.height,
            width: self.width,
            points: self.points,
        }
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

pub fn prefix(m: Modality) -> String {
    format!("hfp.{m}")
}

/// Graph input name of window slot `i` (0 = oldest).
pub fn history_input(m: Modality, i: usize) -> String {
    format!("{m}.hist.{i}")
}

/// Fresh parameters for modality `m`: query embedding, history projection and two layers.
pub fn init_hfp(params: &mut Params, m: Modality, dims: HfpDims, rng: &mut impl Rng) {
    let p = prefix(m);
    let d = dims.channels;
    params.insert(format!("{p}.query"), normal(&dims.feature_shape(), QUERY_INIT_STD, rng));
    init_linear(params, &format!("{p}.history"), d, dims.tau * d, rng);
    for layer in 0..2 {
        init_deform_layer(params, &format!("{p}.layer{layer}"), dims.attn(), rng);
    }
    // F̃ starts at zero so training begins from copy-last.
    params.insert(format!("{p}.layer1.output.w"), Tensor::zeros(&[d, d]));
}

#[derive(Clone, Copy, Debug)]
pub struct PredictNodes {
    /// `F̂ = newest + F̃`.
    pub prediction: NodeId,
    /// Projected `D×H×W` key/value map.
    pub kv: NodeId,
    pub layers: [DeformNodes; 2],
}

/// Builds `F̂` from window nodes ordered oldest to newest.
pub fn build_predict<T: Real>(g: &mut Graph<T>, m: Modality, dims: HfpDims, window: &[NodeId]) -> Result<PredictNodes> {
    if window.len() != dims.tau {
        return Err(Error::contract(format!(
            "{m} predictor expects a window of {} maps, got {}",
            dims.tau,
            window.len()
        )));
    }
    let p = prefix(m);
    let (d, h, w) = (dims.channels, dims.height, dims.width);
    let stacked = g.concat(window)?;
    let stacked = g.reshape(stacked, &[dims.tau * d, h * w])?;
    let kv = linear_cols(g, &format!("{p}.history"), stacked, d)?;
    let kv = g.reshape(kv, &[d, h, w])?;
    let query = g.param(&format!("{p}.query"), &[d, h, w])?;
    let l0 = deform_attn(g, &format!("{p}.layer0"), dims.attn(), query, kv, None)?;
    let l1 = deform_attn(g, &format!("{p}.layer1"), dims.attn(), l0.output, kv, None)?;
    let newest = *window.last().expect("window length checked above");
    let prediction = g.add(newest, l1.output)?;
    Ok(PredictNodes {
        prediction,
        kv,
        layers: [l0, l1],
    })
}

/// Squared ℓ2 distance between a prediction and its target, summed over all elements.
pub fn tempred_loss<T: Real>(g: &mut Graph<T>, prediction: NodeId, target: NodeId) -> Result<NodeId> {
    g.sq_dist(prediction, target)
}

/// Inference-only predictor graph for one modality.
#[derive(Clone, Debug)]
pub struct Predictor<T> {
    modality: Modality,
    dims: HfpDims,
    graph: Graph<T>,
    output: NodeId,
}

impl<T: Real> Predictor<T> {
    pub fn new(modality: Modality, dims: HfpDims) -> Result<Self> {
        let mut graph = Graph::new();
        let shape = dims.feature_shape();
        let window = (0..dims.tau)
            .map(|i| graph.input(&history_input(modality, i), &shape))
            .collect::<Result<Vec<_>>>()?;
        let output = build_predict(&mut graph, modality, dims, &window)?.prediction;
        Ok(Self {
            modality,
            dims,
            graph,
            output,
        })
    }

    pub fn dims(&self) -> HfpDims {
        self.dims
    }

    /// Predicts the next map from a window ordered oldest to newest.
    pub fn predict(&self, params: &ParamSet<T>, window: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if window.len() != self.dims.tau {
            return Err(Error::contract(format!(
                "{} predictor expects a window of {} maps, got {}",
                self.modality,
                self.dims.tau,
                window.len()
            )));
        }
        let mut b = Bindings::new();
        params.bind_all(&mut b);
        for (i, t) in window.iter().enumerate() {
            b.bind(history_input(self.modality, i), t);
        }
        let ev = self.graph.evaluate(&b)?;
        Ok(ev.value(self.output).clone())
    }
}

impl Predictor<f64> {
    /// Predicts the feature map that follows the newest window entry.
    pub fn predict_feature(&self, params: &Params, window: &[&FeatureMap]) -> Result<FeatureMap> {
        let newest = window
            .last()
            .ok_or_else(|| Error::contract("empty prediction window".to_string()))?;
        let data: Vec<_> = window.iter().map(|f| &f.data).collect();
        Ok(FeatureMap {
            modality: self.modality,
            time_index: newest.time_index + 1,
            source: Source::Compensated,
            data: self.predict(params, &data)?,
        })
    }
}
