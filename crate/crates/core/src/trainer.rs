//! Detector pretraining and the two ModalPatch training stages.
//!
//! Every stage is deterministic given the configuration seed: sample order and
//! modality choices come from seeded generators, and per-sample gradients
//! within a batch are summed in sample order.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::config::{OptimConfig, RunConfig};
use crate::detector::{self, build_det_loss, build_detect, detector_input, f1_counts, target_tensors, Detector, F1Counts};
use crate::error::{Error, Result};
use crate::hfp::{self, build_predict, history_input, tempred_loss, Predictor};
use crate::nn::param_names;
use crate::optim::{accumulate, clip_global_norm, scale, AdamW};
use crate::streams::{derive_seed, Corpus, Modality, Stream};
use crate::ucf::{self, build_fuse, build_nll, build_uncertainty, build_variance, feature_input, fuse_loss};
use crate::{Array, Bindings, Graph64, Params};

/// Training stage identifiers; also mixed into seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Detector,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Detector => "detector",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Stage::Detector => 10,
            Stage::Stage1 => 11,
            Stage::Stage2 => 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean total loss over the epoch's samples.
    pub loss: f64,
    /// Mean of each loss term.
    pub terms: BTreeMap<String, f64>,
    /// Validation metrics after the epoch.
    pub validation: BTreeMap<String, f64>,
    /// Wall-clock time; kept out of manifests so they stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
    pub samples_per_epoch: usize,
    /// The detector stage stops early once the validation target is met.
    pub stopped_early: bool,
}

/// A training example: frame `t` of training stream `stream`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub stream: usize,
    pub t: usize,
}

/// Frames feeding the window of frame `t`, oldest first: the previous `tau`
/// frames with frame 0 repeated while history is short.
pub fn window_frames(t: usize, tau: usize) -> Vec<usize> {
    (0..tau).map(|i| (t + i).saturating_sub(tau)).collect()
}

fn samples(streams: &[Stream], first_frame: usize) -> Vec<Sample> {
    streams
        .iter()
        .enumerate()
        .flat_map(|(s, st)| (first_frame..st.frames()).map(move |t| Sample { stream: s, t }))
        .collect()
}

/// Loss graph with named scalar terms.
struct LossGraph {
    graph: Graph64,
    terms: Vec<(String, NodeId)>,
    wrt: Vec<String>,
}

const TOTAL: &str = "loss";

impl LossGraph {
    fn new(graph: Graph64, total: NodeId, terms: Vec<(String, NodeId)>, prefix: &str) -> Self {
        let mut graph = graph;
        graph.set_output(TOTAL, total);
        let wrt = param_names(&graph).into_iter().filter(|n| n.starts_with(prefix)).collect();
        Self { graph, terms, wrt }
    }

    /// Loss terms and gradients of the total for one bound sample.
    fn run(&self, b: &Bindings<'_, f64>) -> Result<(f64, Vec<f64>, Gradients<f64>)> {
        let ev = self.graph.evaluate(b)?;
        let total = ev.output(TOTAL)?.item();
        let terms = self.terms.iter().map(|(_, id)| ev.value(*id).item()).collect();
        let wrt: Vec<&str> = self.wrt.iter().map(String::as_str).collect();
        let grads = ev.backward_wrt(TOTAL, &wrt)?;
        Ok((total, terms, grads))
    }
}

struct EpochAccumulator {
    total: f64,
    terms: Vec<f64>,
    count: usize,
}

impl EpochAccumulator {
    fn new(n_terms: usize) -> Self {
        Self {
            total: 0.0,
            terms: vec![0.0; n_terms],
            count: 0,
        }
    }

    fn add(&mut self, total: f64, terms: &[f64]) {
        self.total += total;
        for (a, b) in self.terms.iter_mut().zip(terms) {
            *a += b;
        }
        self.count += 1;
    }
}

/// Runs one epoch of mini-batch AdamW over `order`, whose entries pair a
/// sample with the index of its loss graph. `bind` fills the sample's data bindings.
#[allow(clippy::too_many_arguments)]
fn run_epoch<'a, F>(
    stage: Stage,
    graphs: &[LossGraph],
    term_names: &[String],
    order: &[(Sample, usize)],
    params: &mut Params,
    opt: &mut AdamW,
    optim: &OptimConfig,
    bind: F,
) -> Result<(f64, BTreeMap<String, f64>)>
where
    F: Fn(Sample, usize) -> Result<Bindings<'a, f64>> + Sync,
{
    let mut acc = EpochAccumulator::new(term_names.len());
    for (batch_id, batch) in order.chunks(optim.batch).enumerate() {
        let snapshot: &Params = params;
        let results: Vec<Result<(f64, Vec<f64>, Gradients<f64>)>> = batch
            .par_iter()
            .map(|&(sample, gi)| {
                let mut b = bind(sample, gi)?;
                snapshot.bind_all(&mut b);
                graphs[gi].run(&b)
            })
            .collect();
        let mut grads = Gradients::new();
        for r in results {
            let (total, terms, g) = r?;
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    stage: stage.name(),
                    batch: batch_id,
                });
            }
            acc.add(total, &terms);
            accumulate(&mut grads, g);
        }
        scale(&mut grads, 1.0 / batch.len() as f64);
        clip_global_norm(&mut grads, optim.clip);
        opt.step(params, &grads)?;
    }
    let n = acc.count.max(1) as f64;
    let terms = term_names
        .iter()
        .zip(&acc.terms)
        .map(|(k, v)| (k.clone(), v / n))
        .collect();
    Ok((acc.total / n, terms))
}

fn bind_targets<'a>(b: &mut Bindings<'a, f64>, stream: &Stream, t: usize) {
    for (name, tensor) in target_tensors::<f64>(&stream.targets[t]) {
        b.bind_owned(name, tensor);
    }
}

fn epoch_order(seed: u64, stage: Stage, epoch: usize, all: &[Sample], graphs: usize) -> Vec<(Sample, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stage.tag(), epoch as u64]));
    let mut order = all.to_vec();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|s| (s, if graphs > 1 { rng.random_range(0..graphs) } else { 0 }))
        .collect()
}

/// Micro-averaged detection F1 of a detector on ground-truth validation features.
pub fn detector_f1(cfg: &RunConfig, det: &Params, streams: &[Stream]) -> Result<f64> {
    let detector = Detector::<f64>::new(cfg.det_dims())?;
    let counts: Vec<Result<F1Counts>> = streams
        .par_iter()
        .map(|s| {
            let mut c = F1Counts::default();
            for t in 0..s.frames() {
                let out = detector.detect(det, &s.feature(t, Modality::Img).data, &s.feature(t, Modality::Pts).data)?;
                c.add(f1_counts(&out.logits, &s.targets[t], cfg.det.threshold)?);
            }
            Ok(c)
        })
        .collect();
    let mut total = F1Counts::default();
    for c in counts {
        total.add(c?);
    }
    Ok(total.f1())
}

/// Trains the detector on ground-truth features of the training streams.
/// Stops once validation F1 reaches the target; fails below the minimum.
pub fn pretrain_detector(cfg: &RunConfig, corpus: &Corpus) -> Result<(Params, StageReport)> {
    let occupied: usize = corpus
        .train
        .iter()
        .flat_map(|s| s.targets.iter())
        .map(|t| t.num_occupied())
        .sum();
    if occupied == 0 {
        return Err(Error::Degenerate(
            "training corpus has no occupied cells; the detector cannot learn".to_string(),
        ));
    }
    let dims = cfg.det_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[Stage::Detector.tag()]));
    let mut params = Params::new();
    detector::init_detector(&mut params, dims, &mut rng);

    let mut g = Graph::new();
    let img = g.input(&detector_input(Modality::Img), &dims.feature_shape(Modality::Img))?;
    let pts = g.input(&detector_input(Modality::Pts), &dims.feature_shape(Modality::Pts))?;
    let nodes = build_detect(&mut g, dims, img, pts)?;
    let loss = build_det_loss(&mut g, nodes)?;
    let graphs = [LossGraph::new(g, loss, vec![], "det.")];

    let all = samples(&corpus.train, 0);
    let optim = &cfg.det.optim;
    let mut opt = AdamW::new(optim.lr, optim.weight_decay);
    let mut report = StageReport {
        stage: Stage::Detector,
        epochs: vec![],
        steps: 0,
        samples_per_epoch: all.len(),
        stopped_early: false,
    };
    let mut f1 = 0.0;
    for epoch in 0..optim.epochs {
        let start = Instant::now();
        let order = epoch_order(cfg.seed, Stage::Detector, epoch, &all, 1);
        let (loss, terms) = run_epoch(
            Stage::Detector,
            &graphs,
            &[],
            &order,
            &mut params,
            &mut opt,
            optim,
            |s, _| {
                let mut b = Bindings::new();
                let st = &corpus.train[s.stream];
                b.bind(detector_input(Modality::Img), &st.feature(s.t, Modality::Img).data);
                b.bind(detector_input(Modality::Pts), &st.feature(s.t, Modality::Pts).data);
                bind_targets(&mut b, st, s.t);
                Ok(b)
            },
        )?;
        f1 = detector_f1(cfg, &params, &corpus.val)?;
        report.epochs.push(EpochLog {
            epoch,
            loss,
            terms,
            validation: BTreeMap::from([("f1".to_string(), f1)]),
            seconds: start.elapsed().as_secs_f64(),
        });
        if f1 >= cfg.det.target_f1 {
            report.stopped_early = epoch + 1 < optim.epochs;
            break;
        }
    }
    report.steps = opt.steps();
    if f1 < cfg.det.min_f1 {
        return Err(Error::Degenerate(format!(
            "detector reached validation F1 {f1:.3} < {} after {} epochs; check the scene generator and detector settings",
            cfg.det.min_f1,
            report.epochs.len()
        )));
    }
    Ok((params, report))
}

fn gt_input(m: Modality) -> String {
    format!("{m}.gt")
}

/// Fresh predictor parameters for both modalities.
pub fn init_hfp_params(cfg: &RunConfig) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[Stage::Stage1.tag()]));
    let mut p = Params::new();
    for m in Modality::ALL {
        hfp::init_hfp(&mut p, m, cfg.hfp_dims(m), &mut rng);
    }
    p
}

/// Fresh fusion parameters.
pub fn init_ucf_params(cfg: &RunConfig) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[Stage::Stage2.tag()]));
    let mut p = Params::new();
    ucf::init_ucf(&mut p, cfg.ucf_dims(), &mut rng);
    p
}

/// Stage-1 loss graph: both predictions with their temporal losses, and the
/// detection loss with `compensated` predicted and the other modality from ground truth.
fn stage1_graph(cfg: &RunConfig, compensated: Modality) -> Result<LossGraph> {
    let mut g = Graph::new();
    let mut pred = [None; 2];
    let mut gt = [None; 2];
    let mut terms = vec![];
    for m in Modality::ALL {
        let dims = cfg.hfp_dims(m);
        let window = (0..cfg.tau)
            .map(|i| g.input(&history_input(m, i), &dims.feature_shape()))
            .collect::<Result<Vec<_>>>()?;
        let target = g.input(&gt_input(m), &dims.feature_shape())?;
        let p = build_predict(&mut g, m, dims, &window)?.prediction;
        terms.push((format!("tempred.{m}"), tempred_loss(&mut g, p, target)?));
        pred[m.index()] = Some(p);
        gt[m.index()] = Some(target);
    }
    let input = |m: Modality| {
        if m == compensated {
            pred[m.index()].unwrap()
        } else {
            gt[m.index()].unwrap()
        }
    };
    let det = build_detect(&mut g, cfg.det_dims(), input(Modality::Img), input(Modality::Pts))?;
    let det_loss = build_det_loss(&mut g, det)?;
    terms.push(("det".to_string(), det_loss));
    let sum = g.add(terms[0].1, terms[1].1)?;
    let total = g.add(sum, det_loss)?;
    Ok(LossGraph::new(g, total, terms, "hfp."))
}

/// Teacher-forced validation MSE of the predictor and the copy-last and zero
/// baselines per modality, over frames `t ≥ 1` (every `stride`-th frame).
pub fn teacher_forced_mse(
    cfg: &RunConfig,
    hfp_params: &Params,
    streams: &[Stream],
    stride: usize,
) -> Result<BTreeMap<String, f64>> {
    let predictors = [
        Predictor::<f64>::new(Modality::Img, cfg.hfp_dims(Modality::Img))?,
        Predictor::<f64>::new(Modality::Pts, cfg.hfp_dims(Modality::Pts))?,
    ];
    let per_stream: Vec<Result<[[f64; 3]; 2]>> = streams
        .par_iter()
        .map(|s| {
            let mut acc = [[0.0; 3]; 2];
            for t in (1..s.frames()).step_by(stride.max(1)) {
                for m in Modality::ALL {
                    let window: Vec<&Array> = window_frames(t, cfg.tau).iter().map(|&f| &s.feature(f, m).data).collect();
                    let pred = predictors[m.index()].predict(hfp_params, &window)?;
                    let gt = &s.feature(t, m).data;
                    let last = &s.feature(t - 1, m).data;
                    acc[m.index()][0] += mse(&pred, gt);
                    acc[m.index()][1] += mse(last, gt);
                    acc[m.index()][2] += gt.sq_norm() / gt.len() as f64;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = [[0.0; 3]; 2];
    let mut n = 0usize;
    for r in per_stream {
        let a = r?;
        for m in 0..2 {
            for k in 0..3 {
                total[m][k] += a[m][k];
            }
        }
    }
    for s in streams {
        n += (1..s.frames()).step_by(stride.max(1)).count();
    }
    let mut out = BTreeMap::new();
    for m in Modality::ALL {
        let row = total[m.index()];
        let d = n.max(1) as f64;
        out.insert(format!("mse_hfp.{m}"), row[0] / d);
        out.insert(format!("mse_copy_last.{m}"), row[1] / d);
        out.insert(format!("mse_zero.{m}"), row[2] / d);
    }
    Ok(out)
}

fn mse(a: &Array, b: &Array) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Frames used for per-epoch validation.
const VALIDATION_STRIDE: usize = 3;

/// Stage 1: trains `hfp.*` with the detector frozen. Windows are built from
/// ground-truth features.
pub fn train_stage1(cfg: &RunConfig, corpus: &Corpus, det: &Params) -> Result<(Params, StageReport)> {
    let graphs = [stage1_graph(cfg, Modality::Img)?, stage1_graph(cfg, Modality::Pts)?];
    let term_names: Vec<String> = graphs[0].terms.iter().map(|(n, _)| n.clone()).collect();
    let mut params = init_hfp_params(cfg).merged(det);
    let all = samples(&corpus.train, 1);
    let optim = &cfg.train;
    let mut opt = AdamW::new(optim.lr, optim.weight_decay);
    let mut report = StageReport {
        stage: Stage::Stage1,
        epochs: vec![],
        steps: 0,
        samples_per_epoch: all.len(),
        stopped_early: false,
    };
    for epoch in 0..optim.epochs {
        let start = Instant::now();
        let order = epoch_order(cfg.seed, Stage::Stage1, epoch, &all, 2);
        let (loss, terms) = run_epoch(
            Stage::Stage1,
            &graphs,
            &term_names,
            &order,
            &mut params,
            &mut opt,
            optim,
            |s, _| {
                let mut b = Bindings::new();
                let st = &corpus.train[s.stream];
                for m in Modality::ALL {
                    for (i, f) in window_frames(s.t, cfg.tau).into_iter().enumerate() {
                        b.bind(history_input(m, i), &st.feature(f, m).data);
                    }
                    b.bind(gt_input(m), &st.feature(s.t, m).data);
                }
                bind_targets(&mut b, st, s.t);
                Ok(b)
            },
        )?;
        let hfp_only = params.filtered("hfp.");
        let validation = teacher_forced_mse(cfg, &hfp_only, &corpus.val, VALIDATION_STRIDE)?;
        report.epochs.push(EpochLog {
            epoch,
            loss,
            terms,
            validation,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    report.steps = opt.steps();
    Ok((params.filtered("hfp."), report))
}

/// Which modalities are compensated in a stage-2 sample; the others are live.
pub const COMPENSATION_PATTERNS: [[bool; 2]; 3] = [[true, false], [false, true], [true, true]];

/// Stage-2 loss graph for one compensation pattern. Live modalities enter
/// fusion as their extracted features and carry no NLL term.
fn stage2_graph(cfg: &RunConfig, compensated: [bool; 2]) -> Result<LossGraph> {
    let dims = cfg.ucf_dims();
    let mut g = Graph::new();
    let mut f = vec![];
    let mut gt = vec![];
    for m in Modality::ALL {
        f.push(g.input(&feature_input(m), &dims.feature_shape(m))?);
        gt.push(g.input(&gt_input(m), &dims.feature_shape(m))?);
    }
    let mut terms = vec![];
    let mut u = vec![];
    for m in Modality::ALL {
        let var = build_variance(&mut g, m, dims, f[m.index()])?;
        let nll = if compensated[m.index()] {
            build_nll(&mut g, f[m.index()], gt[m.index()], var)?
        } else {
            g.constant(Array::scalar(0.0))
        };
        terms.push((format!("nll.{m}"), nll));
        u.push(build_uncertainty(&mut g, var));
    }
    let mut fused = vec![];
    for q in Modality::ALL {
        let (qi, ki) = (q.index(), q.other().index());
        let u_kv = cfg.uncertainty.then_some(u[ki]);
        fused.push(build_fuse(&mut g, q, dims, f[qi], f[ki], u_kv)?.fused);
    }
    terms.push(("fuse".to_string(), fuse_loss(&mut g, fused[0], fused[1], gt[0], gt[1])?));
    let det = build_detect(&mut g, cfg.det_dims(), fused[0], fused[1])?;
    terms.push(("det".to_string(), build_det_loss(&mut g, det)?));
    let mut total = terms[0].1;
    for (_, id) in &terms[1..] {
        total = g.add(total, *id)?;
    }
    Ok(LossGraph::new(g, total, terms, "ucf."))
}

/// Predictions of both modalities for frame `t` from ground-truth windows.
pub fn teacher_forced_predictions(
    cfg: &RunConfig,
    predictors: &[Predictor<f64>; 2],
    hfp_params: &Params,
    stream: &Stream,
    t: usize,
) -> Result<[Array; 2]> {
    let one = |m: Modality| -> Result<Array> {
        let window: Vec<&Array> = window_frames(t, cfg.tau).iter().map(|&f| &stream.feature(f, m).data).collect();
        predictors[m.index()].predict(hfp_params, &window)
    };
    Ok([one(Modality::Img)?, one(Modality::Pts)?])
}

pub fn predictors(cfg: &RunConfig) -> Result<[Predictor<f64>; 2]> {
    Ok([
        Predictor::new(Modality::Img, cfg.hfp_dims(Modality::Img))?,
        Predictor::new(Modality::Pts, cfg.hfp_dims(Modality::Pts))?,
    ])
}

/// Teacher-forced validation MSE of fused features against ground truth, per
/// modality. Each modality is compensated in turn while the other stays live,
/// as on a frame where only that modality is missing.
pub fn teacher_forced_fused_mse(
    cfg: &RunConfig,
    hfp_params: &Params,
    ucf_params: &Params,
    streams: &[Stream],
    stride: usize,
    scaling: bool,
) -> Result<BTreeMap<String, f64>> {
    let preds = predictors(cfg)?;
    let fuser = ucf::Fuser::<f64>::new(cfg.ucf_dims(), scaling)?;
    let per_stream: Vec<Result<([f64; 2], usize)>> = streams
        .par_iter()
        .map(|s| {
            let mut acc = [0.0; 2];
            let mut n = 0;
            for t in (1..s.frames()).step_by(stride.max(1)) {
                let predicted = teacher_forced_predictions(cfg, &preds, hfp_params, s, t)?;
                for m in Modality::ALL {
                    let mut inputs = [&s.feature(t, Modality::Img).data, &s.feature(t, Modality::Pts).data];
                    inputs[m.index()] = &predicted[m.index()];
                    let out = fuser.run(ucf_params, inputs[0], inputs[1])?;
                    acc[m.index()] += mse(&out.fused[m.index()], &s.feature(t, m).data);
                }
                n += 1;
            }
            Ok((acc, n))
        })
        .collect();
    let mut total = [0.0; 2];
    let mut n = 0;
    for r in per_stream {
        let (a, k) = r?;
        total[0] += a[0];
        total[1] += a[1];
        n += k;
    }
    let d = n.max(1) as f64;
    Ok(BTreeMap::from([
        ("mse_fused.img".to_string(), total[0] / d),
        ("mse_fused.pts".to_string(), total[1] / d),
    ]))
}

/// Log of the mean per-location squared residual of the frozen predictor on
/// every `stride`-th training frame, per modality. Starts the variance heads
/// at the right scale.
fn log_residual_prior(cfg: &RunConfig, hfp_params: &Params, streams: &[Stream], stride: usize) -> Result<[f64; 2]> {
    let preds = predictors(cfg)?;
    let per_stream: Vec<Result<([f64; 2], usize)>> = streams
        .par_iter()
        .map(|s| {
            let mut acc = [0.0; 2];
            let mut n = 0;
            for t in (1..s.frames()).step_by(stride.max(1)) {
                let predicted = teacher_forced_predictions(cfg, &preds, hfp_params, s, t)?;
                for m in Modality::ALL {
                    let truth = &s.feature(t, m).data;
                    let cells = truth.shape()[1] * truth.shape()[2];
                    let sq: f64 = predicted[m.index()]
                        .data()
                        .iter()
                        .zip(truth.data())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    acc[m.index()] += sq / cells as f64;
                }
                n += 1;
            }
            Ok((acc, n))
        })
        .collect();
    let mut total = [0.0; 2];
    let mut n = 0;
    for r in per_stream {
        let (a, k) = r?;
        total[0] += a[0];
        total[1] += a[1];
        n += k;
    }
    let d = n.max(1) as f64;
    let bound = ucf::LOG_VAR_BOUND;
    Ok(total.map(|v| (v / d).max(f64::MIN_POSITIVE).ln().clamp(-bound, bound)))
}

const PRIOR_STRIDE: usize = 4;

/// Stage 2: trains `ucf.*` on frozen predictions; `hfp.*` and `det.*` are never
/// updated. Each sample compensates one or both modalities, drawn from
/// [`COMPENSATION_PATTERNS`].
pub fn train_stage2(cfg: &RunConfig, corpus: &Corpus, det: &Params, hfp_params: &Params) -> Result<(Params, StageReport)> {
    let graphs = COMPENSATION_PATTERNS
        .iter()
        .map(|&c| stage2_graph(cfg, c))
        .collect::<Result<Vec<_>>>()?;
    let term_names: Vec<String> = graphs[0].terms.iter().map(|(n, _)| n.clone()).collect();
    let preds = predictors(cfg)?;
    let mut params = init_ucf_params(cfg);
    let prior = log_residual_prior(cfg, hfp_params, &corpus.train, PRIOR_STRIDE)?;
    for m in Modality::ALL {
        params.insert(format!("{}.var.out.b", ucf::prefix(m)), Array::full(&[1], prior[m.index()]));
    }
    let mut params = params.merged(det);
    let all = samples(&corpus.train, 1);
    let optim = &cfg.train;
    let mut opt = AdamW::new(optim.lr, optim.weight_decay);
    let mut report = StageReport {
        stage: Stage::Stage2,
        epochs: vec![],
        steps: 0,
        samples_per_epoch: all.len(),
        stopped_early: false,
    };
    for epoch in 0..optim.epochs {
        let start = Instant::now();
        let order = epoch_order(cfg.seed, Stage::Stage2, epoch, &all, graphs.len());
        let (loss, terms) = run_epoch(
            Stage::Stage2,
            &graphs,
            &term_names,
            &order,
            &mut params,
            &mut opt,
            optim,
            |s, pattern| {
                let mut b = Bindings::new();
                let st = &corpus.train[s.stream];
                let predicted = teacher_forced_predictions(cfg, &preds, hfp_params, st, s.t)?;
                for (m, p) in Modality::ALL.into_iter().zip(predicted) {
                    if COMPENSATION_PATTERNS[pattern][m.index()] {
                        b.bind_owned(feature_input(m), p);
                    } else {
                        b.bind(feature_input(m), &st.feature(s.t, m).data);
                    }
                    b.bind(gt_input(m), &st.feature(s.t, m).data);
                }
                bind_targets(&mut b, st, s.t);
                Ok(b)
            },
        )?;
        let ucf_only = params.filtered("ucf.");
        let mut validation =
            teacher_forced_fused_mse(cfg, hfp_params, &ucf_only, &corpus.val, VALIDATION_STRIDE, cfg.uncertainty)?;
        validation.extend(teacher_forced_mse(cfg, hfp_params, &corpus.val, VALIDATION_STRIDE)?);
        report.epochs.push(EpochLog {
            epoch,
            loss,
            terms,
            validation,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    report.steps = opt.steps();
    Ok((params.filtered("ucf."), report))
}
