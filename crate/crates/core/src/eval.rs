//! Streaming inference under drop schedules, compensation baselines, metrics
//! and sweep reports.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{FuseWhen, RunConfig};
use crate::detector::{f1_counts, Detection, Detector, F1Counts};
use crate::error::{Error, Result};
use crate::hfp::Predictor;
use crate::membank::MemoryBank;
use crate::streams::{gen_drop_schedule, schedule_seed, DropSchedule, FeatureMap, Modality, Source, Stream};
use crate::trainer::{predictors, teacher_forced_predictions};
use crate::ucf::Fuser;
use crate::{Array, Params, Tensor};

/// How a missing modality is compensated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "zerofill")]
    ZeroFill,
    #[serde(rename = "copylast")]
    CopyLast,
    #[serde(rename = "kalman")]
    Kalman,
    #[serde(rename = "hfp")]
    Hfp,
    #[serde(rename = "hfp+ucf")]
    HfpUcf,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::ZeroFill,
        Policy::CopyLast,
        Policy::Kalman,
        Policy::Hfp,
        Policy::HfpUcf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::ZeroFill => "zerofill",
            Policy::CopyLast => "copylast",
            Policy::Kalman => "kalman",
            Policy::Hfp => "hfp",
            Policy::HfpUcf => "hfp+ucf",
        }
    }

    pub fn needs_hfp(self) -> bool {
        matches!(self, Policy::Hfp | Policy::HfpUcf)
    }

    pub fn needs_ucf(self) -> bool {
        self == Policy::HfpUcf
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy `{s}` (expected one of zerofill, copylast, kalman, hfp, hfp+ucf)"))
    }
}

/// Trained parameters. Only the detector is mandatory.
#[derive(Clone, Debug)]
pub struct Models {
    pub det: Params,
    pub hfp: Option<Params>,
    pub ucf: Option<Params>,
}

/// Independent constant-velocity Kalman filters, one per feature cell.
/// State is `[value, rate]` with prior mean 0 and identity covariance.
#[derive(Clone, Debug)]
pub struct CellKalman {
    q: f64,
    r: f64,
    x: Vec<[f64; 2]>,
    /// Symmetric covariance as `[p00, p01, p11]`.
    p: Vec<[f64; 3]>,
    shape: Vec<usize>,
}

impl CellKalman {
    pub fn new(shape: &[usize], q: f64, r: f64) -> Self {
        let n = shape.iter().product();
        Self {
            q,
            r,
            x: vec![[0.0; 2]; n],
            p: vec![[1.0, 0.0, 1.0]; n],
            shape: shape.to_vec(),
        }
    }

    /// Advances every cell one step and returns the predicted values.
    pub fn predict(&mut self) -> Array {
        for (x, p) in self.x.iter_mut().zip(&mut self.p) {
            x[0] += x[1];
            let [p00, p01, p11] = *p;
            *p = [p00 + 2.0 * p01 + p11 + self.q, p01 + p11, p11 + self.q];
        }
        self.current()
    }

    /// Current value estimates.
    pub fn current(&self) -> Array {
        Tensor::from_fn(&self.shape, |i| self.x[i][0])
    }

    /// Incorporates an observation of every cell.
    pub fn update(&mut self, z: &Array) -> Result<()> {
        if z.shape() != self.shape.as_slice() {
            return Err(Error::shape(
                "kalman",
                format!("observation {:?} vs filter {:?}", z.shape(), self.shape),
            ));
        }
        for ((x, p), &obs) in self.x.iter_mut().zip(&mut self.p).zip(z.data()) {
            let [p00, p01, p11] = *p;
            let s = p00 + self.r;
            let (k0, k1) = (p00 / s, p01 / s);
            let innovation = obs - x[0];
            x[0] += k0 * innovation;
            x[1] += k1 * innovation;
            *p = [(1.0 - k0) * p00, (1.0 - k0) * p01, p11 - k1 * p01];
        }
        Ok(())
    }
}

/// Per-cell and mean squared error between two feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMse {
    /// `1×H×W` channel-mean squared difference.
    pub map: Array,
    /// Spatial mean of `map`.
    pub scalar: f64,
}

pub fn feature_mse(pred: &Array, truth: &Array) -> Result<FeatureMse> {
    if pred.shape() != truth.shape() || pred.shape().len() != 3 {
        return Err(Error::shape(
            "feature_mse",
            format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        ));
    }
    let (d, h, w) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let plane = h * w;
    let mut map = vec![0.0; plane];
    for c in 0..d {
        let a = &pred.data()[c * plane..(c + 1) * plane];
        let b = &truth.data()[c * plane..(c + 1) * plane];
        for ((m, x), y) in map.iter_mut().zip(a).zip(b) {
            *m += (x - y) * (x - y);
        }
    }
    for m in &mut map {
        *m /= d as f64;
    }
    let scalar = map.iter().sum::<f64>() / plane as f64;
    Ok(FeatureMse {
        map: Tensor::new(vec![1, h, w], map)?,
        scalar,
    })
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// input is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Everything needed to run one policy over streams.
pub struct Pipeline<'a> {
    cfg: &'a RunConfig,
    policy: Policy,
    models: &'a Models,
    detector: Detector<f64>,
    predictors: Option<[Predictor<f64>; 2]>,
    fuser: Option<Fuser<f64>>,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a RunConfig, policy: Policy, models: &'a Models) -> Result<Self> {
        if policy.needs_hfp() && models.hfp.is_none() {
            return Err(Error::contract(format!("policy {policy} needs a stage-1 checkpoint")));
        }
        if policy.needs_ucf() && models.ucf.is_none() {
            return Err(Error::contract(format!("policy {policy} needs a stage-2 checkpoint")));
        }
        Ok(Self {
            cfg,
            policy,
            models,
            detector: Detector::new(cfg.det_dims())?,
            predictors: if policy.needs_hfp() { Some(predictors(cfg)?) } else { None },
            fuser: if policy.needs_ucf() {
                Some(Fuser::new(cfg.ucf_dims(), cfg.uncertainty)?)
            } else {
                None
            },
        })
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn detect(&self, img: &Array, pts: &Array) -> Result<Detection> {
        self.detector.detect(&self.models.det, img, pts)
    }
}

/// One frame of streaming inference.
#[derive(Clone, Debug)]
pub struct FrameResult {
    pub t: usize,
    pub available: [bool; 2],
    /// Whether fused features were fed to the detector.
    pub fused: bool,
    /// Detector inputs.
    pub inputs: [Array; 2],
    pub detection: Detection,
    pub counts: F1Counts,
    /// Feature MSE of each detector input against ground truth, for missing modalities.
    pub mse: [Option<FeatureMse>; 2],
    /// Bank contents after the update, as `(time_index, source)` oldest first.
    pub banks: [Vec<(usize, Source)>; 2],
}

impl FrameResult {
    pub fn both_dropped(&self) -> bool {
        !self.available[0] && !self.available[1]
    }
}

/// Runs a stream frame by frame. Available modalities use the extracted
/// feature; missing ones use the policy's compensation, which is also what
/// enters the bank.
pub fn run_inference(pipe: &Pipeline<'_>, stream: &Stream, schedule: &DropSchedule) -> Result<Vec<FrameResult>> {
    if schedule.frames != stream.frames() || schedule.available.len() != stream.frames() {
        return Err(Error::contract(format!(
            "schedule covers {} frames, stream {} has {}",
            schedule.available.len(),
            stream.id,
            stream.frames()
        )));
    }
    let cfg = pipe.cfg;
    let mut banks = Modality::ALL.map(|m| MemoryBank::new(m, cfg.tau));
    let mut kalman = Modality::ALL.map(|m| CellKalman::new(&cfg.streams.dims(m), cfg.kalman_q, cfg.kalman_r));
    let mut out = Vec::with_capacity(stream.frames());
    for t in 0..stream.frames() {
        let available = [schedule.available[t][0], schedule.available[t][1]];
        let mut used: Vec<FeatureMap> = Vec::with_capacity(2);
        for m in Modality::ALL {
            let i = m.index();
            let prior = kalman[i].predict();
            if available[i] {
                let extracted = stream.feature(t, m).clone();
                kalman[i].update(&extracted.data)?;
                banks[i].update(true, Some(extracted.clone()), None)?;
                used.push(extracted);
            } else {
                let compensated = compensate(pipe, &banks[i], m, t, prior)?;
                banks[i].update(false, None, Some(compensated.clone()))?;
                used.push(compensated);
            }
            if !banks[i].is_continuous_up_to(t) {
                return Err(Error::contract(format!("{m} bank lost continuity at frame {t}")));
            }
        }
        let any_missing = available.contains(&false);
        let fuse = pipe.policy == Policy::HfpUcf && (any_missing || cfg.fuse_when == FuseWhen::Always);
        let inputs: [Array; 2] = if fuse {
            let fuser = pipe.fuser.as_ref().expect("fuser present for hfp+ucf");
            let ucf = pipe.models.ucf.as_ref().expect("checked in Pipeline::new");
            fuser.run(ucf, &used[0].data, &used[1].data)?.fused
        } else {
            let [a, b]: [FeatureMap; 2] = used.try_into().expect("two modalities");
            [a.data, b.data]
        };
        let detection = pipe.detect(&inputs[0], &inputs[1])?;
        let counts = f1_counts(&detection.logits, &stream.targets[t], cfg.det.threshold)?;
        let mut mse = [None, None];
        for m in Modality::ALL {
            if !available[m.index()] {
                mse[m.index()] = Some(feature_mse(&inputs[m.index()], &stream.feature(t, m).data)?);
            }
        }
        out.push(FrameResult {
            t,
            available,
            fused: fuse,
            inputs,
            detection,
            counts,
            mse,
            banks: banks
                .each_ref()
                .map(|b| b.entries().map(|e| (e.time_index, e.source)).collect()),
        });
    }
    Ok(out)
}

fn compensate(pipe: &Pipeline<'_>, bank: &MemoryBank, m: Modality, t: usize, prior: Array) -> Result<FeatureMap> {
    let dims = pipe.cfg.streams.dims(m);
    let newest = match bank.newest() {
        Some(f) => f,
        None => return Ok(FeatureMap::zeros(m, t, dims, Source::Compensated)),
    };
    let data = match pipe.policy {
        Policy::ZeroFill => Tensor::zeros(&dims),
        Policy::CopyLast => newest.data.clone(),
        Policy::Kalman => prior,
        Policy::Hfp | Policy::HfpUcf => {
            let predictors = pipe.predictors.as_ref().expect("predictors present for learned policies");
            let hfp = pipe.models.hfp.as_ref().expect("checked in Pipeline::new");
            return predictors[m.index()].predict_feature(hfp, &bank.window()?);
        }
    };
    Ok(FeatureMap {
        modality: m,
        time_index: t,
        source: Source::Compensated,
        data,
    })
}

/// Detector outputs on the extracted features of every frame, without any compensation machinery.
pub fn detector_only(pipe: &Pipeline<'_>, stream: &Stream) -> Result<Vec<Detection>> {
    (0..stream.frames())
        .map(|t| pipe.detect(&stream.feature(t, Modality::Img).data, &stream.feature(t, Modality::Pts).data))
        .collect()
}

/// Aggregated metrics of one policy at one drop rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: Policy,
    pub drop_rate: f64,
    /// Mean feature MSE over frames where the modality was missing; 0 when none were.
    pub mse_img: f64,
    pub mse_pts: f64,
    pub f1: f64,
    /// F1 over frames where both modalities were missing; absent when there were none.
    pub f1_bothdrop: Option<f64>,
    /// Wall-clock seconds; only recorded when timing is enabled.
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, Default)]
struct Tally {
    counts: F1Counts,
    both: F1Counts,
    both_frames: usize,
    mse: [f64; 2],
    missing: [usize; 2],
}

impl Tally {
    fn add_frames(&mut self, frames: &[FrameResult]) {
        for f in frames {
            self.counts.add(f.counts);
            if f.both_dropped() {
                self.both.add(f.counts);
                self.both_frames += 1;
            }
            for i in 0..2 {
                if let Some(m) = &f.mse[i] {
                    self.mse[i] += m.scalar;
                    self.missing[i] += 1;
                }
            }
        }
    }

    fn merge(&mut self, o: &Tally) {
        self.counts.add(o.counts);
        self.both.add(o.both);
        self.both_frames += o.both_frames;
        for i in 0..2 {
            self.mse[i] += o.mse[i];
            self.missing[i] += o.missing[i];
        }
    }

    fn row(&self, policy: Policy, drop_rate: f64, seconds: Option<f64>) -> SweepRow {
        let mean = |i: usize| {
            if self.missing[i] == 0 {
                0.0
            } else {
                self.mse[i] / self.missing[i] as f64
            }
        };
        SweepRow {
            policy,
            drop_rate,
            mse_img: mean(0),
            mse_pts: mean(1),
            f1: self.counts.f1(),
            f1_bothdrop: (self.both_frames > 0).then(|| self.both.f1()),
            seconds,
        }
    }
}

/// Schedule of validation stream `id` at `rate`, shared by every policy.
pub fn eval_schedule(cfg: &RunConfig, stream: &Stream, rate: f64) -> Result<DropSchedule> {
    gen_drop_schedule(schedule_seed(cfg.seed, stream.id), stream.frames(), rate, rate)
}

/// Schedules of every stream at `rate`.
pub fn eval_schedules(cfg: &RunConfig, streams: &[Stream], rate: f64) -> Result<Vec<DropSchedule>> {
    streams.iter().map(|s| eval_schedule(cfg, s, rate)).collect()
}

/// Runs one policy at one drop rate over `streams` and aggregates.
/// `schedules[i]` belongs to `streams[i]`.
pub fn evaluate(
    cfg: &RunConfig,
    models: &Models,
    policy: Policy,
    rate: f64,
    streams: &[Stream],
    schedules: &[DropSchedule],
) -> Result<SweepRow> {
    if schedules.len() != streams.len() {
        return Err(Error::contract(format!(
            "{} schedules for {} streams",
            schedules.len(),
            streams.len()
        )));
    }
    let start = Instant::now();
    let pipe = Pipeline::new(cfg, policy, models)?;
    let tallies: Vec<Result<Tally>> = streams
        .par_iter()
        .zip(schedules)
        .map(|(s, schedule)| {
            let frames = run_inference(&pipe, s, schedule)?;
            let mut t = Tally::default();
            t.add_frames(&frames);
            Ok(t)
        })
        .collect();
    let mut total = Tally::default();
    for t in tallies {
        total.merge(&t?);
    }
    let seconds = cfg.eval.timing.then(|| start.elapsed().as_secs_f64());
    Ok(total.row(policy, rate, seconds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// The configuration the sweep ran with, in config-file syntax.
    pub config: String,
}

impl SweepReport {
    pub fn row(&self, policy: Policy, rate: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.policy == policy && r.drop_rate == rate)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("policy,drop_rate,mse_img,mse_pts,f1,f1_bothdrop,seconds\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.8},{:.8},{:.6},{},{}\n",
                r.policy,
                r.drop_rate,
                r.mse_img,
                r.mse_pts,
                r.f1,
                opt(r.f1_bothdrop),
                opt(r.seconds)
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Policies whose checkpoints are available, in canonical order.
pub fn runnable_policies(models: &Models) -> Vec<Policy> {
    Policy::ALL
        .into_iter()
        .filter(|p| (!p.needs_hfp() || models.hfp.is_some()) && (!p.needs_ucf() || models.ucf.is_some()))
        .collect()
}

/// Every policy at every configured rate over `streams`; `schedules[r]` holds
/// the schedules for `cfg.eval.rates[r]`.
pub fn sweep(cfg: &RunConfig, models: &Models, streams: &[Stream], schedules: &[Vec<DropSchedule>]) -> Result<SweepReport> {
    if schedules.len() != cfg.eval.rates.len() {
        return Err(Error::contract(format!(
            "{} schedule sets for {} rates",
            schedules.len(),
            cfg.eval.rates.len()
        )));
    }
    let mut rows = vec![];
    for policy in Policy::ALL {
        for (&rate, sched) in cfg.eval.rates.iter().zip(schedules) {
            rows.push(evaluate(cfg, models, policy, rate, streams, sched)?);
        }
    }
    Ok(SweepReport {
        rows,
        config: cfg.to_text(),
    })
}

/// Writes 8-bit PGM heatmaps of per-cell feature MSE for the first frames of
/// `stream` with a missing modality, one per policy. Maps of the same frame and
/// modality share one linear scale whose maximum goes into a sidecar JSON.
pub fn write_heatmaps(
    cfg: &RunConfig,
    models: &Models,
    stream: &Stream,
    schedule: &DropSchedule,
    dir: &Path,
) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut runs = vec![];
    for policy in Policy::ALL {
        let pipe = Pipeline::new(cfg, policy, models)?;
        runs.push((policy, run_inference(&pipe, stream, schedule)?));
    }
    let frames: Vec<usize> = (0..stream.frames())
        .filter(|&t| schedule.available[t].contains(&false))
        .take(cfg.eval.heatmap_frames)
        .collect();
    let mut written = vec![];
    for &t in &frames {
        for m in Modality::ALL {
            if schedule.available[t][m.index()] {
                continue;
            }
            let maps: Vec<(Policy, &Array)> = runs
                .iter()
                .filter_map(|(p, r)| r[t].mse[m.index()].as_ref().map(|e| (*p, &e.map)))
                .collect();
            let max = maps
                .iter()
                .flat_map(|(_, a)| a.data().iter().copied())
                .fold(0.0_f64, f64::max);
            for (policy, map) in maps {
                let stem = format!("{}_{}_{}_{}", stream.id, t, m, policy);
                fs::write(dir.join(format!("{stem}.pgm")), pgm(map, max))?;
                let sidecar = serde_json::json!({
                    "stream": stream.id,
                    "t": t,
                    "modality": m.name(),
                    "policy": policy.name(),
                    "drop_rate": schedule.rate_img,
                    "max": max,
                    "mean": map.mean(),
                });
                fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar)? + "\n")?;
                written.push(stem);
            }
        }
    }
    Ok(written)
}

/// Binary PGM with values scaled linearly from `[0, max]` to `[0, 255]`.
pub fn pgm(map: &Array, max: f64) -> Vec<u8> {
    let (h, w) = (map.shape()[map.shape().len() - 2], map.shape()[map.shape().len() - 1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Spearman correlation per modality between predicted variance and the
/// per-location squared residual of teacher-forced predictions.
pub fn uncertainty_calibration(cfg: &RunConfig, hfp: &Params, ucf: &Params, streams: &[Stream]) -> Result<[f64; 2]> {
    let preds = predictors(cfg)?;
    let fuser = Fuser::<f64>::new(cfg.ucf_dims(), cfg.uncertainty)?;
    let per_stream: Vec<Result<[(Vec<f64>, Vec<f64>); 2]>> = streams
        .par_iter()
        .map(|s| {
            let mut acc: [(Vec<f64>, Vec<f64>); 2] = Default::default();
            for t in 1..s.frames() {
                let f_hat = teacher_forced_predictions(cfg, &preds, hfp, s, t)?;
                let out = fuser.run(ucf, &f_hat[0], &f_hat[1])?;
                for m in Modality::ALL {
                    let i = m.index();
                    let err = feature_mse(&f_hat[i], &s.feature(t, m).data)?;
                    let d = f_hat[i].shape()[0] as f64;
                    acc[i].0.extend_from_slice(out.variance[i].data());
                    acc[i].1.extend(err.map.data().iter().map(|v| v * d));
                }
            }
            Ok(acc)
        })
        .collect();
    let mut all: [(Vec<f64>, Vec<f64>); 2] = Default::default();
    for r in per_stream {
        for (a, b) in all.iter_mut().zip(r?) {
            a.0.extend(b.0);
            a.1.extend(b.1);
        }
    }
    Ok(all.map(|(v, e)| spearman(&v, &e).unwrap_or(0.0)))
}
