//! Synthetic two-modality feature streams.
//!
//! A [`Scene`] is a set of latent objects moving with constant velocity over a
//! bird's-eye grid. Both modalities are rendered from the same scene:
//!
//! * `img` carries appearance: per-class channel groups with a bump coding of
//!   the object's appearance value. Objects beyond `img_range` from the grid
//!   center are attenuated (limited camera range).
//! * `pts` carries geometry only: an occupancy channel plus a bump coding of
//!   the object's radial distance. No class information.
//!
//! Rendering, targets and drop schedules are pure functions of seeds.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Array, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Img,
    Pts,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Img, Modality::Pts];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Img => "img",
            Modality::Pts => "pts",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Img => 0,
            Modality::Pts => 1,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Img => Modality::Pts,
            Modality::Pts => Modality::Img,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a feature map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Extracted,
    Compensated,
    Fused,
}

/// One modality's `D×H×W` feature grid at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub modality: Modality,
    pub time_index: usize,
    pub source: Source,
    pub data: Array,
}

impl FeatureMap {
    pub fn zeros(modality: Modality, time_index: usize, dims: [usize; 3], source: Source) -> Self {
        Self {
            modality,
            time_index,
            source,
            data: Tensor::zeros(&dims),
        }
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }
}

/// Geometry, rendering and corpus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub height: usize,
    pub width: usize,
    pub img_channels: usize,
    pub pts_channels: usize,
    pub frames: usize,
    pub train_streams: usize,
    pub val_streams: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub min_speed: f64,
    pub max_speed: f64,
    pub motion_noise: f64,
    pub blob_std: f64,
    pub noise_std: f64,
    /// Camera range limit in cells from the grid center.
    pub img_range: f64,
    pub far_attenuation: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            img_channels: 16,
            pts_channels: 16,
            frames: 40,
            train_streams: 64,
            val_streams: 16,
            objects_min: 4,
            objects_max: 8,
            min_speed: 0.3,
            max_speed: 1.2,
            motion_noise: 0.05,
            blob_std: 1.5,
            noise_std: 0.02,
            img_range: 12.0,
            far_attenuation: 0.1,
        }
    }
}

/// Hard cap on object speed, in cells per frame.
pub const MAX_SPEED: f64 = 1.5;

impl StreamConfig {
    pub fn channels(&self, m: Modality) -> usize {
        match m {
            Modality::Img => self.img_channels,
            Modality::Pts => self.pts_channels,
        }
    }

    pub fn dims(&self, m: Modality) -> [usize; 3] {
        [self.channels(m), self.height, self.width]
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let check = |ok: bool, key: &'static str, why: &str| {
            if ok {
                Ok(())
            } else {
                Err((key, why.to_string()))
            }
        };
        check(self.height >= 2 && self.width >= 2, "grid.height", "grid must be at least 2x2")?;
        check(self.img_channels >= 2, "img.channels", "need at least 2 channels")?;
        check(self.pts_channels >= 2, "pts.channels", "need at least 2 channels")?;
        check(self.frames >= 2, "streams.frames", "need at least 2 frames")?;
        check(self.objects_min <= self.objects_max, "streams.objects_min", "exceeds objects_max")?;
        check(
            self.min_speed >= 0.0 && self.min_speed <= self.max_speed && self.max_speed <= MAX_SPEED,
            "streams.max_speed",
            "speeds must satisfy 0 <= min <= max <= 1.5",
        )?;
        check(self.motion_noise >= 0.0, "streams.motion_noise", "must be non-negative")?;
        check(self.blob_std > 0.0, "streams.blob_std", "must be positive")?;
        check(self.noise_std >= 0.0, "streams.noise_std", "must be non-negative")?;
        Ok(())
    }
}

/// Mixes a base seed with a sequence of tags into an independent stream seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        z = splitmix(z ^ splitmix(t.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    splitmix(z)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// `(x, y)` = (column, row) in cell units.
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub class: u8,
    pub appearance: f64,
}

/// Latent objects and their per-frame positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub horizon: usize,
    pub motion_noise: f64,
    /// Initial object states.
    pub objects: Vec<SceneObject>,
    /// `trajectories[t][i]` is the position of object `i` at frame `t`.
    pub trajectories: Vec<Vec<[f64; 2]>>,
}

/// Reflects a coordinate into `[0, hi]`, flipping the velocity on each bounce.
fn reflect(mut x: f64, mut v: f64, hi: f64) -> (f64, f64) {
    for _ in 0..8 {
        if x < 0.0 {
            x = -x;
            v = -v;
        } else if x > hi {
            x = 2.0 * hi - x;
            v = -v;
        } else {
            break;
        }
    }
    (x.clamp(0.0, hi), v)
}

/// Generates a scene with `n_objects` constant-velocity objects over `horizon` frames.
pub fn gen_scene(seed: u64, n_objects: usize, horizon: usize, cfg: &StreamConfig) -> Result<Scene> {
    if n_objects < 1 || horizon < 2 {
        return Err(Error::contract(format!(
            "gen_scene needs n_objects >= 1 and T >= 2, got {n_objects} and {horizon}"
        )));
    }
    Ok(gen_scene_unchecked(seed, n_objects, horizon, cfg))
}

fn gen_scene_unchecked(seed: u64, n_objects: usize, horizon: usize, cfg: &StreamConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xmax, ymax) = ((cfg.width - 1) as f64, (cfg.height - 1) as f64);
    let objects: Vec<SceneObject> = (0..n_objects)
        .map(|_| {
            let position = [rng.random::<f64>() * xmax, rng.random::<f64>() * ymax];
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            let speed = cfg.min_speed + rng.random::<f64>() * (cfg.max_speed - cfg.min_speed);
            SceneObject {
                position,
                velocity: [speed * angle.cos(), speed * angle.sin()],
                class: rng.random_range(0..2u8),
                appearance: rng.random::<f64>(),
            }
        })
        .collect();

    let jitter = (cfg.motion_noise > 0.0).then(|| Normal::new(0.0, cfg.motion_noise).unwrap());
    let mut pos: Vec<[f64; 2]> = objects.iter().map(|o| o.position).collect();
    let mut vel: Vec<[f64; 2]> = objects.iter().map(|o| o.velocity).collect();
    let mut trajectories = Vec::with_capacity(horizon);
    trajectories.push(pos.clone());
    for _ in 1..horizon {
        for (p, v) in pos.iter_mut().zip(vel.iter_mut()) {
            let (jx, jy) = match &jitter {
                Some(n) => (n.sample(&mut rng), n.sample(&mut rng)),
                None => (0.0, 0.0),
            };
            let (x, vx) = reflect(p[0] + v[0] + jx, v[0], xmax);
            let (y, vy) = reflect(p[1] + v[1] + jy, v[1], ymax);
            *p = [x, y];
            *v = [vx, vy];
        }
        trajectories.push(pos.clone());
    }
    Scene {
        seed,
        height: cfg.height,
        width: cfg.width,
        horizon,
        motion_noise: cfg.motion_noise,
        objects,
        trajectories,
    }
}

impl Scene {
    pub fn empty(seed: u64, horizon: usize, cfg: &StreamConfig) -> Scene {
        Scene {
            seed,
            height: cfg.height,
            width: cfg.width,
            horizon,
            motion_noise: cfg.motion_noise,
            objects: Vec::new(),
            trajectories: vec![Vec::new(); horizon],
        }
    }

    pub fn positions(&self, t: usize) -> &[[f64; 2]] {
        &self.trajectories[t]
    }
}

/// Gaussian bump coding of a value in `[0, 1]` over `n` evenly spaced centers.
fn bump_code(value: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![value];
    }
    let spacing = 1.0 / (n - 1) as f64;
    (0..n)
        .map(|j| {
            let d = (value - j as f64 * spacing) / spacing;
            (-0.5 * d * d).exp()
        })
        .collect()
}

/// Per-channel amplitudes of one object in a modality.
fn channel_code(m: Modality, obj_class: u8, appearance: f64, pos: [f64; 2], cfg: &StreamConfig) -> Vec<f64> {
    let center = [(cfg.width - 1) as f64 / 2.0, (cfg.height - 1) as f64 / 2.0];
    let dist = ((pos[0] - center[0]).powi(2) + (pos[1] - center[1]).powi(2)).sqrt();
    let d = cfg.channels(m);
    let mut code = vec![0.0; d];
    match m {
        Modality::Img => {
            let group = d / 2;
            let atten = if dist > cfg.img_range { cfg.far_attenuation } else { 1.0 };
            let start = obj_class as usize * group;
            for (j, a) in bump_code(appearance, group).into_iter().enumerate() {
                code[start + j] = a * atten;
            }
        }
        Modality::Pts => {
            let r_max = (center[0].powi(2) + center[1].powi(2)).sqrt().max(1e-9);
            code[0] = 1.0;
            for (j, a) in bump_code((dist / r_max).min(1.0), d - 1).into_iter().enumerate() {
                code[1 + j] = a;
            }
        }
    }
    code
}

/// Renders the ground-truth (extracted) features of frame `t`.
pub fn render_features(
    scene: &Scene,
    t: usize,
    m: Modality,
    cfg: &StreamConfig,
    noise_seed: u64,
) -> Result<FeatureMap> {
    if t >= scene.horizon {
        return Err(Error::contract(format!("frame {t} outside horizon {}", scene.horizon)));
    }
    let (h, w) = (cfg.height, cfg.width);
    let d = cfg.channels(m);
    let plane = h * w;
    let mut data = vec![0.0; d * plane];
    let inv = 1.0 / (2.0 * cfg.blob_std * cfg.blob_std);
    let reach = (4.0 * cfg.blob_std).ceil() as isize;
    for (obj, &pos) in scene.objects.iter().zip(scene.positions(t)) {
        let code = channel_code(m, obj.class, obj.appearance, pos, cfg);
        let (cx, cy) = (pos[0].round() as isize, pos[1].round() as isize);
        for y in (cy - reach).max(0)..(cy + reach + 1).min(h as isize) {
            for x in (cx - reach).max(0)..(cx + reach + 1).min(w as isize) {
                let (dx, dy) = (x as f64 - pos[0], y as f64 - pos[1]);
                let b = (-(dx * dx + dy * dy) * inv).exp();
                let cell = y as usize * w + x as usize;
                for (c, &a) in code.iter().enumerate() {
                    if a != 0.0 {
                        data[c * plane + cell] += a * b;
                    }
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, &[scene.seed, t as u64, m.index() as u64]));
        let normal = Normal::new(0.0, cfg.noise_std).unwrap();
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(FeatureMap {
        modality: m,
        time_index: t,
        source: Source::Extracted,
        data: Tensor::new(vec![d, h, w], data)?,
    })
}

/// Cell-level detection target.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTarget {
    pub height: usize,
    pub width: usize,
    /// Row-major `H×W`.
    pub occupancy: Vec<bool>,
    /// `2×H×W`: x offset then y offset of the object from its cell center.
    /// Zero where unoccupied.
    pub offsets: Array,
}

impl DetectionTarget {
    pub fn num_occupied(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn occupancy_map(&self) -> Array {
        let data = self.occupancy.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![1, self.height, self.width], data).unwrap()
    }
}

/// Marks each object's nearest cell (round half to even) and stores the sub-cell offset.
pub fn render_targets(scene: &Scene, t: usize) -> Result<DetectionTarget> {
    if t >= scene.horizon {
        return Err(Error::contract(format!("frame {t} outside horizon {}", scene.horizon)));
    }
    let (h, w) = (scene.height, scene.width);
    let mut occupancy = vec![false; h * w];
    let mut offsets = vec![0.0; 2 * h * w];
    for &[x, y] in scene.positions(t) {
        let col = (x.round_ties_even() as usize).min(w - 1);
        let row = (y.round_ties_even() as usize).min(h - 1);
        let cell = row * w + col;
        occupancy[cell] = true;
        offsets[cell] = x - col as f64;
        offsets[h * w + cell] = y - row as f64;
    }
    Ok(DetectionTarget {
        height: h,
        width: w,
        occupancy,
        offsets: Tensor::new(vec![2, h, w], offsets)?,
    })
}

/// Per-frame availability of each modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropSchedule {
    pub frames: usize,
    pub rate_img: f64,
    pub rate_pts: f64,
    pub seed: u64,
    /// `available[t][m]`, indexed by [`Modality::index`].
    pub available: Vec<[bool; 2]>,
}

/// Source of per-frame availability draws. Only independent drops are
/// provided; temporally correlated (bursty) outages plug in here.
pub trait DropProcess {
    fn next_frame(&mut self) -> [bool; 2];
}

/// Independent Bernoulli drops per frame and modality.
///
/// Both uniforms are drawn for every frame regardless of the rates, so two
/// schedules from the same seed are nested: every frame dropped at a lower
/// rate is also dropped at a higher one.
pub struct IndependentDrops {
    rng: ChaCha8Rng,
    rates: [f64; 2],
}

impl IndependentDrops {
    pub fn new(seed: u64, rate_img: f64, rate_pts: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            rates: [rate_img, rate_pts],
        }
    }
}

impl DropProcess for IndependentDrops {
    fn next_frame(&mut self) -> [bool; 2] {
        let u: [f64; 2] = [self.rng.random(), self.rng.random()];
        [u[0] >= self.rates[0], u[1] >= self.rates[1]]
    }
}

pub fn gen_drop_schedule(seed: u64, frames: usize, rate_img: f64, rate_pts: f64) -> Result<DropSchedule> {
    for r in [rate_img, rate_pts] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::contract(format!("drop rate {r} outside [0, 1]")));
        }
    }
    let mut process = IndependentDrops::new(seed, rate_img, rate_pts);
    let available = (0..frames).map(|_| process.next_frame()).collect();
    Ok(DropSchedule {
        frames,
        rate_img,
        rate_pts,
        seed,
        available,
    })
}

impl DropSchedule {
    pub fn all_available(frames: usize) -> Self {
        Self {
            frames,
            rate_img: 0.0,
            rate_pts: 0.0,
            seed: 0,
            available: vec![[true, true]; frames],
        }
    }

    pub fn is_available(&self, t: usize, m: Modality) -> bool {
        self.available[t][m.index()]
    }
}

/// A rendered stream: scene, per-frame features of both modalities, targets.
#[derive(Clone, Debug)]
pub struct Stream {
    pub id: usize,
    pub noise_seed: u64,
    pub scene: Scene,
    /// `features[t][m]`.
    pub features: Vec<[FeatureMap; 2]>,
    pub targets: Vec<DetectionTarget>,
}

impl Stream {
    pub fn render(id: usize, scene: Scene, cfg: &StreamConfig, noise_seed: u64) -> Result<Stream> {
        let mut features = Vec::with_capacity(scene.horizon);
        let mut targets = Vec::with_capacity(scene.horizon);
        for t in 0..scene.horizon {
            features.push([
                render_features(&scene, t, Modality::Img, cfg, noise_seed)?,
                render_features(&scene, t, Modality::Pts, cfg, noise_seed)?,
            ]);
            targets.push(render_targets(&scene, t)?);
        }
        Ok(Stream {
            id,
            noise_seed,
            scene,
            features,
            targets,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.len()
    }

    pub fn feature(&self, t: usize, m: Modality) -> &FeatureMap {
        &self.features[t][m.index()]
    }
}

/// Seeds of one stream within a corpus split.
fn stream_seeds(seed: u64, split: u64, id: usize) -> (u64, u64) {
    (
        derive_seed(seed, &[split, id as u64, 1]),
        derive_seed(seed, &[split, id as u64, 2]),
    )
}

pub const TRAIN_SPLIT: u64 = 0;
pub const VAL_SPLIT: u64 = 1;

/// Generates and renders stream `id` of a split.
pub fn gen_stream(cfg: &StreamConfig, seed: u64, split: u64, id: usize) -> Result<Stream> {
    let (scene_seed, noise_seed) = stream_seeds(seed, split, id);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, &[7]));
    let n = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let scene = if n == 0 {
        Scene::empty(scene_seed, cfg.frames, cfg)
    } else {
        gen_scene_unchecked(scene_seed, n, cfg.frames, cfg)
    };
    Stream::render(id, scene, cfg, noise_seed)
}

/// Training and validation streams.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<Stream>,
    pub val: Vec<Stream>,
}

impl Corpus {
    pub fn generate(cfg: &StreamConfig, seed: u64) -> Result<Corpus> {
        let train = (0..cfg.train_streams)
            .map(|i| gen_stream(cfg, seed, TRAIN_SPLIT, i))
            .collect::<Result<_>>()?;
        let val = (0..cfg.val_streams)
            .map(|i| gen_stream(cfg, seed, VAL_SPLIT, i))
            .collect::<Result<_>>()?;
        Ok(Corpus { train, val })
    }
}

/// Seed of the evaluation drop schedule of validation stream `id`. Shared by all
/// policies and rates so comparisons are paired.
pub fn schedule_seed(seed: u64, id: usize) -> u64 {
    derive_seed(seed, &[VAL_SPLIT, id as u64, 3])
}

#[derive(Serialize, Deserialize)]
struct StreamMeta {
    id: usize,
    noise_seed: u64,
    dims: [[usize; 3]; 2],
    scene: Scene,
}

fn write_f64s(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 8 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes, found {}", expected * 8, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes `scene_<id>/meta.json`, `scene_<id>/img_<t>.bin` and `scene_<id>/pts_<t>.bin`.
pub fn write_stream(dir: &Path, stream: &Stream) -> Result<()> {
    let sdir = dir.join(format!("scene_{}", stream.id));
    fs::create_dir_all(&sdir)?;
    let dims = [stream.feature(0, Modality::Img).data.shape(), stream.feature(0, Modality::Pts).data.shape()]
        .map(|s| [s[0], s[1], s[2]]);
    let meta = StreamMeta {
        id: stream.id,
        noise_seed: stream.noise_seed,
        dims,
        scene: stream.scene.clone(),
    };
    fs::write(sdir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    for (t, pair) in stream.features.iter().enumerate() {
        for fm in pair {
            write_f64s(&sdir.join(format!("{}_{t}.bin", fm.modality)), fm.data.data())?;
        }
    }
    Ok(())
}

pub fn read_stream(dir: &Path, id: usize) -> Result<Stream> {
    let sdir = dir.join(format!("scene_{id}"));
    let meta_path = sdir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingArtifact(meta_path));
    }
    let meta: StreamMeta = serde_json::from_slice(&fs::read(&meta_path)?)?;
    let mut features = Vec::with_capacity(meta.scene.horizon);
    let mut targets = Vec::with_capacity(meta.scene.horizon);
    for t in 0..meta.scene.horizon {
        let load = |m: Modality| -> Result<FeatureMap> {
            let dims = meta.dims[m.index()];
            let data = read_f64s(&sdir.join(format!("{m}_{t}.bin")), dims.iter().product())?;
            Ok(FeatureMap {
                modality: m,
                time_index: t,
                source: Source::Extracted,
                data: Tensor::new(dims.to_vec(), data)?,
            })
        };
        features.push([load(Modality::Img)?, load(Modality::Pts)?]);
        targets.push(render_targets(&meta.scene, t)?);
    }
    Ok(Stream {
        id: meta.id,
        noise_seed: meta.noise_seed,
        scene: meta.scene,
        features,
        targets,
    })
}

pub fn write_schedule(dir: &Path, id: usize, schedule: &DropSchedule) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("schedule_{id}.json")), serde_json::to_vec_pretty(schedule)?)?;
    Ok(())
}

pub fn read_schedule(dir: &Path, id: usize) -> Result<DropSchedule> {
    let path = dir.join(format!("schedule_{id}.json"));
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    Ok(serde_json::from_slice(&fs::read(&path)?)?)
}
