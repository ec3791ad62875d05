//! Command-line entry point. Every path is relative to `--workdir`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{self, Models, Policy};
use crate::gradsuite;
use crate::streams::{read_schedule, read_stream, write_schedule, write_stream, Corpus, DropSchedule, Stream};
use crate::trainer::{self, StageReport};
use crate::Params;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;

/// Caps worker threads; defaults to all cores.
pub const THREADS_ENV: &str = "MODALPATCH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "modalpatch", about = "Modality-drop compensation on synthetic BEV streams")]
pub struct Cli {
    /// Root directory for data, checkpoints, manifests and reports.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Config file (flat `key = value` lines), relative to the workdir.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate training/validation streams and evaluation drop schedules.
    Gen,
    /// Train the detector on ground-truth features.
    Pretrain,
    /// Train the history feature predictor with the detector frozen.
    Train1,
    /// Train uncertainty-guided fusion with predictor and detector frozen.
    Train2,
    /// Evaluate one policy at one drop rate.
    Eval {
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Evaluate every policy at every configured drop rate.
    Sweep,
    /// Finite-difference check of every differentiable block.
    Gradcheck {
        /// Random instances per block.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
}

/// Workdir layout.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("data/train")
    }

    pub fn val_dir(&self) -> PathBuf {
        self.root.join("data/val")
    }

    pub fn schedule_dir(&self, rate: f64) -> PathBuf {
        self.root.join(format!("data/schedules/rate_{rate}"))
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

pub const DETECTOR: &str = "detector";
pub const PREDICTOR: &str = "hfp";
pub const FUSION: &str = "ucf";

#[derive(Serialize)]
struct Hashed {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config: String,
    inputs: Vec<Hashed>,
    outputs: Vec<Hashed>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<&'a StageReport>,
}

/// SHA-256 over a file, or over every file below a directory in path order
/// with each relative path mixed in.
pub fn hash_path(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut hasher = Sha256::new();
    if path.is_file() {
        hasher.update(fs::read(path)?);
    } else {
        let mut files = vec![];
        collect_files(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
            hasher.update(fs::read(&f)?);
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

struct Ctx {
    cfg: RunConfig,
    layout: Layout,
}

impl Ctx {
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.layout.root).unwrap_or(p).to_string_lossy().into_owned()
    }

    fn hashed(&self, paths: &[PathBuf]) -> Result<Vec<Hashed>> {
        paths
            .iter()
            .map(|p| {
                Ok(Hashed {
                    path: self.rel(p),
                    sha256: hash_path(p)?,
                })
            })
            .collect()
    }

    fn write_manifest(
        &self,
        command: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        report: Option<&StageReport>,
    ) -> Result<()> {
        let m = Manifest {
            command,
            seed: self.cfg.seed,
            config: self.cfg.to_text(),
            inputs: self.hashed(inputs)?,
            outputs: self.hashed(outputs)?,
            report,
        };
        let path = self.layout.manifest(command);
        fs::create_dir_all(path.parent().expect("manifest has a parent"))?;
        fs::write(path, serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }

    fn streams(&self, dir: &Path, count: usize) -> Result<Vec<Stream>> {
        (0..count).map(|i| read_stream(dir, i)).collect()
    }

    fn corpus(&self) -> Result<Corpus> {
        Ok(Corpus {
            train: self.streams(&self.layout.train_dir(), self.cfg.streams.train_streams)?,
            val: self.streams(&self.layout.val_dir(), self.cfg.streams.val_streams)?,
        })
    }

    fn load(&self, name: &str) -> Result<Params> {
        Params::load(&self.layout.checkpoint(name))
    }

    fn save(&self, name: &str, params: &Params) -> Result<Vec<PathBuf>> {
        let (a, b) = params.save(&self.layout.checkpoint(name))?;
        Ok(vec![a, b])
    }

    fn checkpoint_files(&self, name: &str) -> Vec<PathBuf> {
        let (a, b) = crate::autodiff::checkpoint_paths(&self.layout.checkpoint(name));
        vec![a, b]
    }

    fn schedules(&self, rate: f64, count: usize) -> Result<Vec<DropSchedule>> {
        let dir = self.layout.schedule_dir(rate);
        (0..count).map(|i| read_schedule(&dir, i)).collect()
    }
}

fn log_stage(report: &StageReport) {
    for e in &report.epochs {
        let terms: Vec<String> = e.terms.iter().map(|(k, v)| format!("{k}={v:.5}")).collect();
        let val: Vec<String> = e.validation.iter().map(|(k, v)| format!("{k}={v:.5}")).collect();
        eprintln!(
            "{} epoch {}: loss={:.5} {} | {} ({:.1}s)",
            report.stage.name(),
            e.epoch,
            e.loss,
            terms.join(" "),
            val.join(" "),
            e.seconds
        );
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let full = cli.workdir.join(path);
        if !full.exists() {
            return Err(Error::MissingArtifact(full));
        }
        cfg.apply_text(&fs::read_to_string(&full)?)?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let ctx = Ctx {
        cfg,
        layout: Layout::new(&cli.workdir),
    };
    let cfg = &ctx.cfg;
    let l = &ctx.layout;
    match &cli.command {
        Command::Gen => {
            let corpus = Corpus::generate(&cfg.streams, cfg.seed)?;
            for s in &corpus.train {
                write_stream(&l.train_dir(), s)?;
            }
            for s in &corpus.val {
                write_stream(&l.val_dir(), s)?;
            }
            let mut outputs = vec![l.train_dir(), l.val_dir()];
            for &rate in &cfg.eval.rates {
                let dir = l.schedule_dir(rate);
                for (s, sched) in corpus.val.iter().zip(eval::eval_schedules(cfg, &corpus.val, rate)?) {
                    write_schedule(&dir, s.id, &sched)?;
                }
                outputs.push(dir);
            }
            ctx.write_manifest("gen", &[], &outputs, None)?;
            eprintln!(
                "wrote {} training and {} validation streams",
                corpus.train.len(),
                corpus.val.len()
            );
        }
        Command::Pretrain => {
            let corpus = ctx.corpus()?;
            let (det, report) = trainer::pretrain_detector(cfg, &corpus)?;
            log_stage(&report);
            let outputs = ctx.save(DETECTOR, &det)?;
            ctx.write_manifest("pretrain", &[l.train_dir(), l.val_dir()], &outputs, Some(&report))?;
        }
        Command::Train1 => {
            let det = ctx.load(DETECTOR)?;
            let corpus = ctx.corpus()?;
            let (hfp, report) = trainer::train_stage1(cfg, &corpus, &det)?;
            log_stage(&report);
            let outputs = ctx.save(PREDICTOR, &hfp)?;
            let mut inputs = vec![l.train_dir(), l.val_dir()];
            inputs.extend(ctx.checkpoint_files(DETECTOR));
            ctx.write_manifest("train1", &inputs, &outputs, Some(&report))?;
        }
        Command::Train2 => {
            let det = ctx.load(DETECTOR)?;
            let hfp = ctx.load(PREDICTOR)?;
            let corpus = ctx.corpus()?;
            let (ucf, report) = trainer::train_stage2(cfg, &corpus, &det, &hfp)?;
            log_stage(&report);
            let outputs = ctx.save(FUSION, &ucf)?;
            let mut inputs = vec![l.train_dir(), l.val_dir()];
            inputs.extend(ctx.checkpoint_files(DETECTOR));
            inputs.extend(ctx.checkpoint_files(PREDICTOR));
            ctx.write_manifest("train2", &inputs, &outputs, Some(&report))?;
        }
        Command::Eval { policy, rate } => {
            let policy: Policy = policy
                .as_deref()
                .unwrap_or(&cfg.eval.policy)
                .parse()
                .map_err(|reason| Error::Config {
                    key: "eval.policy".to_string(),
                    reason,
                })?;
            let rate = rate.unwrap_or(cfg.eval.rate);
            let mut inputs = ctx.checkpoint_files(DETECTOR);
            let models = Models {
                det: ctx.load(DETECTOR)?,
                hfp: if policy.needs_hfp() {
                    inputs.extend(ctx.checkpoint_files(PREDICTOR));
                    Some(ctx.load(PREDICTOR)?)
                } else {
                    None
                },
                ucf: if policy.needs_ucf() {
                    inputs.extend(ctx.checkpoint_files(FUSION));
                    Some(ctx.load(FUSION)?)
                } else {
                    None
                },
            };
            let schedules = ctx.schedules(rate, cfg.streams.val_streams)?;
            let val = ctx.streams(&l.val_dir(), cfg.streams.val_streams)?;
            let row = eval::evaluate(cfg, &models, policy, rate, &val, &schedules)?;
            let out = l.reports().join(format!("eval_{policy}_{rate}.json"));
            fs::create_dir_all(l.reports())?;
            fs::write(&out, serde_json::to_string_pretty(&row)? + "\n")?;
            inputs.extend([l.val_dir(), l.schedule_dir(rate)]);
            ctx.write_manifest("eval", &inputs, std::slice::from_ref(&out), None)?;
            println!("{}", serde_json::to_string(&row)?);
        }
        Command::Sweep => {
            let models = Models {
                det: ctx.load(DETECTOR)?,
                hfp: Some(ctx.load(PREDICTOR)?),
                ucf: Some(ctx.load(FUSION)?),
            };
            let schedules = cfg
                .eval
                .rates
                .iter()
                .map(|&r| ctx.schedules(r, cfg.streams.val_streams))
                .collect::<Result<Vec<_>>>()?;
            let val = ctx.streams(&l.val_dir(), cfg.streams.val_streams)?;
            let report = eval::sweep(cfg, &models, &val, &schedules)?;
            report.write(&l.reports())?;
            let heat_schedule = match cfg.eval.rates.iter().position(|&r| r == cfg.eval.rate) {
                Some(i) => schedules[i][0].clone(),
                None => eval::eval_schedule(cfg, &val[0], cfg.eval.rate)?,
            };
            if let Some(first) = val.first() {
                eval::write_heatmaps(cfg, &models, first, &heat_schedule, &l.reports().join("heatmaps"))?;
            }
            let mut inputs = vec![l.val_dir()];
            for name in [DETECTOR, PREDICTOR, FUSION] {
                inputs.extend(ctx.checkpoint_files(name));
            }
            inputs.extend(cfg.eval.rates.iter().map(|&r| l.schedule_dir(r)));
            let outputs = vec![l.reports().join("report.csv"), l.reports().join("report.json")];
            ctx.write_manifest("sweep", &inputs, &outputs, None)?;
            print!("{}", report.to_csv());
        }
        Command::Gradcheck { seeds } => {
            let results = gradsuite::run(cfg.seed, *seeds)?;
            let mut failed = vec![];
            for r in &results {
                println!(
                    "{:<22} max_rel_err={:.3e} checked={} {}",
                    r.block,
                    r.max_relative_error,
                    r.checked,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                if !r.passed() {
                    failed.push(r.block);
                }
            }
            if !failed.is_empty() {
                return Err(Error::contract(format!(
                    "gradient check above {:e} in: {}",
                    gradsuite::TOLERANCE,
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING,
        _ => EXIT_FAILURE,
    }
}

fn threads() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.parse().ok().filter(|&n| n > 0)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads() {
        pool = pool.num_threads(n);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| execute(&cli)),
        Err(e) => Err(Error::contract(format!("thread pool: {e}"))),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let cfg = Error::Config {
            key: "k".into(),
            reason: "r".into(),
        };
        assert_eq!(exit_code(&cfg), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::MissingArtifact("x".into())), EXIT_MISSING);
        assert_eq!(exit_code(&Error::contract("c".to_string())), EXIT_FAILURE);
    }

    #[test]
    fn schedule_dirs_name_the_rate() {
        let l = Layout::new(Path::new("w"));
        assert_eq!(l.schedule_dir(0.5), Path::new("w/data/schedules/rate_0.5"));
        assert_eq!(l.schedule_dir(0.0), Path::new("w/data/schedules/rate_0"));
    }

    #[test]
    fn unknown_key_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let code = run([
            "modalpatch",
            "--workdir",
            dir.path().to_str().unwrap(),
            "--set",
            "bogus.key=1",
            "gen",
        ]);
        assert_eq!(code, EXIT_CONFIG);
    }

    #[test]
    fn hash_covers_paths_and_contents() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a"), b"1").unwrap();
        let h1 = hash_path(dir.path()).unwrap();
        fs::write(dir.path().join("a"), b"2").unwrap();
        let h2 = hash_path(dir.path()).unwrap();
        assert_ne!(h1, h2);
        assert!(matches!(hash_path(&dir.path().join("nope")), Err(Error::MissingArtifact(_))));
    }
}
