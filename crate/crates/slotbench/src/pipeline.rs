//! Stage execution with content-addressed run directories.
//!
//! Every stage derives a key from the parts of the configuration it depends
//! on (including the keys of its inputs) and runs in
//! `<root>/runs/<stage>/<hash prefix>`. The directory is assembled under a
//! temporary name and renamed into place, then registered in the results
//! ledger, so an interrupted run leaves neither a directory nor a ledger
//! entry. An existing directory with the same key is a cache hit.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use slotbench_core::localize::{keypoint_targets, pck, to_points, train_localizer, LocalizerConfig, PckReport};
use slotbench_core::policy::{bc_train, demo_set, rollout_batch, success_rate, PerceptionVariant, PolicyEvalReport};
use slotbench_core::scene::episode::eval_episode_seed;
use slotbench_core::scene::{generate_episodes, render, Image, SceneState};
use slotbench_core::slot::SlotModel;
use slotbench_core::train::{train_reconstruction, TrainConfig};

use crate::checkpoint::Checkpoint;
use crate::config::{content_hash, ExperimentConfig, ModelKind, Overrides, Stage};
use crate::dataset::{spread, write_dataset, Dataset};
use crate::error::{HarnessError, Result};
use crate::export::{read_json, write_csv, write_json, write_masks};
use crate::ledger::{Ledger, LedgerEntry};
use crate::models::{
    localizer_checkpoint, localizer_from_checkpoint, policy_checkpoint, policy_from_checkpoint, Repr, ReprArch, ReprModel,
};
use crate::report::write_report;

const HASH_PREFIX: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Completed,
    Cached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub stage: Stage,
    pub status: Status,
    pub hash: String,
    pub dir: PathBuf,
    pub metrics: Value,
}

/// `run.json` inside every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub stage: Stage,
    pub config_hash: String,
    pub wall_clock_s: f64,
    pub metrics: Value,
}

#[derive(Debug, Clone)]
pub struct Harness {
    pub root: PathBuf,
    pub force: bool,
    /// Binary used to run sweep points as child processes; `None` runs them
    /// in this process.
    pub exe: Option<PathBuf>,
    pub verbose: bool,
}

impl Harness {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), force: false, exe: None, verbose: false }
    }

    pub fn ledger(&self) -> Ledger {
        Ledger::new(self.root.join("results.jsonl"))
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn run(&self, stage: Stage, cfg: &ExperimentConfig) -> Result<Outcome> {
        match stage {
            Stage::GenData => self.gen_data(cfg),
            Stage::TrainRepr => self.train_repr(cfg, cfg.repr.model_kind),
            Stage::TrainLocalizer => self.train_localizer(cfg),
            Stage::EvalPck => self.eval_pck(cfg),
            Stage::TrainPolicy => self.train_policy(cfg),
            Stage::EvalPolicy => self.eval_policy(cfg),
            Stage::Sweep => self.sweep(cfg),
            Stage::Report => {
                let dir = self.root.join("report");
                let summary = write_report(&self.ledger(), &dir)?;
                Ok(Outcome {
                    stage,
                    status: Status::Completed,
                    hash: String::new(),
                    dir,
                    metrics: json!({ "rows": summary.len() }),
                })
            }
        }
    }

    /// Directory a stage with `key` occupies once complete.
    pub fn run_dir(&self, stage: Stage, key: &Value) -> Result<(String, PathBuf)> {
        let hash = content_hash(key)?;
        let dir = self.root.join("runs").join(stage.name()).join(&hash[..HASH_PREFIX]);
        Ok((hash, dir))
    }

    fn execute<F>(&self, stage: Stage, cfg: &ExperimentConfig, key: Value, body: F) -> Result<Outcome>
    where
        F: FnOnce(&Path) -> Result<Value>,
    {
        let (hash, dir) = self.run_dir(stage, &key)?;
        let ledger = self.ledger();
        if dir.exists() {
            let stored: Value = read_json(&dir.join("key.json"))?;
            if stored != key {
                return Err(HarnessError::HashCollision { path: dir });
            }
            if !self.force {
                let rec: RunRecord = read_json(&dir.join("run.json"))?;
                if !ledger.contains(stage.name(), &hash)? {
                    ledger.append(&self.entry(&rec, &dir))?;
                }
                self.log(format!("{stage} {}: cached", &hash[..HASH_PREFIX]));
                return Ok(Outcome { stage, status: Status::Cached, hash, dir, metrics: rec.metrics });
            }
        }
        let parent = dir.parent().expect("run dir has a parent");
        fs::create_dir_all(parent)?;
        let tmp = tempfile::Builder::new().prefix(".tmp-").tempdir_in(parent)?;
        write_json(&tmp.path().join("key.json"), &key)?;
        fs::write(tmp.path().join("config.toml"), cfg.to_toml()?)?;
        self.log(format!("{stage} {}: running", &hash[..HASH_PREFIX]));
        let t0 = Instant::now();
        let metrics = body(tmp.path())?;
        let rec = RunRecord {
            experiment: cfg.name.clone(),
            stage,
            config_hash: hash.clone(),
            wall_clock_s: t0.elapsed().as_secs_f64(),
            metrics,
        };
        write_json(&tmp.path().join("run.json"), &rec)?;
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::rename(tmp.keep(), &dir)?;
        ledger.append(&self.entry(&rec, &dir))?;
        self.log(format!("{stage} {}: done in {:.1}s", &hash[..HASH_PREFIX], rec.wall_clock_s));
        Ok(Outcome { stage, status: Status::Completed, hash, dir, metrics: rec.metrics })
    }

    fn entry(&self, rec: &RunRecord, dir: &Path) -> LedgerEntry {
        LedgerEntry {
            experiment: rec.experiment.clone(),
            stage: rec.stage.name().into(),
            config_hash: rec.config_hash.clone(),
            run_dir: dir.strip_prefix(&self.root).unwrap_or(dir).display().to_string(),
            wall_clock_s: rec.wall_clock_s,
            metrics: rec.metrics.clone(),
        }
    }

    /// Completed run directory of an input stage, or a missing-input error.
    fn input(&self, stage: Stage, key: &Value) -> Result<PathBuf> {
        let (hash, dir) = self.run_dir(stage, key)?;
        if !dir.join("run.json").exists() {
            return Err(HarnessError::Missing(format!(
                "{stage} output {} not found; run `slotbench {stage}` first",
                &hash[..HASH_PREFIX]
            )));
        }
        Ok(dir)
    }

    // Keys. Each one names everything its stage output depends on.

    pub fn data_key(cfg: &ExperimentConfig) -> Value {
        json!({ "stage": Stage::GenData.name(), "data": cfg.data })
    }

    pub fn repr_key(cfg: &ExperimentConfig, kind: ModelKind) -> Result<Value> {
        let arch = repr_arch(cfg, kind);
        // MoCo carries its training settings inside the architecture echo.
        let train = match kind {
            ModelKind::Moco => Value::Null,
            ModelKind::Slot | ModelKind::Autoencoder => json!(repr_train_config(cfg)),
        };
        Ok(json!({
            "stage": Stage::TrainRepr.name(),
            "data": Self::data_key(cfg),
            "arch": arch,
            "train": train,
            "max_frames": cfg.repr.max_frames,
            "episodes": cfg.train_episodes(),
        }))
    }

    pub fn localizer_key(cfg: &ExperimentConfig) -> Result<Value> {
        Ok(json!({
            "stage": Stage::TrainLocalizer.name(),
            "repr": Self::repr_key(cfg, cfg.repr.model_kind)?,
            "train": localizer_train_config(cfg),
            "max_frames": cfg.localizer.max_frames,
            "episodes": cfg.train_episodes(),
        }))
    }

    pub fn pck_key(cfg: &ExperimentConfig) -> Result<Value> {
        Ok(json!({
            "stage": Stage::EvalPck.name(),
            "localizer": Self::localizer_key(cfg)?,
            "threshold": cfg.localizer.pck_threshold,
            "eval_episodes": cfg.localizer.eval_episodes,
            "eval_frames": cfg.localizer.eval_frames,
            "eval_stream": cfg.eval.stream,
        }))
    }

    pub fn policy_key(cfg: &ExperimentConfig) -> Result<Value> {
        let repr = match policy_repr_kind(cfg.policy.variant) {
            Some(k) => Self::repr_key(cfg, k)?,
            None => Value::Null,
        };
        let mut train = cfg.policy.train.clone();
        train.seed = cfg.seed;
        Ok(json!({
            "stage": Stage::TrainPolicy.name(),
            "data": Self::data_key(cfg),
            "repr": repr,
            "variant": cfg.policy.variant,
            "train": train,
            "episodes": cfg.train_episodes(),
        }))
    }

    pub fn policy_eval_key(cfg: &ExperimentConfig) -> Result<Value> {
        Ok(json!({
            "stage": Stage::EvalPolicy.name(),
            "policy": Self::policy_key(cfg)?,
            "eval": cfg.eval,
        }))
    }

    // Stages.

    fn gen_data(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        self.execute(Stage::GenData, cfg, Self::data_key(cfg), |dir| {
            let d = &cfg.data;
            let episodes = generate_episodes(d.stream, d.episodes, d.n_blocks, d.max_steps, &d.sim)?;
            let manifest = write_dataset(dir, d.stream, d, &episodes)?;
            let frames: usize = manifest.episodes.iter().map(|e| e.frames).sum();
            let sha = content_hash(&manifest)?;
            Ok(json!({ "episodes": manifest.episodes.len(), "frames": frames, "manifest_sha256": sha }))
        })
    }

    fn dataset(&self, cfg: &ExperimentConfig) -> Result<Dataset> {
        Dataset::open(&self.input(Stage::GenData, &Self::data_key(cfg))?)
    }

    fn train_repr(&self, cfg: &ExperimentConfig, kind: ModelKind) -> Result<Outcome> {
        let key = Self::repr_key(cfg, kind)?;
        let data = self.dataset(cfg)?;
        self.execute(Stage::TrainRepr, cfg, key, |dir| {
            let arch = repr_arch(cfg, kind);
            let (h, w) = arch_resolution(&arch);
            if (h, w) != (cfg.data.image_size, cfg.data.image_size) {
                return Err(HarnessError::Config(format!(
                    "model resolution {h}x{w} does not match data.image_size {}",
                    cfg.data.image_size
                )));
            }
            let index = data.frame_index(cfg.train_episodes(), cfg.repr.max_frames);
            let images: Vec<Image> = index.iter().map(|&(e, t)| data.frame(e, t)).collect::<Result<_>>()?;
            let mut repr = Repr::init(arch.clone(), cfg.repr.seed)?;
            let probe: Vec<Image> = spread(&images, 64);
            let ck_path = dir.join("model.ckpt");
            let mut metrics = json!({ "model_kind": kind.name(), "k": cfg.repr.num_slots, "frames": images.len() });
            match (&repr.model, &arch) {
                (ReprModel::Slot(_), _) | (ReprModel::Autoencoder(_), _) => {
                    let initial = recon_loss(&repr, &probe)?;
                    let tc = repr_train_config(cfg);
                    let model = repr.model.clone();
                    let loss = |g: &mut slotbench_core::Graph<'_, f32>, x| match &model {
                        ReprModel::Slot(m) => m.loss(g, x),
                        ReprModel::Autoencoder(m) => m.loss(g, x),
                        ReprModel::Moco(_) => unreachable!(),
                    };
                    let report = train_reconstruction(&mut repr.params, &images, &tc, loss, |c, p| {
                        self.log(format!("  step {} loss {:.5}", c.step, c.loss));
                        let snapshot = Repr { arch: arch.clone(), model: model.clone(), params: p.clone() };
                        snapshot.to_checkpoint(c.step as u64, c.loss).and_then(|ck| ck.save(&ck_path)).map_err(core_io)
                    })?;
                    let final_loss = recon_loss(&repr, &probe)?;
                    repr.to_checkpoint(report.best.step as u64, report.best.loss)?.save(&ck_path)?;
                    write_json(&dir.join("train.json"), &report)?;
                    metrics["initial_loss"] = json!(initial);
                    metrics["final_loss"] = json!(final_loss);
                    metrics["best_step"] = json!(report.best.step);
                    if let ReprModel::Slot(m) = &repr.model {
                        export_masks(m, &repr, &probe[..probe.len().min(4)], dir)?;
                    }
                }
                (ReprModel::Moco(_), ReprArch::Moco(cc)) => {
                    let state = slotbench_core::baselines::moco_train(&images, cc, |c, p| {
                        self.log(format!("  step {} loss {:.5}", c.step, c.loss));
                        let snapshot = Repr { arch: arch.clone(), model: repr.model.clone(), params: p.clone() };
                        snapshot.to_checkpoint(c.step as u64, c.loss).and_then(|ck| ck.save(&ck_path)).map_err(core_io)
                    })?;
                    repr.params = state.query;
                    let last = state.losses.last().copied().unwrap_or(f64::NAN);
                    repr.to_checkpoint(state.losses.len() as u64, last)?.save(&ck_path)?;
                    write_json(&dir.join("train.json"), &json!({ "losses": state.losses }))?;
                    metrics["initial_loss"] = json!(state.losses.first());
                    metrics["final_loss"] = json!(last);
                }
                _ => unreachable!("architecture and model agree by construction"),
            }
            metrics["checksum"] = json!(repr.params.checksum());
            Ok(metrics)
        })
    }

    fn load_repr(&self, cfg: &ExperimentConfig, kind: ModelKind) -> Result<(Repr, String)> {
        let dir = self.input(Stage::TrainRepr, &Self::repr_key(cfg, kind)?)?;
        let repr = Repr::from_checkpoint(&Checkpoint::load(&dir.join("model.ckpt"))?)?;
        let rec: RunRecord = read_json(&dir.join("run.json"))?;
        let recorded = rec.metrics["checksum"].as_str().unwrap_or_default().to_string();
        if repr.params.checksum() != recorded {
            return Err(HarnessError::Checkpoint(format!("{} does not match its recorded checksum", dir.display())));
        }
        Ok((repr, recorded))
    }

    fn train_localizer(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        let key = Self::localizer_key(cfg)?;
        let data = self.dataset(cfg)?;
        let (repr, checksum) = self.load_repr(cfg, cfg.repr.model_kind)?;
        self.execute(Stage::TrainLocalizer, cfg, key, |dir| {
            let index = data.frame_index(cfg.train_episodes(), cfg.localizer.max_frames);
            let mut images = Vec::with_capacity(index.len());
            let mut targets = Vec::with_capacity(index.len());
            let mut records = std::collections::BTreeMap::new();
            for &(e, t) in &index {
                if !records.contains_key(&e) {
                    records.insert(e, data.records(e)?);
                }
                images.push(data.frame(e, t)?);
                targets.push(keypoint_targets(&records[&e][t].state));
            }
            let inputs = repr.localizer_inputs(&images)?;
            let (loc, report) = train_localizer(&inputs, &targets, &localizer_train_config(cfg), Some(&repr.params))?;
            let last = report.losses.last().copied().unwrap_or(f64::NAN);
            localizer_checkpoint(&loc, report.losses.len() as u64, last)?.save(&dir.join("localizer.ckpt"))?;
            write_json(&dir.join("train.json"), &report)?;
            Ok(json!({
                "model_kind": repr.kind().name(),
                "frames": images.len(),
                "final_loss": last,
                "upstream_checksum": checksum,
            }))
        })
    }

    fn eval_pck(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        let key = Self::pck_key(cfg)?;
        let (repr, checksum) = self.load_repr(cfg, cfg.repr.model_kind)?;
        let loc_dir = self.input(Stage::TrainLocalizer, &Self::localizer_key(cfg)?)?;
        let loc = localizer_from_checkpoint(&Checkpoint::load(&loc_dir.join("localizer.ckpt"))?)?;
        self.execute(Stage::EvalPck, cfg, key, |dir| {
            let d = &cfg.data;
            let eps = generate_episodes(cfg.eval.stream, cfg.localizer.eval_episodes, d.n_blocks, d.max_steps, &d.sim)?;
            let all: Vec<&SceneState> = eps.iter().flat_map(|e| e.states.iter()).collect();
            let states = spread(&all, cfg.localizer.eval_frames);
            let images: Vec<Image> = states.iter().map(|s| render(s, d.image_size, d.image_size, &d.sim)).collect();
            let preds: Vec<Vec<[f64; 2]>> =
                loc.predict(&repr.localizer_inputs(&images)?)?.iter().map(|p| to_points(p)).collect();
            let truth: Vec<Vec<[f64; 2]>> = states.iter().map(|s| s.keypoints()).collect();
            let mut objects: Vec<String> = states[0].blocks.iter().map(|b| b.name()).collect();
            objects.push("effector".into());
            let report = pck(&preds, &truth, &objects, cfg.localizer.pck_threshold, 1.0)?;
            if repr.params.checksum() != checksum {
                return Err(slotbench_core::Error::FrozenViolated.into());
            }
            write_json(&dir.join("pck.json"), &report)?;
            write_csv(&dir.join("pck.csv"), &pck_rows(&report))?;
            Ok(json!({
                "model_kind": repr.kind().name(),
                "k": cfg.repr.num_slots,
                "n_blocks": d.n_blocks,
                "episodes": cfg.train_episodes(),
                "seed": cfg.seed,
                "series": series_hash(cfg)?,
                "mean_pck": report.mean,
                "per_object": report.per_object,
                "threshold": report.threshold,
                "n_eval": report.n_eval,
                "upstream_checksum": checksum,
            }))
        })
    }

    fn train_policy(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        let key = Self::policy_key(cfg)?;
        let data = self.dataset(cfg)?;
        let repr = match policy_repr_kind(cfg.policy.variant) {
            Some(k) => Some(self.load_repr(cfg, k)?),
            None => None,
        };
        self.execute(Stage::TrainPolicy, cfg, key, |dir| {
            let demos = (0..cfg.train_episodes()).map(|i| data.trajectory(i)).collect::<Result<Vec<_>>>()?;
            let perception = repr.as_ref().map(|r| r.0.perception()).unwrap_or_default();
            let mut pc = cfg.policy.train.clone();
            pc.seed = cfg.seed;
            let set = demo_set(&demos, cfg.policy.variant, &perception, cfg.data.image_size, &pc, &cfg.data.sim)?;
            drop(demos);
            let (policy, report) = bc_train(&set, &pc)?;
            if perception.checksums() != set.perception_checksums {
                return Err(slotbench_core::Error::FrozenViolated.into());
            }
            let last = report.losses.last().copied().unwrap_or(f64::NAN);
            policy_checkpoint(&policy, report.losses.len() as u64, last)?.save(&dir.join("policy.ckpt"))?;
            write_json(&dir.join("train.json"), &report)?;
            Ok(json!({
                "variant": cfg.policy.variant.name(),
                "frames": set.len(),
                "channels": set.channels,
                "final_loss": last,
                "perception_checksums": set.perception_checksums,
            }))
        })
    }

    fn eval_policy(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        let key = Self::policy_eval_key(cfg)?;
        let pdir = self.input(Stage::TrainPolicy, &Self::policy_key(cfg)?)?;
        let policy = policy_from_checkpoint(&Checkpoint::load(&pdir.join("policy.ckpt"))?)?;
        let repr = match policy_repr_kind(cfg.policy.variant) {
            Some(k) => Some(self.load_repr(cfg, k)?),
            None => None,
        };
        self.execute(Stage::EvalPolicy, cfg, key, |dir| {
            let d = &cfg.data;
            let perception = repr.as_ref().map(|r| r.0.perception()).unwrap_or_default();
            let seeds: Vec<u64> = (0..cfg.eval.episodes as u64).map(|i| eval_episode_seed(cfg.eval.stream, i)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let outcomes = rollout_batch(&seeds, d.n_blocks, cfg.eval.max_steps, &d.sim, |states, targets| {
                policy.act(states, targets, &perception, d.image_size, &d.sim, &mut rng)
            })?;
            let rate = success_rate(&outcomes);
            let report = PolicyEvalReport::new(
                cfg.policy.variant.name(),
                vec![cfg.seed],
                vec![rate],
                cfg.eval.episodes,
                cfg.eval.max_steps,
                d.sim.success_radius,
            )?;
            write_json(&dir.join("success.json"), &json!({ "report": report, "outcomes": outcomes }))?;
            write_csv(&dir.join("outcomes.csv"), &outcomes)?;
            Ok(json!({
                "variant": cfg.policy.variant.name(),
                "k": cfg.repr.num_slots,
                "n_blocks": d.n_blocks,
                "episodes": cfg.train_episodes(),
                "seed": cfg.seed,
                "series": series_hash(cfg)?,
                "success_rate": rate,
                "n_episodes": cfg.eval.episodes,
            }))
        })
    }

    fn sweep(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        let key = json!({ "stage": Stage::Sweep.name(), "config": cfg });
        self.execute(Stage::Sweep, cfg, key, |dir| {
            let cfg_path = dir.join("sweep_config.toml");
            fs::write(&cfg_path, cfg.to_toml()?)?;
            let fractions = if cfg.sweep.data_fractions.is_empty() { vec![cfg.data_fraction] } else { cfg.sweep.data_fractions.clone() };
            let seeds = if cfg.sweep.seeds.is_empty() { vec![cfg.seed] } else { cfg.sweep.seeds.clone() };
            let mut rows = Vec::new();
            for &k in &cfg.sweep.ks {
                for &f in &fractions {
                    for &s in &seeds {
                        let o = Overrides { seed: Some(s), k: Some(k), data_fraction: Some(f), pck_threshold: None };
                        let point = cfg.clone().apply(&o)?;
                        let mut last = None;
                        for &st in &cfg.sweep.stages {
                            last = Some(self.sweep_point(st, &point, &cfg_path, &o)?);
                        }
                        if let Some(out) = last {
                            rows.push(SweepRow::new(k, f, s, &out)?);
                        }
                    }
                }
            }
            write_csv(&dir.join("sweep.csv"), &rows)?;
            write_json(&dir.join("sweep.json"), &rows)?;
            Ok(json!({ "rows": rows.len(), "ks": cfg.sweep.ks }))
        })
    }

    fn sweep_point(&self, stage: Stage, point: &ExperimentConfig, cfg_path: &Path, o: &Overrides) -> Result<Outcome> {
        let Some(exe) = &self.exe else {
            let inner = Harness { force: false, ..self.clone() };
            return inner.run(stage, point);
        };
        let status = Command::new(exe)
            .arg(stage.name())
            .arg("--config")
            .arg(cfg_path)
            .args(["--seed", &o.seed.unwrap_or(point.seed).to_string()])
            .args(["--k", &o.k.unwrap_or(point.repr.num_slots).to_string()])
            .args(["--data-fraction", &o.data_fraction.unwrap_or(point.data_fraction).to_string()])
            .env("SLOTBENCH_ROOT", &self.root)
            .status()?;
        if !status.success() {
            return Err(HarnessError::Report(format!("sweep child `{stage}` failed with {status}")));
        }
        let key = match stage {
            Stage::TrainRepr => Self::repr_key(point, point.repr.model_kind)?,
            Stage::TrainLocalizer => Self::localizer_key(point)?,
            Stage::EvalPck => Self::pck_key(point)?,
            Stage::TrainPolicy => Self::policy_key(point)?,
            Stage::EvalPolicy => Self::policy_eval_key(point)?,
            Stage::GenData | Stage::Sweep | Stage::Report => unreachable!("rejected by validation"),
        };
        let dir = self.input(stage, &key)?;
        let rec: RunRecord = read_json(&dir.join("run.json"))?;
        Ok(Outcome { stage, status: Status::Completed, hash: rec.config_hash, dir, metrics: rec.metrics })
    }
}

/// One row per sweep grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub data_fraction: f64,
    pub seed: u64,
    pub stage: String,
    pub config_hash: String,
    pub metric: String,
    pub value: f64,
}

impl SweepRow {
    fn new(k: usize, data_fraction: f64, seed: u64, out: &Outcome) -> Result<Self> {
        let metric = match out.stage {
            Stage::EvalPck => "mean_pck",
            Stage::EvalPolicy => "success_rate",
            _ => "final_loss",
        };
        let value = out.metrics[metric].as_f64().unwrap_or(f64::NAN);
        Ok(Self { k, data_fraction, seed, stage: out.stage.name().into(), config_hash: out.hash.clone(), metric: metric.into(), value })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PckRow {
    object: String,
    pck: f64,
    threshold: f64,
    n_eval: usize,
}

fn pck_rows(r: &PckReport) -> Vec<PckRow> {
    let mut rows: Vec<PckRow> = r
        .objects
        .iter()
        .zip(&r.per_object)
        .map(|(o, &p)| PckRow { object: o.clone(), pck: p, threshold: r.threshold, n_eval: r.n_eval })
        .collect();
    rows.push(PckRow { object: "mean".into(), pck: r.mean, threshold: r.threshold, n_eval: r.n_eval });
    rows
}

/// Hash of the configuration with the plotted and averaged-over fields
/// blanked, so curve points only combine runs that agree elsewhere.
fn series_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.seed = 0;
    c.data_fraction = 1.0;
    c.data.n_blocks = 0;
    c.repr.num_slots = 0;
    c.sweep = Default::default();
    c.localizer.pck_threshold = 0.0;
    Ok(content_hash(&c)?[..HASH_PREFIX].to_string())
}

fn repr_arch(cfg: &ExperimentConfig, kind: ModelKind) -> ReprArch {
    match kind {
        ModelKind::Slot => ReprArch::Slot(cfg.repr.slot_config()),
        ModelKind::Autoencoder => ReprArch::Autoencoder(cfg.repr.autoencoder_config()),
        ModelKind::Moco => ReprArch::Moco(cfg.repr.contrastive_config()),
    }
}

fn arch_resolution(arch: &ReprArch) -> (usize, usize) {
    match arch {
        ReprArch::Slot(c) => (c.height, c.width),
        ReprArch::Autoencoder(c) => (c.height, c.width),
        ReprArch::Moco(c) => (c.height, c.width),
    }
}

fn repr_train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig { seed: cfg.repr.seed, ..cfg.repr.train.clone() }
}

fn localizer_train_config(cfg: &ExperimentConfig) -> LocalizerConfig {
    LocalizerConfig { seed: cfg.seed, ..cfg.localizer.train.clone() }
}

/// Representation a policy variant reads, if any.
pub fn policy_repr_kind(v: PerceptionVariant) -> Option<ModelKind> {
    if v.needs_slot() {
        Some(ModelKind::Slot)
    } else if v.needs_autoencoder() {
        Some(ModelKind::Autoencoder)
    } else {
        None
    }
}

fn recon_loss(repr: &Repr, images: &[Image]) -> Result<f64> {
    let refs: Vec<&Image> = images.iter().collect();
    Ok(match &repr.model {
        ReprModel::Slot(m) => m.reconstruction_loss(&repr.params, &refs)?,
        ReprModel::Autoencoder(m) => m.reconstruction_loss(&repr.params, &refs)?,
        ReprModel::Moco(_) => f64::NAN,
    })
}

fn export_masks(m: &SlotModel, repr: &Repr, images: &[Image], dir: &Path) -> Result<()> {
    let refs: Vec<&Image> = images.iter().collect();
    let checksum = repr.params.checksum();
    for (i, ms) in m.extract_masks(&repr.params, &refs)?.iter().enumerate() {
        write_masks(dir, &format!("masks_{i:03}"), ms, &checksum)?;
    }
    Ok(())
}

/// Checkpoint writes inside core training callbacks must surface as core
/// errors; the message is preserved.
fn core_io(e: HarnessError) -> slotbench_core::Error {
    slotbench_core::Error::Config(format!("checkpoint write failed: {e}"))
}
