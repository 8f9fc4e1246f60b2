//! Desk-scale training: a pluggable predictor, SGD with momentum and
//! polynomial learning-rate decay, and a resumable, deterministic loop that
//! updates predictor parameters and loss weights jointly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::anchors::{match_scene, AnchorGrid, GroundTruthScene, MatchResult};
use crate::decode::{decode, nms, Detection};
use crate::error::{Error, Result};
use crate::losses::{gradients, LossBreakdown, LossWeights, PredictionTensors};
use crate::synthdata::{SceneSample, Skeleton};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Maps a scene to prediction tensors through a flat parameter vector.
pub trait Predictor {
    fn forward(&self, scene_index: usize, scene: &SceneSample) -> Result<PredictionTensors>;
    fn parameters(&self) -> &[f64];
    fn parameters_mut(&mut self) -> &mut [f64];
    /// Adds `∂loss/∂params` to `param_grad`, given `∂loss/∂outputs`.
    fn accumulate_gradient(
        &self,
        scene_index: usize,
        scene: &SceneSample,
        output_grad: &PredictionTensors,
        param_grad: &mut [f64],
    ) -> Result<()>;
}

/// One free parameter per output value per training scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectPredictor {
    pub height: usize,
    pub width: usize,
    pub n_anchors: usize,
    pub n_joints: usize,
    pub n_scenes: usize,
    pub params: Vec<f64>,
}

impl DirectPredictor {
    /// Zero regression outputs; logits start at `logit(cls_prior)`.
    pub fn new(grid: &AnchorGrid, n_joints: usize, n_scenes: usize, cls_prior: f64) -> Result<Self> {
        if !(cls_prior > 0.0 && cls_prior < 1.0) {
            return Err(Error::InvalidInput(format!("class prior {cls_prior} must lie in (0, 1)")));
        }
        let template = PredictionTensors::for_grid(grid, n_joints);
        let per_scene = template.n_values();
        let mut params = vec![0.0; per_scene * n_scenes];
        let logit = (cls_prior / (1.0 - cls_prior)).ln();
        for s in 0..n_scenes {
            params[s * per_scene..s * per_scene + template.len()].fill(logit);
        }
        Ok(DirectPredictor {
            height: grid.height(),
            width: grid.width(),
            n_anchors: grid.n_anchors(),
            n_joints,
            n_scenes,
            params,
        })
    }

    fn per_scene(&self) -> usize {
        PredictionTensors::zeros(self.height, self.width, self.n_anchors, self.n_joints).n_values()
    }

    fn range(&self, scene_index: usize) -> Result<std::ops::Range<usize>> {
        if scene_index >= self.n_scenes {
            return Err(Error::OutOfRange(format!(
                "scene {scene_index} beyond the {} scenes this predictor was built for",
                self.n_scenes
            )));
        }
        let n = self.per_scene();
        Ok(scene_index * n..(scene_index + 1) * n)
    }
}

impl Predictor for DirectPredictor {
    fn forward(&self, scene_index: usize, _scene: &SceneSample) -> Result<PredictionTensors> {
        let mut out = PredictionTensors::zeros(self.height, self.width, self.n_anchors, self.n_joints);
        out.copy_from_flat(&self.params[self.range(scene_index)?])?;
        Ok(out)
    }

    fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn accumulate_gradient(
        &self,
        scene_index: usize,
        _scene: &SceneSample,
        output_grad: &PredictionTensors,
        param_grad: &mut [f64],
    ) -> Result<()> {
        let r = self.range(scene_index)?;
        if output_grad.n_values() != r.len() || param_grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch("gradient does not fit the predictor".into()));
        }
        for (g, v) in param_grad[r].iter_mut().zip(output_grad.values()) {
            *g += v;
        }
        Ok(())
    }
}

/// SGD with momentum and `lr(t) = lr0 · (1 − t/T)^power`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr0: f64,
    pub total_steps: u64,
    pub power: f64,
    pub momentum: f64,
    pub step: u64,
    pub velocities: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// `group_sizes` are the lengths of the parameter groups to be updated.
    pub fn new(lr0: f64, total_steps: u64, power: f64, momentum: f64, group_sizes: &[usize]) -> Result<Self> {
        if !(lr0 >= 0.0 && power >= 0.0 && (0.0..1.0).contains(&momentum)) || total_steps == 0 {
            return Err(Error::InvalidInput(format!(
                "invalid optimizer settings lr0={lr0} T={total_steps} power={power} momentum={momentum}"
            )));
        }
        Ok(OptimizerState {
            lr0,
            total_steps,
            power,
            momentum,
            step: 0,
            velocities: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::OutOfRange(format!(
                "step {t} beyond the decay horizon {}",
                self.total_steps
            )));
        }
        let frac = 1.0 - t as f64 / self.total_steps as f64;
        Ok(self.lr0 * frac.powf(self.power))
    }

    /// `v ← μ·v + g; p ← p − lr·v` for every group, at the current step.
    pub fn sgd_step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.velocities.len() || grads.len() != self.velocities.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter groups and {} gradient groups for {} velocity buffers",
                params.len(),
                grads.len(),
                self.velocities.len()
            )));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocities) {
            if p.len() != v.len() || g.len() != v.len() {
                return Err(Error::ShapeMismatch(format!(
                    "group of {} parameters, {} gradients, {} velocities",
                    p.len(),
                    g.len(),
                    v.len()
                )));
            }
        }
        let lr = self.lr_at(self.step)?;
        let mu = self.momentum;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocities.iter_mut()) {
            for ((pi, &gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = mu * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Training settings, readable from a `key = value` text file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub momentum: f64,
    pub power: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub stride: usize,
    pub n_anchors: usize,
    pub cls_prior: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub score_threshold: f64,
    pub nms_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            lr: 0.005,
            momentum: 0.9,
            power: 0.9,
            batch_size: 1,
            seed: 0,
            stride: crate::anchors::DEFAULT_STRIDE,
            n_anchors: crate::anchors::DEFAULT_NUM_ANCHORS,
            cls_prior: 0.01,
            checkpoint_every: 0,
            log_every: 100,
            score_threshold: crate::decode::DEFAULT_SCORE_THRESHOLD,
            nms_threshold: crate::decode::DEFAULT_NMS_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 13] = [
        "steps",
        "lr",
        "momentum",
        "power",
        "batch_size",
        "seed",
        "stride",
        "n_anchors",
        "cls_prior",
        "checkpoint_every",
        "log_every",
        "score_threshold",
        "nms_threshold",
    ];

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidInput(format!("bad value {v:?} for {key}")))
        }
        match key {
            "steps" => self.steps = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "power" => self.power = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "stride" => self.stride = num(key, value)?,
            "n_anchors" => self.n_anchors = num(key, value)?,
            "cls_prior" => self.cls_prior = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "score_threshold" => self.score_threshold = num(key, value)?,
            "nms_threshold" => self.nms_threshold = num(key, value)?,
            _ => return Err(Error::InvalidInput(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidInput(format!("config line {}: expected key = value", n + 1))
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::InvalidInput(format!("config line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_text(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", v[k]))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.stride == 0 || self.n_anchors == 0 {
            return Err(Error::InvalidInput(
                "steps, batch_size, stride and n_anchors must be positive".into(),
            ));
        }
        if !(self.cls_prior > 0.0 && self.cls_prior < 1.0) {
            return Err(Error::InvalidInput("cls_prior must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return Err(Error::InvalidInput("score_threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

pub fn save_history(path: impl AsRef<Path>, history: &[HistoryEntry]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for h in history {
        serde_json::to_writer(&mut w, h)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_history(path: impl AsRef<Path>) -> Result<Vec<HistoryEntry>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<P> {
    pub version: u32,
    pub config: TrainConfig,
    pub predictor: P,
    pub weights: LossWeights,
    pub optimizer: OptimizerState,
    pub rng_seed: u64,
    /// ChaCha word position, as a decimal string.
    pub rng_word_pos: String,
    pub epoch_order: Vec<usize>,
    pub cursor: usize,
}

impl<P: Serialize + DeserializeOwned> Checkpoint<P> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }
}

/// Training state over a fixed dataset.
pub struct Trainer<'a, P> {
    pub config: TrainConfig,
    pub predictor: P,
    pub weights: LossWeights,
    pub optimizer: OptimizerState,
    pub history: Vec<HistoryEntry>,
    dataset: &'a [SceneSample],
    matches: Vec<MatchResult>,
    grid: AnchorGrid,
    rng: ChaCha8Rng,
    rng_seed: u64,
    epoch_order: Vec<usize>,
    cursor: usize,
}

impl<'a, P: Predictor> Trainer<'a, P> {
    pub fn new(
        config: TrainConfig,
        predictor: P,
        dataset: &'a [SceneSample],
        grid: AnchorGrid,
        skeleton: &Skeleton,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::InvalidInput("training dataset is empty".into()));
        }
        let weights = LossWeights::ones(grid.n_anchors(), skeleton.n_joints());
        let optimizer = OptimizerState::new(
            config.lr,
            config.steps,
            config.power,
            config.momentum,
            &[predictor.parameters().len(), weights.len()],
        )?;
        let config_seed = config.seed;
        let rng = ChaCha8Rng::seed_from_u64(config_seed);
        let matches = Self::match_all(dataset, &grid, skeleton)?;
        Ok(Trainer {
            config,
            predictor,
            weights,
            optimizer,
            history: Vec::new(),
            dataset,
            matches,
            grid,
            rng,
            rng_seed: config_seed,
            epoch_order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn from_checkpoint(
        ckpt: Checkpoint<P>,
        dataset: &'a [SceneSample],
        grid: AnchorGrid,
        skeleton: &Skeleton,
    ) -> Result<Self> {
        ckpt.weights.check_shape(grid.n_anchors(), skeleton.n_joints())?;
        let mut rng = ChaCha8Rng::seed_from_u64(ckpt.rng_seed);
        let pos: u128 = ckpt
            .rng_word_pos
            .parse()
            .map_err(|_| Error::InvalidInput("bad rng position in checkpoint".into()))?;
        rng.set_word_pos(pos);
        let matches = Self::match_all(dataset, &grid, skeleton)?;
        Ok(Trainer {
            config: ckpt.config,
            predictor: ckpt.predictor,
            weights: ckpt.weights,
            optimizer: ckpt.optimizer,
            history: Vec::new(),
            dataset,
            matches,
            grid,
            rng,
            rng_seed: ckpt.rng_seed,
            epoch_order: ckpt.epoch_order,
            cursor: ckpt.cursor,
        })
    }

    fn match_all(dataset: &[SceneSample], grid: &AnchorGrid, skeleton: &Skeleton) -> Result<Vec<MatchResult>> {
        dataset
            .iter()
            .map(|s| GroundTruthScene::from_sample(s, skeleton).map(|gt| match_scene(grid, &gt)))
            .collect()
    }

    pub fn grid(&self) -> &AnchorGrid {
        &self.grid
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    pub fn is_done(&self) -> bool {
        self.optimizer.step >= self.config.steps
    }

    fn next_scene(&mut self) -> usize {
        if self.cursor >= self.epoch_order.len() {
            self.epoch_order = (0..self.dataset.len()).collect();
            self.epoch_order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let s = self.epoch_order[self.cursor];
        self.cursor += 1;
        s
    }

    /// One optimization step over `batch_size` scenes.
    pub fn step(&mut self) -> Result<HistoryEntry> {
        let t = self.optimizer.step;
        let lr = self.optimizer.lr_at(t)?;
        let mut param_grad = vec![0.0; self.predictor.parameters().len()];
        let mut weight_grad = vec![0.0; self.weights.len()];
        let mut loss = LossBreakdown::default();
        let b = self.config.batch_size;
        let inv_b = 1.0 / b as f64;
        for _ in 0..b {
            let s = self.next_scene();
            let scene = &self.dataset[s];
            let pred = self.predictor.forward(s, scene)?;
            if !pred.is_finite() {
                return Err(Error::Numeric(format!("step {t}: predictor produced non-finite outputs on scene {s}")));
            }
            let mut g = gradients(&pred, &self.matches[s], &self.grid, &self.weights)?;
            if let Some(term) = g.breakdown.first_non_finite() {
                return Err(Error::Numeric(format!(
                    "step {t}: non-finite {term} loss on scene {s}: {}",
                    serde_json::to_string(&g.breakdown).unwrap_or_default()
                )));
            }
            g.pred.values_mut().for_each(|v| *v *= inv_b);
            self.predictor.accumulate_gradient(s, scene, &g.pred, &mut param_grad)?;
            for (acc, v) in weight_grad.iter_mut().zip(&g.weights) {
                *acc += v * inv_b;
            }
            accumulate_breakdown(&mut loss, &g.breakdown, inv_b);
        }
        if param_grad.iter().chain(&weight_grad).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("step {t}: non-finite gradient")));
        }
        self.optimizer.sgd_step(
            &mut [self.predictor.parameters_mut(), &mut self.weights.values],
            &[&param_grad, &weight_grad],
        )?;
        let (lambda_min, lambda_max) = self
            .weights
            .lambdas()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), l| (lo.min(l), hi.max(l)));
        let entry = HistoryEntry {
            step: t,
            lr,
            loss,
            lambda_min,
            lambda_max,
        };
        if self.config.log_every > 0 && t % self.config.log_every == 0 {
            log::info!(
                "step {t} lr {lr:.6} total {:.6} cls {:.6} loc {:.6} 2d {:.6} 3d {:.6} N+ {}",
                entry.loss.total,
                entry.loss.cls,
                entry.loss.loc,
                entry.loss.pose2d,
                entry.loss.pose3d,
                entry.loss.n_positive
            );
        }
        self.history.push(entry.clone());
        Ok(entry)
    }

    /// Steps until `target` steps have been taken (or the run is done),
    /// writing checkpoints into `checkpoint_dir` at the configured interval.
    pub fn run_until(&mut self, target: u64, checkpoint_dir: Option<&Path>) -> Result<()>
    where
        P: Clone + Serialize + DeserializeOwned,
    {
        let target = target.min(self.config.steps);
        while self.optimizer.step < target {
            self.step()?;
            let done = self.optimizer.step;
            if let Some(dir) = checkpoint_dir {
                let every = self.config.checkpoint_every;
                if (every > 0 && done % every == 0) || done == self.config.steps {
                    self.checkpoint().save(checkpoint_path(dir, done))?;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<P>
    where
        P: Clone,
    {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            predictor: self.predictor.clone(),
            weights: self.weights.clone(),
            optimizer: self.optimizer.clone(),
            rng_seed: self.rng_seed,
            rng_word_pos: self.rng.get_word_pos().to_string(),
            epoch_order: self.epoch_order.clone(),
            cursor: self.cursor,
        }
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:06}.json"))
}

fn accumulate_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.cls += w * b.cls;
    acc.loc += w * b.loc;
    acc.pose2d += w * b.pose2d;
    acc.pose3d += w * b.pose3d;
    acc.total += w * b.total;
    acc.raw_cls += w * b.raw_cls;
    acc.raw_loc += w * b.raw_loc;
    acc.raw_pose2d += w * b.raw_pose2d;
    acc.raw_pose3d += w * b.raw_pose3d;
    acc.reg_cls += w * b.reg_cls;
    acc.reg_loc += w * b.reg_loc;
    acc.reg_pose2d += w * b.reg_pose2d;
    acc.reg_pose3d += w * b.reg_pose3d;
    acc.n_positive += b.n_positive;
    acc.n_readout += b.n_readout;
}

/// Decodes and NMS-filters predictions for every scene.
pub fn infer_dataset<P: Predictor>(
    predictor: &P,
    dataset: &[SceneSample],
    grid: &AnchorGrid,
    score_threshold: f64,
    nms_threshold: f64,
) -> Result<Vec<(u64, Vec<Detection>)>> {
    dataset
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let pred = predictor.forward(k, s)?;
            Ok((s.image_id, nms(&decode(&pred, grid, score_threshold), nms_threshold)))
        })
        .collect()
}

/// Config echo keyed by name, for reports.
pub fn config_map(cfg: &TrainConfig) -> BTreeMap<String, String> {
    let v = serde_json::to_value(cfg).expect("config serializes");
    TrainConfig::KEYS.iter().map(|k| (k.to_string(), v[k].to_string())).collect()
}
