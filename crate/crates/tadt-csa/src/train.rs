//! Training loop: configuration, batching, optimization, logging,
//! checkpointing.
//!
//! Trajectories longer than the context limit are split into consecutive
//! independent chunks and each chunk carries its own return signals, so
//! chunk length is a property of the data preparation, not of the model.

use crate::checkpoint;
use crate::csa::{CtpDenominator, Reduction, RegMode};
use crate::error::{Error, Result};
use crate::model::{
    build_losses, plan_batch, BatchSample, LossValues, ModelConfig, TadtModel,
};
use crate::nn::adam::{clip_global_norm, AdamState};
use crate::nn::graph::Graph;
use crate::nn::{Scalar, Tensor};
use crate::rng::{mix3, stream};
use crate::trajectory::{
    attach_return_signals, fit_return_stats, DatasetMeta, ReturnStats, Trajectory,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    Double,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Precision::Single),
            "double" => Ok(Precision::Double),
            other => Err(Error::InvalidParameter(format!("unknown precision '{other}'"))),
        }
    }
}

fn default_lr() -> f64 {
    5e-3
}
fn default_batch() -> usize {
    128
}
fn default_epochs() -> usize {
    50
}
fn default_m() -> usize {
    64
}
fn default_d() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_tmax() -> usize {
    30
}
fn default_one() -> f64 {
    1.0
}
fn default_l5() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    0.7
}
fn default_beta() -> f64 {
    0.5
}
fn default_delta() -> f64 {
    0.3
}
fn default_bin() -> f64 {
    0.1
}
fn default_kneg() -> usize {
    4
}
fn default_tau_end() -> f64 {
    0.3
}
fn default_clip() -> f64 {
    1.0
}
fn default_pair_cap() -> usize {
    256
}
fn default_precision() -> Precision {
    Precision::Single
}
fn default_ctp_denom() -> CtpDenominator {
    CtpDenominator::WithPositive
}
fn default_reg_mode() -> RegMode {
    RegMode::PerSample
}
fn default_reduction() -> Reduction {
    Reduction::Mean
}
fn default_workers() -> usize {
    1
}

/// Full training configuration. Every field is addressable by name in
/// JSON or flat `key=value` config files and via `--set key=value`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Optional hard cap on optimizer steps (0 = no cap).
    #[serde(default)]
    pub max_steps: usize,
    #[serde(default = "default_m")]
    pub codebook_size: usize,
    #[serde(default = "default_d")]
    pub hidden_dim: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_tmax")]
    pub t_max: usize,
    /// Discount for return signals; `None` uses the dataset's gamma.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_one")]
    pub lambda1: f64,
    #[serde(default = "default_one")]
    pub lambda2: f64,
    #[serde(default = "default_one")]
    pub lambda3: f64,
    #[serde(default = "default_one")]
    pub lambda4: f64,
    #[serde(default = "default_l5")]
    pub lambda5: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_bin")]
    pub bin_width: f64,
    #[serde(default = "default_kneg")]
    pub k_neg: usize,
    #[serde(default = "default_one")]
    pub tau_start: f64,
    #[serde(default = "default_tau_end")]
    pub tau_end: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Checkpoint cadence in optimizer steps (0 = final only).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_pair_cap")]
    pub rank_pair_cap: usize,
    #[serde(default = "default_ctp_denom")]
    pub ctp_denominator: CtpDenominator,
    #[serde(default = "default_reg_mode")]
    pub reg_mode: RegMode,
    #[serde(default = "default_reduction")]
    pub reduction: Reduction,
    #[serde(default)]
    pub no_tac: bool,
    #[serde(default)]
    pub no_ctp: bool,
    #[serde(default)]
    pub no_rp: bool,
    #[serde(default)]
    pub no_csa: bool,
    #[serde(default)]
    pub no_ta: bool,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    /// Desk-scale profile for fast test runs.
    pub fn desk_test() -> Self {
        let mut c = TrainConfig::default();
        c.hidden_dim = 32;
        c.codebook_size = 8;
        c.batch_size = 16;
        c.n_layers = 1;
        c.n_heads = 2;
        c.epochs = 4;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::InvalidParameter("lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if self.tau_start <= 0.0 || self.tau_end <= 0.0 {
            return Err(Error::InvalidParameter("tau schedule must be positive".into()));
        }
        if let Some(g) = self.gamma {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::InvalidParameter(format!("gamma {g} outside [0, 1]")));
            }
        }
        if self.grad_clip < 0.0 {
            return Err(Error::InvalidParameter("grad_clip must be >= 0".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidParameter("workers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lambda(&self) -> [f64; 5] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5]
    }

    pub fn to_model_config(&self, meta: &DatasetMeta) -> Result<ModelConfig> {
        self.validate()?;
        let cfg = ModelConfig {
            d_s: meta.d_s,
            m: meta.m,
            d: self.hidden_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            t_max: self.t_max,
            codebook_size: self.codebook_size,
            alpha: self.alpha,
            k_neg: self.k_neg,
            beta: self.beta,
            delta: self.delta,
            bin_width: self.bin_width,
            lambda: self.lambda(),
            ctp_denominator: self.ctp_denominator,
            reg_mode: self.reg_mode,
            reduction: self.reduction,
            rank_pair_cap: self.rank_pair_cap,
            no_tac: self.no_tac,
            no_ctp: self.no_ctp,
            no_rp: self.no_rp,
            no_csa: self.no_csa,
            no_ta: self.no_ta,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn signal_gamma(&self, meta: &DatasetMeta) -> f64 {
        self.gamma.unwrap_or(meta.gamma)
    }

    /// Stable hash of the serialized config, recorded in run logs.
    pub fn hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        serde_json::to_string(self).expect("config serializes").hash(&mut h);
        h.finish()
    }

    /// Loads JSON (`{...}`) or flat `key=value` lines.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        let value: serde_json::Value = if trimmed.starts_with('{') {
            serde_json::from_str(text)?
        } else {
            let mut map = serde_json::Map::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: format!("expected key=value, got '{line}'"),
                })?;
                map.insert(k.trim().to_string(), parse_scalar(v.trim()));
            }
            serde_json::Value::Object(map)
        };
        let cfg: TrainConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `--set key=value` overrides.
    pub fn apply_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let obj = value.as_object_mut().expect("config is an object");
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("--set expects key=value, got '{s}'")))?;
            obj.insert(k.trim().to_string(), parse_scalar(v.trim()));
        }
        let cfg: TrainConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_scalar(v: &str) -> serde_json::Value {
    serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()))
}

/// One logged optimizer step.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossValues,
    pub lr: f64,
    pub tau: f64,
}

/// Append-only training log plus run metadata.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    pub config_hash: u64,
    pub seed: u64,
    pub version: String,
}

impl RunLog {
    pub const CSV_HEADER: &'static str =
        "step,loss_total,loss_a,loss_rank,loss_R,loss_r,loss_c,loss_reg,lr,tau";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let l = &r.losses;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.step,
                l.total,
                l.action,
                l.rank,
                l.ret,
                l.reward,
                l.contrastive,
                l.entropy,
                r.lr,
                r.tau
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Splits trajectories into context-sized chunks with per-chunk signals.
pub fn chunk_trajectories(
    trajs: &[Trajectory],
    gamma: f64,
    t_max: usize,
) -> Result<Vec<BatchSample>> {
    let mut out = Vec::new();
    for tr in trajs {
        if tr.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        let mut start = 0;
        while start < tr.len() {
            let end = (start + t_max).min(tr.len());
            let chunk = Trajectory {
                user_id: tr.user_id.clone(),
                states: tr.states[start..end].to_vec(),
                actions: tr.actions[start..end].to_vec(),
                rewards: tr.rewards[start..end].to_vec(),
            };
            let ann = attach_return_signals(&chunk, gamma)?;
            out.push(BatchSample {
                states: ann.traj.states,
                actions: ann.traj.actions,
                rewards: ann.traj.rewards,
                rtg: ann.signals.iter().map(|s| s.rtg).collect(),
                ta: ann.signals.iter().map(|s| s.ta).collect(),
            });
            start = end;
        }
    }
    Ok(out)
}

pub fn fit_stats_for_samples(samples: &[BatchSample]) -> ReturnStats {
    // Reuse the trajectory-level fit by viewing chunks as annotated
    // trajectories.
    let anns: Vec<crate::trajectory::AnnotatedTrajectory> = samples
        .iter()
        .map(|s| crate::trajectory::AnnotatedTrajectory {
            traj: Trajectory {
                user_id: String::new(),
                states: s.states.clone(),
                actions: s.actions.clone(),
                rewards: s.rewards.clone(),
            },
            signals: s
                .rtg
                .iter()
                .zip(&s.ta)
                .map(|(&rtg, &ta)| crate::trajectory::ReturnSignal { rtg, ta })
                .collect(),
        })
        .collect();
    fit_return_stats(&anns)
}

pub struct TrainOutcome<S: Scalar> {
    pub model: TadtModel<S>,
    pub adam: AdamState<S>,
    pub stats: ReturnStats,
    pub meta: DatasetMeta,
    pub log: RunLog,
    /// Checkpoints written during training (cadence > 0), in step order.
    pub checkpoint_paths: Vec<PathBuf>,
}

fn tau_at(config: &TrainConfig, step: u64, total_steps: u64) -> f64 {
    if total_steps <= 1 {
        return config.tau_start;
    }
    let frac = step as f64 / (total_steps - 1) as f64;
    config.tau_start * (config.tau_end / config.tau_start).powf(frac)
}

/// Runs the full optimization. When `out_dir` is given, periodic
/// checkpoints (`ckpt_step{N}.ckpt`) are written at the configured
/// cadence.
pub fn train<S: Scalar>(
    config: &TrainConfig,
    trajs: &[Trajectory],
    meta: &DatasetMeta,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if trajs.is_empty() {
        return Err(Error::InvalidParameter("dataset is empty".into()));
    }
    let model_cfg = config.to_model_config(meta)?;
    let gamma = config.signal_gamma(meta);
    let samples = chunk_trajectories(trajs, gamma, config.t_max)?;
    let stats = fit_stats_for_samples(&samples);
    let mut meta = meta.clone();
    meta.return_stats = Some(stats);

    let mut model: TadtModel<S> = TadtModel::new(model_cfg, config.seed)?;
    let mut adam: AdamState<S> = AdamState::new(config.lr)?;
    let mut log = RunLog {
        records: Vec::new(),
        config_hash: config.hash(),
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let mut checkpoint_paths = Vec::new();

    let steps_per_epoch = samples.len().div_ceil(config.batch_size) as u64;
    let mut total_steps = steps_per_epoch * config.epochs as u64;
    if config.max_steps > 0 {
        total_steps = total_steps.min(config.max_steps as u64);
    }

    let save_ckpt = |model: &TadtModel<S>,
                         adam: &AdamState<S>,
                         step: u64,
                         name: &str,
                         paths: &mut Vec<PathBuf>|
     -> Result<()> {
        if let Some(dir) = out_dir {
            let path = dir.join(name);
            save_checkpoint(&path, model, adam, &stats, config, &meta, step)?;
            paths.push(path);
        }
        Ok(())
    };

    if config.checkpoint_every > 0 && total_steps > 0 {
        save_ckpt(&model, &adam, 0, "ckpt_step0.ckpt", &mut checkpoint_paths)?;
    }

    let mut step: u64 = 0;
    'outer: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = stream(config.seed, "shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk_ids in order.chunks(config.batch_size) {
            if step >= total_steps {
                break 'outer;
            }
            let batch: Vec<BatchSample> =
                chunk_ids.iter().map(|&i| samples[i].clone()).collect();
            let tau = tau_at(config, step, total_steps);
            let plan = plan_batch(&model, &batch, &stats, tau, config.seed, step, true)?;

            let mut g: Graph<S> = Graph::new();
            let (vars, reg) = model.bind(&mut g);
            let losses = build_losses(
                &mut g,
                &vars,
                &model.cfg,
                &stats,
                &batch,
                &plan,
                tau,
                true,
                true,
                mix3(config.seed, step, 0),
            )?;
            let values = losses.values(&g);
            if !values.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "total loss at step {step} (batch {chunk_ids:?}): {values:?}"
                )));
            }
            g.backward(losses.total)?;

            let mut grads: HashMap<&str, Vec<S>> = HashMap::new();
            for (name, var) in &reg {
                if let Some(gt) = g.grad(*var) {
                    grads.insert(name.as_str(), gt.data.clone());
                }
            }
            let mut params = model.params_mut();
            for (name, p) in params.iter_mut() {
                p.grad = grads.remove(name.as_str());
            }
            if config.grad_clip > 0.0 {
                clip_global_norm(&mut params, config.grad_clip);
            }
            adam.step(&mut params)?;

            step += 1;
            log.records.push(StepRecord { step, losses: values, lr: config.lr, tau });
            if config.checkpoint_every > 0 && step % config.checkpoint_every as u64 == 0 {
                save_ckpt(&model, &adam, step, &format!("ckpt_step{step}.ckpt"), &mut checkpoint_paths)?;
            }
        }
    }

    save_ckpt(&model, &adam, step, "final.ckpt", &mut checkpoint_paths)?;
    Ok(TrainOutcome { model, adam, stats, meta, log, checkpoint_paths })
}

/// Serializes model + optimizer + normalization into one file.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &TadtModel<S>,
    adam: &AdamState<S>,
    stats: &ReturnStats,
    config: &TrainConfig,
    meta: &DatasetMeta,
    step: u64,
) -> Result<()> {
    let mut model = model.clone();
    let mut tensors: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    for (name, p) in model.params_mut() {
        let mut t = p.clone();
        t.grad = None;
        tensors.insert(name, t);
    }
    for (name, (m, v)) in &adam.moments {
        tensors.insert(format!("adam.m.{name}"), m.clone());
        tensors.insert(format!("adam.v.{name}"), v.clone());
    }
    let refs: BTreeMap<String, &Tensor<S>> =
        tensors.iter().map(|(k, v)| (k.clone(), v)).collect();
    let meta_json = serde_json::json!({
        "config": config,
        "stats": stats,
        "dataset_meta": meta,
        "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                 "eps": adam.eps, "step": adam.step},
        "step": step,
    });
    checkpoint::save(path, &refs, meta_json)
}

pub struct LoadedCheckpoint<S: Scalar> {
    pub model: TadtModel<S>,
    pub adam: AdamState<S>,
    pub stats: ReturnStats,
    pub config: TrainConfig,
    pub meta: DatasetMeta,
    pub step: u64,
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<LoadedCheckpoint<S>> {
    let ckpt = checkpoint::load::<S>(path)?;
    let config: TrainConfig = serde_json::from_value(ckpt.meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("config in meta: {e}")))?;
    let stats: ReturnStats = serde_json::from_value(ckpt.meta["stats"].clone())
        .map_err(|e| Error::Checkpoint(format!("stats in meta: {e}")))?;
    let meta: DatasetMeta = serde_json::from_value(ckpt.meta["dataset_meta"].clone())
        .map_err(|e| Error::Checkpoint(format!("dataset_meta in meta: {e}")))?;
    let step = ckpt.meta["step"].as_u64().unwrap_or(0);

    let mut model: TadtModel<S> = TadtModel::new(config.to_model_config(&meta)?, config.seed)?;
    for (name, p) in model.params_mut() {
        let t = ckpt
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        if t.shape != p.shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' shape {:?} != expected {:?}",
                t.shape, p.shape
            )));
        }
        p.data = t.data.clone();
        p.grad = None;
    }
    let mut adam: AdamState<S> = AdamState::new(config.lr)?;
    if let Some(a) = ckpt.meta.get("adam") {
        adam.step = a["step"].as_u64().unwrap_or(0);
    }
    for (name, t) in &ckpt.tensors {
        if let Some(param) = name.strip_prefix("adam.m.") {
            let entry = adam
                .moments
                .entry(param.to_string())
                .or_insert_with(|| (t.clone(), t.clone()));
            entry.0 = t.clone();
        } else if let Some(param) = name.strip_prefix("adam.v.") {
            let entry = adam
                .moments
                .entry(param.to_string())
                .or_insert_with(|| (t.clone(), t.clone()));
            entry.1 = t.clone();
        }
    }
    Ok(LoadedCheckpoint { model, adam, stats, config, meta, step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{collect_trajectories, make_random_mdp, PolicyTable, RewardMode};

    fn tiny_dataset(seed: u64) -> (Vec<Trajectory>, DatasetMeta) {
        let mdp = make_random_mdp(seed, 6, 3, 5, 0.7).unwrap();
        let trajs = collect_trajectories(
            &mdp,
            &PolicyTable::uniform(6, 3),
            10,
            6,
            seed,
            0.5,
            RewardMode::Bernoulli,
            1,
        )
        .unwrap();
        let meta = DatasetMeta { gamma: 0.9, d_s: 5, m: 3, return_stats: None };
        (trajs, meta)
    }

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::desk_test();
        c.hidden_dim = 16;
        c.codebook_size = 4;
        c.n_heads = 2;
        c.batch_size = 5;
        c.epochs = 2;
        c.t_max = 6;
        c.k_neg = 2;
        c
    }

    #[test]
    fn config_text_formats_and_overrides() {
        let json = TrainConfig::from_text("{\"lr\": 0.01, \"epochs\": 3}").unwrap();
        assert_eq!(json.lr, 0.01);
        assert_eq!(json.epochs, 3);
        assert_eq!(json.batch_size, 128);

        let flat = TrainConfig::from_text("lr=0.01\nepochs=3\nprecision=double\n# comment\n").unwrap();
        assert_eq!(flat.lr, 0.01);
        assert_eq!(flat.precision, Precision::Double);

        let overridden = flat.apply_overrides(&["epochs=9".into(), "no_ta=true".into()]).unwrap();
        assert_eq!(overridden.epochs, 9);
        assert!(overridden.no_ta);

        assert!(TrainConfig::from_text("{\"unknown_field\": 1}").is_err());
        assert!(TrainConfig::from_text("lr=-1").is_err());
    }

    #[test]
    fn paper_defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 5e-3);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.epochs, 50);
        assert_eq!(c.codebook_size, 64);
        assert_eq!(c.hidden_dim, 64);
        assert_eq!(c.t_max, 30);
        assert_eq!(c.delta, 0.3);
    }

    #[test]
    fn rejects_no_csa_with_rank_loss() {
        let mut c = tiny_config();
        c.no_csa = true;
        let meta = DatasetMeta { gamma: 0.9, d_s: 5, m: 3, return_stats: None };
        assert!(c.to_model_config(&meta).is_err());
        c.lambda1 = 0.0;
        c.lambda3 = 0.0;
        c.lambda4 = 0.0;
        c.lambda5 = 0.0;
        c.to_model_config(&meta).unwrap();
    }

    #[test]
    fn chunking_splits_and_annotates() {
        let tr = Trajectory {
            user_id: "u".into(),
            states: vec![vec![0.0]; 7],
            actions: vec![0; 7],
            rewards: vec![1.0; 7],
        };
        let chunks = chunk_trajectories(&[tr], 1.0, 3).unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[0].len(), 3);
        assert_eq!(chunks[2].len(), 1);
        // Per-chunk signals: first chunk RTG starts at 3 (gamma = 1).
        assert_eq!(chunks[0].rtg[0], 3.0);
        assert_eq!(chunks[2].rtg[0], 1.0);
        assert_eq!(chunks[0].ta[0], 0.0);
    }

    #[test]
    fn epochs_zero_returns_initialized_model() {
        let (trajs, meta) = tiny_dataset(1);
        let mut config = tiny_config();
        config.epochs = 0;
        let out: TrainOutcome<f32> = train(&config, &trajs, &meta, None).unwrap();
        assert!(out.log.records.is_empty());
        assert_eq!(out.adam.step, 0);
    }

    #[test]
    fn overfit_halves_action_loss() {
        // State-dependent behavior: the action is a function of the
        // state, so a memorizing model can drive the NLL down.
        let mdp = make_random_mdp(2, 6, 3, 5, 0.7).unwrap();
        let policy = PolicyTable::deterministic(6, 3, |s| s % 3);
        let trajs =
            collect_trajectories(&mdp, &policy, 10, 6, 2, 0.0, RewardMode::Bernoulli, 1).unwrap();
        let meta = DatasetMeta { gamma: 0.9, d_s: 5, m: 3, return_stats: None };
        let mut config = tiny_config();
        config.codebook_size = 8;
        config.lr = 1e-2;
        config.epochs = 200;
        config.max_steps = 200;
        config.lambda1 = 0.0; // isolate the imitation objective
        let out: TrainOutcome<f32> = train(&config, &trajs, &meta, None).unwrap();
        let first = out.log.records.first().unwrap().losses.action;
        let last = out.log.records.last().unwrap().losses.action;
        assert!(
            last <= 0.5 * first,
            "action loss {first} -> {last} did not halve in 200 steps"
        );
    }

    #[test]
    fn logged_total_equals_weighted_components() {
        let (trajs, meta) = tiny_dataset(3);
        let config = tiny_config();
        let out: TrainOutcome<f32> = train(&config, &trajs, &meta, None).unwrap();
        assert!(!out.log.records.is_empty());
        for r in &out.log.records {
            let recombined = r.losses.weighted_sum(config.lambda());
            assert!(
                (r.losses.total - recombined).abs() <= 1e-6 * (1.0 + r.losses.total.abs()),
                "step {}: {} vs {}",
                r.step,
                r.losses.total,
                recombined
            );
        }
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let (trajs, meta) = tiny_dataset(4);
        let mut config = tiny_config();
        config.epochs = 1;
        config.checkpoint_every = 2;
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let a: TrainOutcome<f32> = train(&config, &trajs, &meta, Some(dir1.path())).unwrap();
        let b: TrainOutcome<f32> = train(&config, &trajs, &meta, Some(dir2.path())).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        let fa = std::fs::read(dir1.path().join("final.ckpt")).unwrap();
        let fb = std::fs::read(dir2.path().join("final.ckpt")).unwrap();
        assert_eq!(fa, fb, "checkpoints differ");
    }

    #[test]
    fn checkpoint_roundtrip_restores_params_and_moments() {
        let (trajs, meta) = tiny_dataset(5);
        let mut config = tiny_config();
        config.epochs = 1;
        let dir = tempfile::tempdir().unwrap();
        let out: TrainOutcome<f32> = train(&config, &trajs, &meta, Some(dir.path())).unwrap();
        let loaded: LoadedCheckpoint<f32> =
            load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
        let mut orig = out.model.clone();
        let mut rest = loaded.model.clone();
        for ((n1, p1), (n2, p2)) in orig.params_mut().iter().zip(rest.params_mut().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.data, p2.data, "param {n1}");
        }
        assert_eq!(loaded.adam.step, out.adam.step);
        for (name, (m, v)) in &out.adam.moments {
            assert_eq!(loaded.adam.moments[name].0.data, m.data);
            assert_eq!(loaded.adam.moments[name].1.data, v.data);
        }
        assert_eq!(loaded.stats, out.stats);
    }

    #[test]
    fn checkpoint_cadence_writes_expected_files() {
        let (trajs, meta) = tiny_dataset(6);
        let mut config = tiny_config();
        config.epochs = 2;
        config.checkpoint_every = 2;
        let dir = tempfile::tempdir().unwrap();
        let out: TrainOutcome<f32> = train(&config, &trajs, &meta, Some(dir.path())).unwrap();
        assert!(dir.path().join("ckpt_step0.ckpt").exists());
        assert!(dir.path().join("ckpt_step2.ckpt").exists());
        assert!(dir.path().join("final.ckpt").exists());
        assert!(out.checkpoint_paths.len() >= 3);
    }

    #[test]
    fn csv_header_matches_contract() {
        assert_eq!(
            RunLog::CSV_HEADER,
            "step,loss_total,loss_a,loss_rank,loss_R,loss_r,loss_c,loss_reg,lr,tau"
        );
    }
}
