//! Trajectory data model and return-signal computation.
//!
//! A trajectory is a per-user sequence of (state, action, reward) steps.
//! Two derived signals condition the policy: the return-to-go (RTG), a
//! discounted sum of future rewards, and the temporal advantage (TA), a
//! discounted accumulation of successive RTG differences. TA at the first
//! stored step is zero (empty sum).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One user trajectory. All three sequences have equal length `T >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: String,
    /// Per-step state feature vectors, each of dimension `d_s`.
    pub states: Vec<Vec<f64>>,
    /// Per-step item ids in `[0, m)`.
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Checks the structural invariants against dataset-level `d_s` and `m`.
    pub fn validate(&self, d_s: usize, m: usize) -> Result<()> {
        let t = self.states.len();
        if t == 0 {
            return Err(Error::EmptyTrajectory);
        }
        if self.actions.len() != t || self.rewards.len() != t {
            return Err(Error::Shape(format!(
                "trajectory '{}': states={}, actions={}, rewards={}",
                self.user_id,
                t,
                self.actions.len(),
                self.rewards.len()
            )));
        }
        for s in &self.states {
            if s.len() != d_s {
                return Err(Error::Schema(format!(
                    "trajectory '{}': state dim {} != d_s {}",
                    self.user_id,
                    s.len(),
                    d_s
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("state in '{}'", self.user_id)));
            }
        }
        if let Some(&a) = self.actions.iter().find(|&&a| a >= m) {
            return Err(Error::Label { label: a, num_items: m });
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("reward in '{}'", self.user_id)));
        }
        Ok(())
    }
}

/// Per-step conditioning signal: (RTG, TA).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnSignal {
    pub rtg: f64,
    pub ta: f64,
}

/// Standardization statistics for the two return components, fitted on a
/// training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub rtg_mean: f64,
    pub rtg_std: f64,
    pub ta_mean: f64,
    pub ta_std: f64,
}

impl ReturnStats {
    pub fn standardize_rtg(&self, rtg: f64) -> f64 {
        (rtg - self.rtg_mean) / self.rtg_std
    }

    pub fn standardize_ta(&self, ta: f64) -> f64 {
        (ta - self.ta_mean) / self.ta_std
    }

    pub fn destandardize_rtg(&self, z: f64) -> f64 {
        z * self.rtg_std + self.rtg_mean
    }

    pub fn destandardize_ta(&self, z: f64) -> f64 {
        z * self.ta_std + self.ta_mean
    }
}

/// Dataset-level metadata. `return_stats` is `None` until fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub gamma: f64,
    pub d_s: usize,
    /// Candidate item count.
    pub m: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub return_stats: Option<ReturnStats>,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) || !gamma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "gamma must be in [0, 1], got {gamma}"
        )));
    }
    Ok(())
}

/// Return-to-go: `out[t] = sum_{i >= t} gamma^(i-t) * rewards[i]`.
pub fn compute_rtg(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if rewards.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("reward".into()));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// Temporal advantage: `out[0] = 0`,
/// `out[t] = sum_{i=1..=t} gamma^(t-i) * (rtg[i] - rtg[i-1])`.
pub fn compute_ta(rtg: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if rtg.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let mut out = vec![0.0; rtg.len()];
    for t in 1..rtg.len() {
        out[t] = gamma * out[t - 1] + (rtg[t] - rtg[t - 1]);
    }
    Ok(out)
}

/// Trajectory plus per-step return signals.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedTrajectory {
    pub traj: Trajectory,
    pub signals: Vec<ReturnSignal>,
}

/// Computes (RTG, TA) for every step. Idempotent: recomputation from the
/// same trajectory yields the same signals.
pub fn attach_return_signals(traj: &Trajectory, gamma: f64) -> Result<AnnotatedTrajectory> {
    let rtg = compute_rtg(&traj.rewards, gamma)?;
    let ta = compute_ta(&rtg, gamma)?;
    let signals = rtg
        .into_iter()
        .zip(ta)
        .map(|(rtg, ta)| ReturnSignal { rtg, ta })
        .collect();
    Ok(AnnotatedTrajectory { traj: traj.clone(), signals })
}

/// Fits standardization statistics over all timesteps of the given
/// annotated trajectories. Standard deviations are floored at 1e-6.
pub fn fit_return_stats(trajs: &[AnnotatedTrajectory]) -> ReturnStats {
    let mut n = 0usize;
    let (mut rtg_sum, mut ta_sum) = (0.0, 0.0);
    for tr in trajs {
        for s in &tr.signals {
            rtg_sum += s.rtg;
            ta_sum += s.ta;
            n += 1;
        }
    }
    let n_f = (n.max(1)) as f64;
    let rtg_mean = rtg_sum / n_f;
    let ta_mean = ta_sum / n_f;
    let (mut rtg_var, mut ta_var) = (0.0, 0.0);
    for tr in trajs {
        for s in &tr.signals {
            rtg_var += (s.rtg - rtg_mean).powi(2);
            ta_var += (s.ta - ta_mean).powi(2);
        }
    }
    ReturnStats {
        rtg_mean,
        rtg_std: (rtg_var / n_f).sqrt().max(1e-6),
        ta_mean,
        ta_std: (ta_var / n_f).sqrt().max(1e-6),
    }
}

/// Loads a JSONL dataset: first line is the meta object, each following
/// line one trajectory record.
pub fn load_dataset(path: &Path) -> Result<(Vec<Trajectory>, DatasetMeta)> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Schema("missing meta header line".into()))?;
    let meta: DatasetMeta = serde_json::from_str(&first?)
        .map_err(|e| Error::Parse { line: 1, msg: format!("meta header: {e}") })?;
    check_gamma(meta.gamma)?;
    if meta.d_s == 0 || meta.m == 0 {
        return Err(Error::Schema("d_s and m must be positive".into()));
    }

    let mut trajs = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: idx + 1, msg: e.to_string() })?;
        traj.validate(meta.d_s, meta.m)?;
        trajs.push(traj);
    }
    Ok((trajs, meta))
}

/// Writes the inverse of [`load_dataset`]. Round-trips finite values
/// bit-exactly.
pub fn save_dataset(path: &Path, trajs: &[Trajectory], meta: &DatasetMeta) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, meta)?;
    out.write_all(b"\n")?;
    for tr in trajs {
        tr.validate(meta.d_s, meta.m)?;
        serde_json::to_writer(&mut out, tr)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
