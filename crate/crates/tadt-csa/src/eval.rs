//! Offline ranking metrics and rollout evaluation.

use crate::env::{EnvSim, RewardMode, TabularMdp};
use crate::error::{Error, Result};
use crate::model::{forward_sample, InferenceContext, InferenceSession, TadtModel};
use crate::nn::graph::Graph;
use crate::nn::Scalar;
use crate::train::{chunk_trajectories, TrainConfig};
use crate::trajectory::{DatasetMeta, ReturnStats, Trajectory};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::collections::HashSet;

/// One ranking query: the model's full item ordering plus the relevant
/// item set.
#[derive(Debug, Clone)]
pub struct RankedResult {
    pub ranked: Vec<usize>,
    pub relevant: HashSet<usize>,
}

impl RankedResult {
    pub fn validate(&self) -> Result<()> {
        if self.relevant.is_empty() {
            return Err(Error::Evaluation("relevant set is empty".into()));
        }
        let mut seen = HashSet::new();
        for &i in &self.ranked {
            if !seen.insert(i) {
                return Err(Error::Evaluation(format!("duplicate item {i} in ranking")));
            }
        }
        Ok(())
    }
}

fn check_results(results: &[RankedResult], k: usize) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Evaluation("no queries".into()));
    }
    for r in results {
        r.validate()?;
        if r.ranked.len() < k {
            return Err(Error::Evaluation(format!(
                "ranked list of length {} shorter than k = {k}",
                r.ranked.len()
            )));
        }
    }
    Ok(())
}

/// Fraction of relevant items present in the top-k, averaged over queries.
pub fn recall_at_k(results: &[RankedResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    check_results(results, k)?;
    let mut total = 0.0;
    for r in results {
        let hits = r.ranked[..k].iter().filter(|i| r.relevant.contains(i)).count();
        total += hits as f64 / r.relevant.len() as f64;
    }
    Ok(total / results.len() as f64)
}

/// Binary-relevance NDCG@k averaged over queries.
pub fn ndcg_at_k(results: &[RankedResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    check_results(results, k)?;
    let mut total = 0.0;
    for r in results {
        let dcg: f64 = r.ranked[..k]
            .iter()
            .enumerate()
            .filter(|(_, i)| r.relevant.contains(i))
            .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
            .sum();
        let ideal_hits = r.relevant.len().min(k);
        let idcg: f64 = (0..ideal_hits).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum();
        total += dcg / idcg;
    }
    Ok(total / results.len() as f64)
}

/// Mean reciprocal rank of the first relevant item over the full ranking.
pub fn mrr(results: &[RankedResult]) -> Result<f64> {
    check_results(results, 1)?;
    let mut total = 0.0;
    for r in results {
        if let Some(pos) = r.ranked.iter().position(|i| r.relevant.contains(i)) {
            total += 1.0 / (pos + 1) as f64;
        }
    }
    Ok(total / results.len() as f64)
}

/// Metric table emitted by offline evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricTable {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub n_queries: usize,
}

impl MetricTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,k,value\n");
        for (k, v) in &self.recall {
            out.push_str(&format!("recall,{k},{v}\n"));
        }
        for (k, v) in &self.ndcg {
            out.push_str(&format!("ndcg,{k},{v}\n"));
        }
        out.push_str(&format!("mrr,,{}\n", self.mrr));
        out
    }
}

/// Ranks every item at every timestep of the held-out set by predicted
/// logit (ties to the lower id) and scores against the ground-truth next
/// action.
pub fn offline_eval<S: Scalar>(
    model: &TadtModel<S>,
    stats: &ReturnStats,
    config: &TrainConfig,
    trajs: &[Trajectory],
    meta: &DatasetMeta,
    ks: &[usize],
) -> Result<MetricTable> {
    let results = ranked_results(model, stats, config, trajs, meta)?;
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        recall.insert(k, recall_at_k(&results, k)?);
        ndcg.insert(k, ndcg_at_k(&results, k)?);
    }
    Ok(MetricTable { recall, ndcg, mrr: mrr(&results)?, n_queries: results.len() })
}

/// One query per (chunk, timestep), using the evaluation-mode forward
/// (hard assignments, no Gumbel noise).
pub fn ranked_results<S: Scalar>(
    model: &TadtModel<S>,
    stats: &ReturnStats,
    config: &TrainConfig,
    trajs: &[Trajectory],
    meta: &DatasetMeta,
) -> Result<Vec<RankedResult>> {
    let samples = chunk_trajectories(trajs, config.signal_gamma(meta), config.t_max)?;
    let mut results = Vec::new();
    for sample in &samples {
        let mut g: Graph<S> = Graph::new();
        let (vars, _) = model.bind(&mut g);
        let fwd = forward_sample(&mut g, &vars, &model.cfg, stats, sample, None, 1.0, true)?;
        for t in 0..sample.len() {
            let logits = g.value(fwd.logits[t]).to_f64_vec();
            let mut ranked: Vec<usize> = (0..logits.len()).collect();
            ranked.sort_by(|&a, &b| {
                logits[b].partial_cmp(&logits[a]).unwrap().then_with(|| a.cmp(&b))
            });
            results.push(RankedResult {
                ranked,
                relevant: HashSet::from([sample.actions[t]]),
            });
        }
    }
    Ok(results)
}

/// Conditioning target for rollout evaluation.
pub enum TargetRule<'a> {
    Fixed(f64),
    /// Target chosen from the segment's first observation.
    PerState(&'a dyn Fn(&[f64]) -> f64),
}

impl TargetRule<'_> {
    fn target(&self, obs: &[f64]) -> f64 {
        match self {
            TargetRule::Fixed(v) => *v,
            TargetRule::PerState(f) => f(obs),
        }
    }
}

/// Best first-step RTG per start state among chunked training samples;
/// conditioning on it keeps the return token inside the demonstrated
/// envelope for every segment start.
pub fn best_target_by_state(samples: &[crate::model::BatchSample]) -> Vec<(Vec<f64>, f64)> {
    let mut table: Vec<(Vec<f64>, f64)> = Vec::new();
    for s in samples {
        let key = &s.states[0];
        match table.iter_mut().find(|(k, _)| k == key) {
            Some((_, best)) => *best = best.max(s.rtg[0]),
            None => table.push((key.clone(), s.rtg[0])),
        }
    }
    table
}

/// Looks up the tabular per-state target, falling back to the global max.
pub fn lookup_target(table: &[(Vec<f64>, f64)], obs: &[f64]) -> f64 {
    table
        .iter()
        .find(|(k, _)| k == obs)
        .map(|(_, v)| *v)
        .unwrap_or_else(|| table.iter().map(|(_, v)| *v).fold(0.0, f64::max))
}

/// Policy rollout of a trained model in a tabular environment.
///
/// The context resets every `segment_len` steps with a fresh target
/// return (matching how chunked training data is distributed); RTG
/// decrements by realized reward inside a segment.
#[allow(clippy::too_many_arguments)]
pub fn eval_rollout_return<S: Scalar>(
    model: &TadtModel<S>,
    stats: &ReturnStats,
    mdp: &TabularMdp,
    gamma: f64,
    target_return: TargetRule,
    segment_len: usize,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
    reward_mode: RewardMode,
) -> Result<f64> {
    if horizon == 0 || segment_len == 0 {
        return Err(Error::InvalidParameter("horizon and segment_len must be >= 1".into()));
    }
    if n_episodes == 0 {
        return Err(Error::InvalidParameter("n_episodes must be >= 1".into()));
    }
    let mut session = InferenceSession::new(model, stats);
    let mut total = 0.0;
    for ep in 0..n_episodes {
        let mut env = EnvSim::new(mdp, seed, ep as u64, reward_mode);
        let mut ctx = InferenceContext::default();
        let mut seg_rewards: Vec<f64> = Vec::new();
        let mut episode_return = 0.0;
        for t in 0..horizon {
            if t % segment_len == 0 {
                ctx = InferenceContext::default();
                seg_rewards.clear();
                session.reset();
            }
            let k = ctx.states.len();
            let (rtg_t, ta_t) = if k == 0 {
                (target_return.target(env.observe()), 0.0)
            } else {
                let prev_rtg = ctx.rtg[k - 1];
                let prev_reward = seg_rewards[k - 1];
                let rtg = if gamma < 1.0 {
                    (prev_rtg - prev_reward) / gamma
                } else {
                    prev_rtg - prev_reward
                };
                let ta = gamma * ctx.ta[k - 1] + (rtg - prev_rtg);
                (rtg, ta)
            };
            let obs = env.observe().to_vec();
            ctx.rtg.push(rtg_t);
            ctx.ta.push(ta_t);
            ctx.states.push(obs);
            let probs = session.action_probs(&ctx)?;
            let action = crate::nn::graph::argmax(&probs);
            let r = env.step(action)?;
            ctx.actions.push(action);
            seg_rewards.push(r);
            episode_return += r;
        }
        total += episode_return;
    }
    Ok(total / n_episodes as f64)
}
