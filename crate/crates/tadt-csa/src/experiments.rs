//! Packaged experiments: trajectory-stitching curves and ablation-variant
//! comparisons on the synthetic environments.

use crate::env::{
    collect_trajectories, make_random_mdp, make_stitching_mdp, policy_evaluation,
    rollout_table_policy, value_iteration, PolicyTable, RewardMode, TabularMdp,
};
use crate::error::{Error, Result};
use crate::eval::{best_target_by_state, eval_rollout_return, lookup_target, TargetRule};
use crate::nn::Scalar;
use crate::train::{load_checkpoint, train, TrainConfig, TrainOutcome};
use crate::trajectory::{DatasetMeta, Trajectory};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Ablation variants mirroring the model's switchable components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoTac,
    NoTacCtp,
    NoTacCtpRp,
    NoCsa,
    NoCsaTa,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoTac,
        Variant::NoTacCtp,
        Variant::NoTacCtpRp,
        Variant::NoCsa,
        Variant::NoCsaTa,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTac => "no_tac",
            Variant::NoTacCtp => "no_tac_ctp",
            Variant::NoTacCtpRp => "no_tac_ctp_rp",
            Variant::NoCsa => "no_csa",
            Variant::NoCsaTa => "no_csa_ta",
        }
    }

    /// Applies the variant's switches to a base configuration.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoTac => {
                c.no_tac = true;
            }
            Variant::NoTacCtp => {
                c.no_tac = true;
                c.no_ctp = true;
                c.lambda4 = 0.0;
            }
            Variant::NoTacCtpRp => {
                c.no_tac = true;
                c.no_ctp = true;
                c.no_rp = true;
                c.lambda3 = 0.0;
                c.lambda4 = 0.0;
            }
            Variant::NoCsa => {
                c.no_csa = true;
                c.lambda1 = 0.0;
                c.lambda3 = 0.0;
                c.lambda4 = 0.0;
                c.lambda5 = 0.0;
            }
            Variant::NoCsaTa => {
                c.no_csa = true;
                c.no_ta = true;
                c.lambda1 = 0.0;
                c.lambda3 = 0.0;
                c.lambda4 = 0.0;
                c.lambda5 = 0.0;
            }
        }
        c
    }
}

/// Highest first-step RTG over chunked samples: the conditioning target
/// for evaluation rollouts.
pub fn best_observed_target(
    trajs: &[Trajectory],
    gamma: f64,
    chunk_len: usize,
) -> Result<f64> {
    let samples = crate::train::chunk_trajectories(trajs, gamma, chunk_len)?;
    Ok(samples
        .iter()
        .map(|s| s.rtg[0])
        .fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchPoint {
    pub chunk_length: usize,
    pub step: u64,
    pub mean_return: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchSummary {
    /// Mean rollout return of the exact optimal policy.
    pub optimal_return: f64,
    /// Mean rollout returns of the two behavior policies.
    pub behavior_returns: [f64; 2],
    /// Discounted values at the start state from the exact solvers.
    pub v_star_start: f64,
    pub behavior_values_start: [f64; 2],
    /// Final mean return per chunk length.
    pub final_returns: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct StitchConfig {
    pub train: TrainConfig,
    pub chunk_lengths: Vec<usize>,
    /// Episodes per behavior policy in the offline dataset.
    pub episodes_per_policy: usize,
    pub horizon: usize,
    pub epsilon_noise: f64,
    pub eval_episodes: usize,
    /// Rollout evaluation cadence in optimizer steps (drives the curve).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for StitchConfig {
    fn default() -> Self {
        let mut train = TrainConfig::desk_test();
        train.codebook_size = 16;
        train.epochs = 6;
        train.lr = 1e-2;
        // Usage-level diversity: per-sample entropy maximization washes
        // out the state information the policy needs.
        train.reg_mode = crate::csa::RegMode::BatchMean;
        StitchConfig {
            train,
            chunk_lengths: vec![30, 50],
            episodes_per_policy: 30,
            horizon: 200,
            epsilon_noise: 0.05,
            eval_episodes: 5,
            eval_every: 40,
            seed: 0,
        }
    }
}

/// Builds the mixed two-behavior dataset on the stitching environment.
pub fn stitching_dataset(
    cfg: &StitchConfig,
) -> Result<(TabularMdp, PolicyTable, PolicyTable, Vec<Trajectory>, DatasetMeta)> {
    let (mdp, pol_a, pol_b) = make_stitching_mdp(cfg.seed);
    let mut trajs = collect_trajectories(
        &mdp,
        &pol_a,
        cfg.episodes_per_policy,
        cfg.horizon,
        cfg.seed,
        cfg.epsilon_noise,
        RewardMode::Bernoulli,
        cfg.train.workers,
    )?;
    trajs.extend(collect_trajectories(
        &mdp,
        &pol_b,
        cfg.episodes_per_policy,
        cfg.horizon,
        cfg.seed.wrapping_add(1),
        cfg.epsilon_noise,
        RewardMode::Bernoulli,
        cfg.train.workers,
    )?);
    // Undiscounted within-chunk return signals.
    let meta = DatasetMeta { gamma: 1.0, d_s: mdp.d_s(), m: mdp.n_actions, return_stats: None };
    Ok((mdp, pol_a, pol_b, trajs, meta))
}

/// Trains one model per chunk length and traces rollout return over
/// training steps via the periodic checkpoints.
pub fn stitching_experiment<S: Scalar>(
    cfg: &StitchConfig,
    out_dir: &Path,
) -> Result<(Vec<StitchPoint>, StitchSummary)> {
    if cfg.chunk_lengths.is_empty() {
        return Err(Error::InvalidParameter("chunk_lengths must be nonempty".into()));
    }
    if let Some(&bad) = cfg.chunk_lengths.iter().find(|&&c| c == 0 || c > cfg.horizon) {
        return Err(Error::InvalidParameter(format!(
            "chunk length {bad} outside [1, horizon = {}]",
            cfg.horizon
        )));
    }
    let (mdp, pol_a, pol_b, trajs, meta) = stitching_dataset(cfg)?;
    let tol = 1e-10;
    let (v_star, greedy) = value_iteration(&mdp, tol)?;
    let va = policy_evaluation(&mdp, &pol_a, tol)?;
    let vb = policy_evaluation(&mdp, &pol_b, tol)?;
    let s0 = mdp.start_state;

    let eval_seed = cfg.seed.wrapping_add(7777);
    let optimal_return = rollout_table_policy(
        &mdp,
        &greedy,
        cfg.eval_episodes,
        cfg.horizon,
        eval_seed,
        RewardMode::Mean,
    )?;
    let behavior_returns = [
        rollout_table_policy(&mdp, &pol_a, cfg.eval_episodes, cfg.horizon, eval_seed, RewardMode::Mean)?,
        rollout_table_policy(&mdp, &pol_b, cfg.eval_episodes, cfg.horizon, eval_seed, RewardMode::Mean)?,
    ];

    let mut points = Vec::new();
    let mut final_returns = Vec::new();
    for &chunk in &cfg.chunk_lengths {
        let mut tc = cfg.train.clone();
        tc.t_max = chunk;
        tc.seed = cfg.seed;
        tc.checkpoint_every = cfg.eval_every;
        let run_dir = out_dir.join(format!("chunk{chunk}"));
        let samples = crate::train::chunk_trajectories(&trajs, meta.gamma, chunk)?;
        let targets = best_target_by_state(&samples);
        let target_fn = |obs: &[f64]| lookup_target(&targets, obs);
        let out: TrainOutcome<S> = train(&tc, &trajs, &meta, Some(&run_dir))?;
        let mut last = 0.0;
        for path in &out.checkpoint_paths {
            let loaded = load_checkpoint::<S>(path)?;
            let mean_return = eval_rollout_return(
                &loaded.model,
                &loaded.stats,
                &mdp,
                meta.gamma,
                TargetRule::PerState(&target_fn),
                chunk,
                cfg.eval_episodes,
                cfg.horizon,
                eval_seed,
                RewardMode::Mean,
            )?;
            points.push(StitchPoint { chunk_length: chunk, step: loaded.step, mean_return });
            last = mean_return;
        }
        final_returns.push((chunk, last));
    }

    Ok((
        points,
        StitchSummary {
            optimal_return,
            behavior_returns,
            v_star_start: v_star[s0],
            behavior_values_start: [va[s0], vb[s0]],
            final_returns,
        },
    ))
}

pub fn stitch_points_csv(points: &[StitchPoint]) -> String {
    let mut out = String::from("chunk_length,step,mean_return\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.chunk_length, p.step, p.mean_return));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub seed: u64,
    pub mean_return: f64,
}

#[derive(Debug, Clone)]
pub struct VariantBenchConfig {
    pub train: TrainConfig,
    pub n_states: usize,
    pub n_actions: usize,
    pub d_s: usize,
    pub episodes: usize,
    pub horizon: usize,
    pub behavior_greedy_mix: f64,
    pub eval_episodes: usize,
    pub env_seed: u64,
}

impl Default for VariantBenchConfig {
    fn default() -> Self {
        let mut train = TrainConfig::desk_test();
        train.epochs = 8;
        train.lr = 1e-2;
        train.t_max = 24;
        VariantBenchConfig {
            train,
            n_states: 12,
            n_actions: 4,
            d_s: 8,
            episodes: 80,
            horizon: 24,
            behavior_greedy_mix: 0.35,
            eval_episodes: 10,
            env_seed: 0,
        }
    }
}

/// Shared random-MDP benchmark dataset: behavior is a mixture of the
/// optimal greedy policy and uniform exploration, so the data contains
/// signal without being expert-only.
pub fn variant_bench_dataset(
    cfg: &VariantBenchConfig,
) -> Result<(TabularMdp, Vec<Trajectory>, DatasetMeta)> {
    let mdp = make_random_mdp(cfg.env_seed, cfg.n_states, cfg.n_actions, cfg.d_s, 0.5)?;
    let (_, greedy) = value_iteration(&mdp, 1e-10)?;
    let trajs = collect_trajectories(
        &mdp,
        &greedy,
        cfg.episodes,
        cfg.horizon,
        cfg.env_seed.wrapping_add(13),
        1.0 - cfg.behavior_greedy_mix,
        RewardMode::Bernoulli,
        cfg.train.workers,
    )?;
    let meta = DatasetMeta { gamma: 1.0, d_s: cfg.d_s, m: cfg.n_actions, return_stats: None };
    Ok((mdp, trajs, meta))
}

/// Trains one variant and scores its mean rollout return.
pub fn run_variant<S: Scalar>(
    cfg: &VariantBenchConfig,
    variant: Variant,
    seed: u64,
) -> Result<VariantResult> {
    let (mdp, trajs, meta) = variant_bench_dataset(cfg)?;
    let mut tc = variant.apply(&cfg.train);
    tc.seed = seed;
    let samples = crate::train::chunk_trajectories(&trajs, meta.gamma, tc.t_max)?;
    let targets = best_target_by_state(&samples);
    let target_fn = |obs: &[f64]| lookup_target(&targets, obs);
    let out: TrainOutcome<S> = train(&tc, &trajs, &meta, None)?;
    let mean_return = eval_rollout_return(
        &out.model,
        &out.stats,
        &mdp,
        meta.gamma,
        TargetRule::PerState(&target_fn),
        tc.t_max,
        cfg.eval_episodes,
        cfg.horizon,
        cfg.env_seed.wrapping_add(991),
        RewardMode::Mean,
    )?;
    Ok(VariantResult { variant: variant.name().to_string(), seed, mean_return })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_configs_validate() {
        let meta = DatasetMeta { gamma: 1.0, d_s: 8, m: 4, return_stats: None };
        for v in Variant::ALL {
            let cfg = v.apply(&TrainConfig::desk_test());
            cfg.to_model_config(&meta).unwrap();
        }
    }

    #[test]
    fn chunk_length_validation() {
        let mut cfg = StitchConfig::default();
        cfg.chunk_lengths = vec![500];
        cfg.horizon = 200;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            stitching_experiment::<f32>(&cfg, dir.path()),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn chunk_accounting() {
        // A length-200 trajectory at chunk 50 yields 4 chunks, and every
        // chunk length consumes the same total number of transitions.
        let tr = Trajectory {
            user_id: "u".into(),
            states: vec![vec![0.0]; 200],
            actions: vec![0; 200],
            rewards: vec![0.0; 200],
        };
        let c50 = crate::train::chunk_trajectories(&[tr.clone()], 1.0, 50).unwrap();
        assert_eq!(c50.len(), 4);
        for chunk_len in [30, 50, 200] {
            let chunks = crate::train::chunk_trajectories(&[tr.clone()], 1.0, chunk_len).unwrap();
            let total: usize = chunks.iter().map(|c| c.len()).sum();
            assert_eq!(total, 200);
        }
    }

    #[test]
    fn stitching_dataset_contains_both_behaviors() {
        let cfg = StitchConfig {
            episodes_per_policy: 3,
            horizon: 20,
            ..StitchConfig::default()
        };
        let (mdp, _, _, trajs, meta) = stitching_dataset(&cfg).unwrap();
        assert_eq!(trajs.len(), 6);
        assert_eq!(meta.d_s, mdp.d_s());
        assert!(trajs.iter().all(|t| t.len() == 20));
    }
}
