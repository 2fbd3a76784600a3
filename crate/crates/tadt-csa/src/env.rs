//! Synthetic tabular recommendation MDPs with exact solvers.
//!
//! These environments stand in for a live recommender: states are user
//! situations observed through a fixed random feature map, actions are
//! items, rewards are click-like Bernoulli signals. Exact value iteration
//! and policy evaluation provide ground truth for every downstream check.

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::trajectory::Trajectory;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Explicit (S, A, P, r, gamma) arrays plus the observation map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s']`, rows sum to 1.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]` in [0, 1] (mean of the Bernoulli feedback).
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    /// `state_features[s]` is the `d_s`-dim observation emitted for state s.
    pub state_features: Vec<Vec<f64>>,
    #[serde(default)]
    pub start_state: usize,
}

impl TabularMdp {
    pub fn d_s(&self) -> usize {
        self.state_features[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::InvalidParameter("empty state or action space".into()));
        }
        if self.transition.len() != self.n_states
            || self.reward.len() != self.n_states
            || self.state_features.len() != self.n_states
        {
            return Err(Error::Shape("mdp array lengths".into()));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = &self.transition[s][a];
                if row.len() != self.n_states {
                    return Err(Error::Shape(format!("P[{s}][{a}] length")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "P[{s}][{a}] is not a distribution (sum {sum})"
                    )));
                }
                let r = self.reward[s][a];
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::InvalidParameter(format!(
                        "reward[{s}][{a}] = {r} outside [0, 1]"
                    )));
                }
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidParameter(format!(
                "mdp gamma must be in [0, 1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mdp: TabularMdp = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        mdp.validate()?;
        Ok(mdp)
    }
}

/// Row-stochastic action distribution per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub action_probs: Vec<Vec<f64>>,
}

impl PolicyTable {
    pub fn deterministic(n_states: usize, n_actions: usize, act: impl Fn(usize) -> usize) -> Self {
        let action_probs = (0..n_states)
            .map(|s| {
                let mut row = vec![0.0; n_actions];
                row[act(s)] = 1.0;
                row
            })
            .collect();
        PolicyTable { action_probs }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        PolicyTable {
            action_probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    pub fn validate(&self, n_actions: usize) -> Result<()> {
        for (s, row) in self.action_probs.iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::Shape(format!("policy row {s} length")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0) {
                return Err(Error::InvalidParameter(format!("policy row {s} not a distribution")));
            }
        }
        Ok(())
    }
}

/// Random MDP with a sparse transition structure. Deterministic per seed.
pub fn make_random_mdp(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    d_s: usize,
    sparsity: f64,
) -> Result<TabularMdp> {
    if n_states == 0 || n_actions == 0 || d_s == 0 {
        return Err(Error::InvalidParameter("sizes must be >= 1".into()));
    }
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::InvalidParameter(format!("sparsity {sparsity} outside (0, 1]")));
    }
    let mut rng = stream(seed, "random-mdp", 0);
    let support = ((sparsity * n_states as f64).ceil() as usize).clamp(1, n_states);

    let mut transition = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    let mut reward = vec![vec![0.0; n_actions]; n_states];
    for s in 0..n_states {
        for a in 0..n_actions {
            // Sample `support` distinct successor states.
            let mut ids: Vec<usize> = (0..n_states).collect();
            for i in 0..support {
                let j = rng.gen_range(i..n_states);
                ids.swap(i, j);
            }
            let weights: Vec<f64> = (0..support).map(|_| -rng.gen_range(1e-9..1.0f64).ln()).collect();
            let total: f64 = weights.iter().sum();
            for (k, &s2) in ids[..support].iter().enumerate() {
                transition[s][a][s2] = weights[k] / total;
            }
            // Exact renormalization so row sums hold to strict tolerance.
            let sum: f64 = transition[s][a].iter().sum();
            for p in &mut transition[s][a] {
                *p /= sum;
            }
            reward[s][a] = rng.gen_range(0.0..1.0);
        }
    }
    let state_features = (0..n_states)
        .map(|_| {
            (0..d_s)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        })
        .collect();
    let mdp = TabularMdp {
        n_states,
        n_actions,
        transition,
        reward,
        gamma: 0.9,
        state_features,
        start_state: 0,
    };
    mdp.validate()?;
    Ok(mdp)
}

/// Length of each corridor region in the stitching MDP.
pub const STITCH_REGION_LEN: usize = 3;

/// Advance probability of a behavior policy inside its incompetent
/// region (slow random progress rather than a hard stall, so state
/// occupancies stay comparable between behaviors).
pub const STITCH_INCOMPETENT_ADVANCE: f64 = 0.2;

/// Corridor MDP where sustained reward requires competence in two
/// regions. Returns the MDP plus two behavior policies: A advances
/// reliably through the first region but fumbles in the second, B the
/// reverse. Only their composition traverses the corridor efficiently.
///
/// Which of the two actions advances is drawn per state from the seed, so
/// no constant-action policy makes progress by luck. Region 1 pays
/// nothing, region 2 pays a 0.2 trickle, the terminal loop pays 1 and
/// teleports back to the start occasionally, cycling episodes through
/// the corridor.
pub fn make_stitching_mdp(seed: u64) -> (TabularMdp, PolicyTable, PolicyTable) {
    let l1 = STITCH_REGION_LEN;
    let l2 = STITCH_REGION_LEN;
    let n_states = l1 + l2 + 1;
    let goal = n_states - 1;
    let n_actions = 2;
    let d_s = 6;

    let mut rng = stream(seed, "stitching-env", 0);
    let advance: Vec<usize> = (0..n_states).map(|_| rng.gen_range(0..n_actions)).collect();

    const RESTART_PROB: f64 = 0.12;
    let mut transition = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    let mut reward = vec![vec![0.0; n_actions]; n_states];
    for s in 0..n_states {
        let adv = advance[s];
        if s == goal {
            for a in 0..n_actions {
                transition[s][a][0] = RESTART_PROB;
                transition[s][a][goal] = 1.0 - RESTART_PROB;
                reward[s][a] = 1.0;
            }
        } else {
            transition[s][adv][s + 1] = 1.0;
            transition[s][1 - adv][s] = 1.0;
            if s >= l1 {
                reward[s][0] = 0.2;
                reward[s][1] = 0.2;
            }
        }
    }

    let state_features = (0..n_states)
        .map(|_| {
            (0..d_s)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        })
        .collect();

    let mdp = TabularMdp {
        n_states,
        n_actions,
        transition,
        reward,
        gamma: 0.99,
        state_features,
        start_state: 0,
    };
    // Behavior rows: deterministic advance in the competent region, a
    // 0.2-advance fumble in the other. Both actions are equivalent at
    // the terminal loop, so they are logged uniformly there.
    let p_adv = STITCH_INCOMPETENT_ADVANCE;
    let row = |s: usize, competent: bool| -> Vec<f64> {
        let mut r = vec![0.0; n_actions];
        if competent {
            r[advance[s]] = 1.0;
        } else {
            r[advance[s]] = p_adv;
            r[1 - advance[s]] = 1.0 - p_adv;
        }
        r
    };
    let mut policy_a = PolicyTable { action_probs: Vec::new() };
    let mut policy_b = PolicyTable { action_probs: Vec::new() };
    for s in 0..n_states {
        if s == goal {
            policy_a.action_probs.push(vec![0.5, 0.5]);
            policy_b.action_probs.push(vec![0.5, 0.5]);
        } else {
            policy_a.action_probs.push(row(s, s < l1));
            policy_b.action_probs.push(row(s, s >= l1));
        }
    }
    (mdp, policy_a, policy_b)
}

/// Value iteration to sup-norm tolerance `tol`. Greedy ties break toward
/// the lowest action id.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<(Vec<f64>, PolicyTable)> {
    if mdp.gamma >= 1.0 {
        return Err(Error::Unsupported("value iteration requires gamma < 1".into()));
    }
    if tol <= 0.0 {
        return Err(Error::InvalidParameter("tol must be positive".into()));
    }
    let mut v = vec![0.0; mdp.n_states];
    loop {
        let mut next = vec![0.0; mdp.n_states];
        let mut delta: f64 = 0.0;
        for s in 0..mdp.n_states {
            let best = (0..mdp.n_actions)
                .map(|a| q_value(mdp, &v, s, a))
                .fold(f64::NEG_INFINITY, f64::max);
            next[s] = best;
            delta = delta.max((best - v[s]).abs());
        }
        v = next;
        if delta <= tol {
            break;
        }
    }
    let greedy = greedy_policy(mdp, &v);
    Ok((v, greedy))
}

/// One-step lookahead Q for a value vector.
pub fn q_value(mdp: &TabularMdp, v: &[f64], s: usize, a: usize) -> f64 {
    let future: f64 = mdp.transition[s][a]
        .iter()
        .zip(v)
        .map(|(p, vv)| p * vv)
        .sum();
    mdp.reward[s][a] + mdp.gamma * future
}

/// Greedy policy from a value vector; ties break toward the lowest action.
pub fn greedy_policy(mdp: &TabularMdp, v: &[f64]) -> PolicyTable {
    PolicyTable::deterministic(mdp.n_states, mdp.n_actions, |s| {
        let mut best_a = 0;
        let mut best_q = f64::NEG_INFINITY;
        for a in 0..mdp.n_actions {
            let q = q_value(mdp, v, s, a);
            if q > best_q {
                best_q = q;
                best_a = a;
            }
        }
        best_a
    })
}

/// Exact fixed point of the Bellman expectation operator, to tolerance.
pub fn policy_evaluation(mdp: &TabularMdp, policy: &PolicyTable, tol: f64) -> Result<Vec<f64>> {
    if mdp.gamma >= 1.0 {
        return Err(Error::Unsupported("policy evaluation requires gamma < 1".into()));
    }
    if tol <= 0.0 {
        return Err(Error::InvalidParameter("tol must be positive".into()));
    }
    policy.validate(mdp.n_actions)?;
    let mut v = vec![0.0; mdp.n_states];
    loop {
        let mut next = vec![0.0; mdp.n_states];
        let mut delta: f64 = 0.0;
        for s in 0..mdp.n_states {
            let mut val = 0.0;
            for a in 0..mdp.n_actions {
                let pa = policy.action_probs[s][a];
                if pa > 0.0 {
                    val += pa * q_value(mdp, &v, s, a);
                }
            }
            next[s] = val;
            delta = delta.max((val - v[s]).abs());
        }
        v = next;
        if delta <= tol {
            break;
        }
    }
    Ok(v)
}

/// Exact undiscounted expected H-step return of a policy from the start
/// state, by backward recursion over the horizon.
pub fn expected_return(mdp: &TabularMdp, policy: &PolicyTable, horizon: usize) -> Result<f64> {
    policy.validate(mdp.n_actions)?;
    let mut v = vec![0.0; mdp.n_states];
    for _ in 0..horizon {
        let mut next = vec![0.0; mdp.n_states];
        for s in 0..mdp.n_states {
            let mut val = 0.0;
            for a in 0..mdp.n_actions {
                let pa = policy.action_probs[s][a];
                if pa > 0.0 {
                    let future: f64 =
                        mdp.transition[s][a].iter().zip(&v).map(|(p, vv)| p * vv).sum();
                    val += pa * (mdp.reward[s][a] + future);
                }
            }
            next[s] = val;
        }
        v = next;
    }
    Ok(v[mdp.start_state])
}

/// How rewards are emitted when interacting with the environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardMode {
    /// Bernoulli draw with mean `reward[s][a]` (noisy click-style feedback).
    Bernoulli,
    /// Emit the mean directly (exact tests and low-variance evaluation).
    Mean,
}

fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let mut dart: f64 = rng.gen::<f64>() * probs.iter().sum::<f64>();
    for (i, p) in probs.iter().enumerate() {
        dart -= p;
        if dart <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Collects `n` episodes under `(1 - eps) * policy + eps * uniform`.
/// Episode `i` uses an RNG stream derived from `(seed, i)`, so output is
/// identical for any worker count and ordered by episode index.
pub fn collect_trajectories(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    n: usize,
    horizon: usize,
    seed: u64,
    epsilon_noise: f64,
    reward_mode: RewardMode,
    workers: usize,
) -> Result<Vec<Trajectory>> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&epsilon_noise) {
        return Err(Error::InvalidParameter("epsilon_noise outside [0, 1]".into()));
    }
    policy.validate(mdp.n_actions)?;
    let one_episode = |i: usize| -> Trajectory {
        let mut rng = stream(seed, "collect", i as u64);
        let mut s = mdp.start_state;
        let mut states = Vec::with_capacity(horizon);
        let mut actions = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            states.push(mdp.state_features[s].clone());
            let a = if rng.gen::<f64>() < epsilon_noise {
                rng.gen_range(0..mdp.n_actions)
            } else {
                sample_categorical(&mut rng, &policy.action_probs[s])
            };
            let mean = mdp.reward[s][a];
            let r = match reward_mode {
                RewardMode::Mean => mean,
                RewardMode::Bernoulli => {
                    if rng.gen::<f64>() < mean {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            actions.push(a);
            rewards.push(r);
            s = sample_categorical(&mut rng, &mdp.transition[s][a]);
        }
        Trajectory { user_id: format!("ep{i}"), states, actions, rewards }
    };

    let workers = workers.max(1).min(n.max(1));
    if workers <= 1 {
        return Ok((0..n).map(one_episode).collect());
    }
    let mut out: Vec<Option<Trajectory>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slot) in out.chunks_mut(chunk).enumerate() {
            let f = &one_episode;
            scope.spawn(move || {
                for (j, s) in slot.iter_mut().enumerate() {
                    *s = Some(f(w * chunk + j));
                }
            });
        }
    });
    Ok(out.into_iter().map(|t| t.unwrap()).collect())
}

/// Step-by-step environment simulator for rollouts.
pub struct EnvSim<'a> {
    pub mdp: &'a TabularMdp,
    pub state: usize,
    pub reward_mode: RewardMode,
    rng: rand_chacha::ChaCha8Rng,
}

impl<'a> EnvSim<'a> {
    pub fn new(mdp: &'a TabularMdp, seed: u64, episode: u64, reward_mode: RewardMode) -> Self {
        EnvSim { mdp, state: mdp.start_state, reward_mode, rng: stream(seed, "env-sim", episode) }
    }

    pub fn observe(&self) -> &[f64] {
        &self.mdp.state_features[self.state]
    }

    /// Applies `action`, returns the reward, and advances the state.
    pub fn step(&mut self, action: usize) -> Result<f64> {
        if action >= self.mdp.n_actions {
            return Err(Error::Evaluation(format!(
                "action {action} out of range (n_actions {})",
                self.mdp.n_actions
            )));
        }
        let mean = self.mdp.reward[self.state][action];
        let r = match self.reward_mode {
            RewardMode::Mean => mean,
            RewardMode::Bernoulli => {
                if self.rng.gen::<f64>() < mean {
                    1.0
                } else {
                    0.0
                }
            }
        };
        self.state = sample_categorical(&mut self.rng, &self.mdp.transition[self.state][action]);
        Ok(r)
    }
}

/// History handed to an acting function at each step.
pub struct StepContext<'a> {
    pub states: &'a [Vec<f64>],
    pub actions: &'a [usize],
    pub rewards: &'a [f64],
    pub current_state: &'a [f64],
}

/// Mean undiscounted episode return of `act_fn` over `n_episodes`.
pub fn rollout_policy(
    mdp: &TabularMdp,
    mut act_fn: impl FnMut(&StepContext) -> usize,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
    reward_mode: RewardMode,
) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    if n_episodes == 0 {
        return Err(Error::InvalidParameter("n_episodes must be >= 1".into()));
    }
    let mut total = 0.0;
    for ep in 0..n_episodes {
        let mut env = EnvSim::new(mdp, seed, ep as u64, reward_mode);
        let mut states: Vec<Vec<f64>> = Vec::with_capacity(horizon);
        let mut actions: Vec<usize> = Vec::with_capacity(horizon);
        let mut rewards: Vec<f64> = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let obs = env.observe().to_vec();
            let a = act_fn(&StepContext {
                states: &states,
                actions: &actions,
                rewards: &rewards,
                current_state: &obs,
            });
            let r = env.step(a)?;
            states.push(obs);
            actions.push(a);
            rewards.push(r);
        }
        total += rewards.iter().sum::<f64>();
    }
    Ok(total / n_episodes as f64)
}

/// Convenience: rollout of a fixed policy table.
pub fn rollout_table_policy(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
    reward_mode: RewardMode,
) -> Result<f64> {
    policy.validate(mdp.n_actions)?;
    let feature_to_state = |obs: &[f64]| -> usize {
        // Features are unique per state by construction; match exactly.
        mdp.state_features
            .iter()
            .position(|f| f == obs)
            .expect("observation not in feature table")
    };
    let mut rng = stream(seed, "table-policy", 0);
    rollout_policy(
        mdp,
        |ctx| {
            let s = feature_to_state(ctx.current_state);
            sample_categorical(&mut rng, &policy.action_probs[s])
        },
        n_episodes,
        horizon,
        seed,
        reward_mode,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_mdp_deterministic_per_seed() {
        let a = make_random_mdp(5, 6, 3, 4, 0.5).unwrap();
        let b = make_random_mdp(5, 6, 3, 4, 0.5).unwrap();
        assert_eq!(a.transition, b.transition);
        assert_eq!(a.reward, b.reward);
        assert_eq!(a.state_features, b.state_features);
        let c = make_random_mdp(6, 6, 3, 4, 0.5).unwrap();
        assert_ne!(a.transition, c.transition);
    }

    #[test]
    fn random_mdp_single_state_forced_self_loop() {
        let mdp = make_random_mdp(1, 1, 1, 2, 1.0).unwrap();
        assert_eq!(mdp.transition, vec![vec![vec![1.0]]]);
    }

    #[test]
    fn random_mdp_rows_sum_to_one() {
        let mdp = make_random_mdp(9, 12, 4, 3, 0.3).unwrap();
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let sum: f64 = mdp.transition[s][a].iter().sum();
                assert!((sum - 1.0).abs() <= 1e-9);
            }
        }
        mdp.validate().unwrap();
    }

    #[test]
    fn value_iteration_geometric_series() {
        let mdp = TabularMdp {
            n_states: 1,
            n_actions: 1,
            transition: vec![vec![vec![1.0]]],
            reward: vec![vec![1.0]],
            gamma: 0.5,
            state_features: vec![vec![0.0]],
            start_state: 0,
        };
        let (v, _) = value_iteration(&mdp, 1e-12).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn value_iteration_picks_better_action() {
        let mdp = TabularMdp {
            n_states: 1,
            n_actions: 2,
            transition: vec![vec![vec![1.0], vec![1.0]]],
            reward: vec![vec![0.0, 1.0]],
            gamma: 0.9,
            state_features: vec![vec![0.0]],
            start_state: 0,
        };
        let (v, pi) = value_iteration(&mdp, 1e-12).unwrap();
        assert!((v[0] - 10.0).abs() < 1e-8);
        assert_eq!(pi.action_probs[0], vec![0.0, 1.0]);
    }

    #[test]
    fn value_iteration_bellman_residual() {
        let mdp = make_random_mdp(3, 8, 3, 2, 0.6).unwrap();
        let tol = 1e-10;
        let (v, _) = value_iteration(&mdp, tol).unwrap();
        for s in 0..mdp.n_states {
            let best = (0..mdp.n_actions)
                .map(|a| q_value(&mdp, &v, s, a))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((best - v[s]).abs() <= tol, "residual at {s}");
        }
    }

    #[test]
    fn value_iteration_rejects_gamma_one() {
        let mut mdp = make_random_mdp(3, 2, 2, 2, 1.0).unwrap();
        mdp.gamma = 1.0;
        assert!(matches!(value_iteration(&mdp, 1e-6), Err(Error::Unsupported(_))));
    }

    #[test]
    fn policy_evaluation_matches_value_iteration_on_greedy() {
        let mdp = make_random_mdp(11, 8, 3, 2, 0.5).unwrap();
        let tol = 1e-10;
        let (v, greedy) = value_iteration(&mdp, tol).unwrap();
        let v_pi = policy_evaluation(&mdp, &greedy, tol).unwrap();
        let bound = 2.0 * tol / (1.0 - mdp.gamma);
        for s in 0..mdp.n_states {
            assert!((v[s] - v_pi[s]).abs() <= bound);
        }
    }

    #[test]
    fn policy_evaluation_symmetric_two_state() {
        // Symmetric 2-state MDP: uniform policy gives equal values.
        let mdp = TabularMdp {
            n_states: 2,
            n_actions: 2,
            transition: vec![
                vec![vec![0.0, 1.0], vec![1.0, 0.0]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ],
            reward: vec![vec![0.5, 0.25], vec![0.5, 0.25]],
            gamma: 0.9,
            state_features: vec![vec![0.0], vec![1.0]],
            start_state: 0,
        };
        let v = policy_evaluation(&mdp, &PolicyTable::uniform(2, 2), 1e-12).unwrap();
        assert!((v[0] - v[1]).abs() < 1e-9);
    }

    #[test]
    fn policy_evaluation_single_state_average() {
        let mdp = TabularMdp {
            n_states: 1,
            n_actions: 2,
            transition: vec![vec![vec![1.0], vec![1.0]]],
            reward: vec![vec![0.2, 0.8]],
            gamma: 0.5,
            state_features: vec![vec![0.0]],
            start_state: 0,
        };
        let v = policy_evaluation(&mdp, &PolicyTable::uniform(1, 2), 1e-12).unwrap();
        assert!((v[0] - 0.5 / (1.0 - 0.5)).abs() < 1e-9);
    }

    #[test]
    fn stitching_requires_composition() {
        for seed in [0, 1, 2, 7, 41] {
            let (mdp, a, b) = make_stitching_mdp(seed);
            mdp.validate().unwrap();
            a.validate(mdp.n_actions).unwrap();
            b.validate(mdp.n_actions).unwrap();
            let tol = 1e-10;
            let (v_star, _) = value_iteration(&mdp, tol).unwrap();
            let va = policy_evaluation(&mdp, &a, tol).unwrap();
            let vb = policy_evaluation(&mdp, &b, tol).unwrap();
            let s0 = mdp.start_state;
            let best_behavior = va[s0].max(vb[s0]);
            assert!(v_star[s0] > best_behavior);
            assert!(best_behavior < 0.9 * v_star[s0], "seed {seed}");
        }
    }

    #[test]
    fn stitching_deterministic_per_seed() {
        let (m1, a1, b1) = make_stitching_mdp(3);
        let (m2, a2, b2) = make_stitching_mdp(3);
        assert_eq!(m1.state_features, m2.state_features);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn collect_uniform_noise_frequencies() {
        let mdp = make_random_mdp(2, 4, 4, 2, 1.0).unwrap();
        let policy = PolicyTable::deterministic(4, 4, |_| 0);
        let trajs =
            collect_trajectories(&mdp, &policy, 50, 40, 11, 1.0, RewardMode::Mean, 1).unwrap();
        let mut counts = [0usize; 4];
        for tr in &trajs {
            for &a in &tr.actions {
                counts[a] += 1;
            }
        }
        let n: usize = counts.iter().sum();
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // df = 3; 16.27 is the 99.9% quantile. Loose bound, fixed seed.
        assert!(chi2 < 25.0, "chi2 = {chi2}");
    }

    #[test]
    fn collect_horizon_one() {
        let mdp = make_random_mdp(2, 3, 2, 2, 1.0).unwrap();
        let trajs = collect_trajectories(
            &mdp,
            &PolicyTable::uniform(3, 2),
            5,
            1,
            0,
            0.0,
            RewardMode::Mean,
            1,
        )
        .unwrap();
        assert!(trajs.iter().all(|t| t.len() == 1));
    }

    #[test]
    fn collect_deterministic_setup_identical_episodes() {
        // Deterministic 2-state cycle + deterministic policy: every
        // episode is the same.
        let mdp = TabularMdp {
            n_states: 2,
            n_actions: 2,
            transition: vec![
                vec![vec![0.0, 1.0], vec![1.0, 0.0]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ],
            reward: vec![vec![0.25, 0.5], vec![0.75, 1.0]],
            gamma: 0.9,
            state_features: vec![vec![0.0], vec![1.0]],
            start_state: 0,
        };
        let policy = PolicyTable::deterministic(2, 2, |s| s);
        let trajs =
            collect_trajectories(&mdp, &policy, 4, 6, 9, 0.0, RewardMode::Mean, 1).unwrap();
        for tr in &trajs[1..] {
            assert_eq!(tr.actions, trajs[0].actions);
            assert_eq!(tr.rewards, trajs[0].rewards);
            assert_eq!(tr.states, trajs[0].states);
        }
    }

    #[test]
    fn collect_worker_count_does_not_change_output() {
        let mdp = make_random_mdp(8, 5, 3, 2, 0.7).unwrap();
        let pol = PolicyTable::uniform(5, 3);
        let a = collect_trajectories(&mdp, &pol, 9, 7, 21, 0.3, RewardMode::Bernoulli, 1).unwrap();
        let b = collect_trajectories(&mdp, &pol, 9, 7, 21, 0.3, RewardMode::Bernoulli, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rollout_optimal_matches_solver_expectation() {
        // Mean rollout return of the greedy policy matches the exact
        // finite-horizon expectation within Monte-Carlo error.
        let (mdp, _, _) = make_stitching_mdp(5);
        let (v_star, greedy) = value_iteration(&mdp, 1e-10).unwrap();
        let horizon = 60;
        let episodes = 400;
        let got =
            rollout_table_policy(&mdp, &greedy, episodes, horizon, 1, RewardMode::Mean).unwrap();
        let expect = expected_return(&mdp, &greedy, horizon).unwrap();
        // Per-episode std is < horizon/4; 4 sigma of the mean.
        let tol = 4.0 * (horizon as f64 / 4.0) / (episodes as f64).sqrt();
        assert!((got - expect).abs() < tol, "got {got}, expect {expect}");
        assert!(v_star[mdp.start_state] > 0.0);
    }

    #[test]
    fn rollout_zero_reward_mdp() {
        let mut mdp = make_random_mdp(4, 3, 2, 2, 1.0).unwrap();
        for row in &mut mdp.reward {
            row.iter_mut().for_each(|r| *r = 0.0);
        }
        let got = rollout_policy(&mdp, |_| 0, 4, 10, 3, RewardMode::Bernoulli).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn rollout_zero_horizon_is_error() {
        let mdp = make_random_mdp(4, 3, 2, 2, 1.0).unwrap();
        assert!(matches!(
            rollout_policy(&mdp, |_| 0, 1, 0, 0, RewardMode::Mean),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn rollout_invalid_action_is_evaluation_error() {
        let mdp = make_random_mdp(4, 3, 2, 2, 1.0).unwrap();
        assert!(matches!(
            rollout_policy(&mdp, |_| 99, 1, 5, 0, RewardMode::Mean),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn mdp_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mdp.json");
        let mdp = make_random_mdp(13, 5, 2, 3, 0.8).unwrap();
        mdp.save(&path).unwrap();
        let loaded = TabularMdp::load(&path).unwrap();
        assert_eq!(loaded.transition, mdp.transition);
        assert_eq!(loaded.reward, mdp.reward);
        assert_eq!(loaded.state_features, mdp.state_features);
    }
}
