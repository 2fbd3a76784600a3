//! Empirical checks of the value-difference bound and the covering-radius
//! scaling law.
//!
//! The bound says: with reward-prediction error eps_r, transition-
//! prediction error eps_P, Lipschitz constant kappa, concentration factor
//! I, embedding dimension d, and codebook size |C|,
//!
//! `V*(s) - V_pi(s) <= 2/(1-g)^2 (eps_r + kappa I^((d+2)/2d) |C|^(-1/d)
//!                              + g eps_P |C| / (1-g))`.
//!
//! kappa and I are not observable exactly; the checker reports a sampled
//! Lipschitz estimate, flags the verdict as conditional on it, and also
//! reports the minimal kappa that would make the bound hold.

use crate::env::{policy_evaluation, q_value, value_iteration, PolicyTable, TabularMdp};
use crate::error::{Error, Result};
use crate::model::TadtModel;
use crate::nn::graph::{argmax, Graph};
use crate::nn::layers::relu_mlp;
use crate::nn::{Scalar, Tensor};
use crate::rng::stream;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A state abstraction exposed for bound checking: assignment, predicted
/// rewards/transitions at code level, and the embeddings behind it.
pub trait Abstraction {
    fn n_codes(&self) -> usize;
    fn code_of(&self, state: usize) -> usize;
    fn reward_pred(&self, code: usize, action: usize) -> f64;
    /// Distribution over next codes for (code, action).
    fn transition_pred(&self, code: usize, action: usize) -> Vec<f64>;
    fn embedding(&self, state: usize) -> Vec<f64>;
    fn code_vector(&self, code: usize) -> Vec<f64>;
}

/// Exact tabular abstraction: every state is its own code and the
/// predictors read the MDP tables directly. Embeddings are one-hot, code
/// vectors identical, so every error term is exactly zero.
pub struct LosslessAbstraction<'a> {
    mdp: &'a TabularMdp,
}

impl<'a> LosslessAbstraction<'a> {
    pub fn new(mdp: &'a TabularMdp) -> Self {
        LosslessAbstraction { mdp }
    }
}

impl Abstraction for LosslessAbstraction<'_> {
    fn n_codes(&self) -> usize {
        self.mdp.n_states
    }
    fn code_of(&self, state: usize) -> usize {
        state
    }
    fn reward_pred(&self, code: usize, action: usize) -> f64 {
        self.mdp.reward[code][action]
    }
    fn transition_pred(&self, code: usize, action: usize) -> Vec<f64> {
        self.mdp.transition[code][action].clone()
    }
    fn embedding(&self, state: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.mdp.n_states];
        e[state] = 1.0;
        e
    }
    fn code_vector(&self, code: usize) -> Vec<f64> {
        self.embedding(code)
    }
}

/// Trained-model abstraction: encoder + codebook assignment (TA channel
/// zeroed, as at the first timestep), RP net for rewards, CTP logits
/// softmaxed over next codes for transitions.
pub struct ModelAbstraction {
    m: usize,
    codes: Vec<usize>,
    embeddings: Vec<Vec<f64>>,
    code_vectors: Vec<Vec<f64>>,
    rewards: Vec<Vec<f64>>,
    transitions: Vec<Vec<Vec<f64>>>,
}

impl ModelAbstraction {
    pub fn from_model<S: Scalar>(model: &TadtModel<S>, mdp: &TabularMdp) -> Result<Self> {
        if mdp.d_s() != model.cfg.d_s {
            return Err(Error::Shape(format!(
                "mdp feature dim {} != model d_s {}",
                mdp.d_s(),
                model.cfg.d_s
            )));
        }
        let m = model.cfg.codebook_size;
        let mut g: Graph<S> = Graph::new();
        let (vars, _) = model.bind(&mut g);

        // Encoder outputs and hard assignments (noise-free, TA = 0).
        let mut codes = Vec::with_capacity(mdp.n_states);
        let mut embeddings = Vec::with_capacity(mdp.n_states);
        for s in 0..mdp.n_states {
            let row = g.input(Tensor::from_f64(1, model.cfg.d_s, &mdp.state_features[s])?);
            let e = relu_mlp(&mut g, row, &vars.state_encoder)?;
            let scores = g.matmul_nt(e, vars.codebook)?;
            let scaled = g.scale(scores, model.cfg.alpha_eff());
            codes.push(argmax(g.value(scaled).row_slice(0)));
            embeddings.push(g.value(e).to_f64_vec());
        }
        let code_vectors: Vec<Vec<f64>> = (0..m)
            .map(|c| {
                model
                    .csa
                    .codebook
                    .vectors
                    .row_slice(c)
                    .iter()
                    .map(|v| v.to64())
                    .collect()
            })
            .collect();

        // RP table per (code, action).
        let mut rewards = vec![vec![0.0; mdp.n_actions]; m];
        let mut transitions = vec![vec![vec![0.0; m]; mdp.n_actions]; m];
        for c in 0..m {
            let cvec = g.gather_rows(vars.codebook, &[c])?;
            for a in 0..mdp.n_actions {
                let aemb = g.gather_rows(vars.item_emb, &[a])?;
                let rhat = crate::csa::rp_forward(&mut g, &vars.rp_net, cvec, aemb)?;
                rewards[c][a] = g.value(rhat).scalar_value().to64();
                let mut logits = Vec::with_capacity(m);
                for c2 in 0..m {
                    let nvec = g.gather_rows(vars.codebook, &[c2])?;
                    let z = crate::csa::ctp_logit(&mut g, &vars.ctp_net, cvec, aemb, nvec)?;
                    logits.push(g.value(z).scalar_value().to64());
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
                let total: f64 = exps.iter().sum();
                for c2 in 0..m {
                    transitions[c][a][c2] = exps[c2] / total;
                }
            }
        }
        Ok(ModelAbstraction { m, codes, embeddings, code_vectors, rewards, transitions })
    }
}

impl Abstraction for ModelAbstraction {
    fn n_codes(&self) -> usize {
        self.m
    }
    fn code_of(&self, state: usize) -> usize {
        self.codes[state]
    }
    fn reward_pred(&self, code: usize, action: usize) -> f64 {
        self.rewards[code][action]
    }
    fn transition_pred(&self, code: usize, action: usize) -> Vec<f64> {
        self.transitions[code][action].clone()
    }
    fn embedding(&self, state: usize) -> Vec<f64> {
        self.embeddings[state].clone()
    }
    fn code_vector(&self, code: usize) -> Vec<f64> {
        self.code_vectors[code].clone()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub eps_r: f64,
    pub eps_p: f64,
    pub covering_radius: f64,
    pub kappa_hat: f64,
    /// Concentration factor clamped into (0, 1]; `i_hat_raw` is the
    /// unclamped Monte-Carlo estimate with its standard error.
    pub i_hat: f64,
    pub i_hat_raw: f64,
    pub i_hat_stderr: f64,
    pub d: usize,
    pub codebook_size: usize,
    pub value_gap: f64,
    pub bound_value: f64,
    /// Verdict conditional on the sampled Lipschitz estimate.
    pub holds_with_kappa_hat: bool,
    /// Minimal kappa that would make the bound hold.
    pub kappa_min: f64,
    pub gamma: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Value iteration over predicted code-level tables (rewards may fall
/// outside [0, 1], so this does not reuse the environment solver).
fn code_value_iteration(
    rewards: &[Vec<f64>],
    transitions: &[Vec<Vec<f64>>],
    gamma: f64,
    tol: f64,
) -> Vec<usize> {
    let m = rewards.len();
    let n_actions = rewards[0].len();
    let mut v = vec![0.0; m];
    loop {
        let mut next = vec![0.0; m];
        let mut delta: f64 = 0.0;
        for c in 0..m {
            let mut best = f64::NEG_INFINITY;
            for a in 0..n_actions {
                let q: f64 = rewards[c][a]
                    + gamma
                        * transitions[c][a].iter().zip(&v).map(|(p, vv)| p * vv).sum::<f64>();
                best = best.max(q);
            }
            next[c] = best;
            delta = delta.max((best - v[c]).abs());
        }
        v = next;
        if delta <= tol {
            break;
        }
    }
    (0..m)
        .map(|c| {
            let mut best_a = 0;
            let mut best_q = f64::NEG_INFINITY;
            for a in 0..n_actions {
                let q: f64 = rewards[c][a]
                    + gamma
                        * transitions[c][a].iter().zip(&v).map(|(p, vv)| p * vv).sum::<f64>();
                if q > best_q {
                    best_q = q;
                    best_a = a;
                }
            }
            best_a
        })
        .collect()
}

/// Full empirical check of the value-difference bound on a tabular MDP.
pub fn theorem_bound_check(
    mdp: &TabularMdp,
    abstraction: &dyn Abstraction,
    seed: u64,
) -> Result<BoundReport> {
    let (n_s, n_a) = (mdp.n_states, mdp.n_actions);
    if n_s * n_a * n_s > 1_000_000 {
        return Err(Error::Enumeration(format!(
            "state-action-state space too large to enumerate: {}",
            n_s * n_a * n_s
        )));
    }
    let m = abstraction.n_codes();
    let codes: Vec<usize> = (0..n_s).map(|s| abstraction.code_of(s)).collect();
    let mut preimage_size = vec![0usize; m];
    for &c in &codes {
        preimage_size[c] += 1;
    }

    // eps_r: worst reward-prediction error over (s, a).
    let mut eps_r = 0.0f64;
    for s in 0..n_s {
        for a in 0..n_a {
            eps_r = eps_r.max((mdp.reward[s][a] - abstraction.reward_pred(codes[s], a)).abs());
        }
    }

    // eps_P: worst transition error with code mass spread uniformly over
    // each code's preimage.
    let trans_pred: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|c| (0..n_a).map(|a| abstraction.transition_pred(c, a)).collect())
        .collect();
    let mut eps_p = 0.0f64;
    for s in 0..n_s {
        for a in 0..n_a {
            for s2 in 0..n_s {
                let c2 = codes[s2];
                let p_h = trans_pred[codes[s]][a][c2] / preimage_size[c2] as f64;
                eps_p = eps_p.max((mdp.transition[s][a][s2] - p_h).abs());
            }
        }
    }

    // Abstracted greedy policy lifted to states, evaluated exactly.
    let tol = 1e-10;
    let rewards_pred: Vec<Vec<f64>> = (0..m)
        .map(|c| (0..n_a).map(|a| abstraction.reward_pred(c, a)).collect())
        .collect();
    let code_policy = code_value_iteration(&rewards_pred, &trans_pred, mdp.gamma, tol);
    let lifted = PolicyTable::deterministic(n_s, n_a, |s| code_policy[codes[s]]);
    let (v_star, _) = value_iteration(mdp, tol)?;
    let v_pi = policy_evaluation(mdp, &lifted, tol)?;
    let value_gap = v_star
        .iter()
        .zip(&v_pi)
        .map(|(a, b)| a - b)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);

    // Embedding-space quantities.
    let embeddings: Vec<Vec<f64>> = (0..n_s).map(|s| abstraction.embedding(s)).collect();
    let d = embeddings[0].len();
    let covering_radius = (0..n_s)
        .map(|s| {
            (0..m)
                .map(|c| euclid(&embeddings[s], &abstraction.code_vector(c)))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);

    // Sampled Lipschitz estimate over |r| and |Q*| differences.
    let q_star: Vec<Vec<f64>> = (0..n_s)
        .map(|s| (0..n_a).map(|a| q_value(mdp, &v_star, s, a)).collect())
        .collect();
    let mut kappa_hat = 0.0f64;
    let mut rng = stream(seed, "kappa-pairs", 0);
    let max_pairs = 4000;
    let all_pairs = n_s * (n_s - 1) / 2;
    let consider = |s1: usize, s2: usize, kappa: &mut f64| {
        let dist = euclid(&embeddings[s1], &embeddings[s2]);
        if dist <= 1e-12 {
            return;
        }
        for a in 0..n_a {
            let dr = (mdp.reward[s1][a] - mdp.reward[s2][a]).abs();
            let dq = (q_star[s1][a] - q_star[s2][a]).abs();
            *kappa = kappa.max(dr.max(dq) / dist);
        }
    };
    if all_pairs <= max_pairs {
        for s1 in 0..n_s {
            for s2 in s1 + 1..n_s {
                consider(s1, s2, &mut kappa_hat);
            }
        }
    } else {
        for _ in 0..max_pairs {
            let s1 = rng.gen_range(0..n_s);
            let s2 = rng.gen_range(0..n_s);
            if s1 != s2 {
                consider(s1, s2, &mut kappa_hat);
            }
        }
    }

    // Concentration factor via leave-one-out kernel density:
    // I = E[p(e)^(-2/(d+2))] under e ~ p.
    let (i_hat_raw, i_hat_stderr) = concentration_factor(&embeddings, d);
    let i_hat = i_hat_raw.clamp(1e-12, 1.0);

    let gamma = mdp.gamma;
    let m_f = m as f64;
    let quant_term = kappa_hat * i_hat.powf((d as f64 + 2.0) / (2.0 * d as f64))
        * m_f.powf(-1.0 / d as f64);
    let front = 2.0 / (1.0 - gamma).powi(2);
    let bound_value = front * (eps_r + quant_term + gamma * eps_p * m_f / (1.0 - gamma));

    // Minimal kappa for which the bound holds.
    let base = front * (eps_r + gamma * eps_p * m_f / (1.0 - gamma));
    let coeff = front * i_hat.powf((d as f64 + 2.0) / (2.0 * d as f64)) * m_f.powf(-1.0 / d as f64);
    let kappa_min = ((value_gap - base) / coeff).max(0.0);

    Ok(BoundReport {
        eps_r,
        eps_p,
        covering_radius,
        kappa_hat,
        i_hat,
        i_hat_raw,
        i_hat_stderr,
        d,
        codebook_size: m,
        value_gap,
        bound_value,
        holds_with_kappa_hat: value_gap <= bound_value,
        kappa_min,
        gamma,
    })
}

/// Leave-one-out Gaussian-KDE Monte Carlo estimate of
/// `int p(e)^(d/(d+2)) de = E[p(e)^(-2/(d+2))]`.
fn concentration_factor(points: &[Vec<f64>], d: usize) -> (f64, f64) {
    let n = points.len();
    if n < 2 {
        return (1.0, 0.0);
    }
    // Scott's bandwidth on the mean per-dimension spread.
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n as f64;
        }
    }
    let mut var = 0.0;
    for p in points {
        var += p.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>();
    }
    let sigma = (var / (n as f64 * d as f64)).sqrt().max(1e-6);
    let h = sigma * (n as f64).powf(-1.0 / (d as f64 + 4.0));
    let norm = 1.0 / ((n - 1) as f64 * (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0) * h.powi(d as i32));

    let exponent = -2.0 / (d as f64 + 2.0);
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let mut dens = 0.0;
        for (j, p) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let d2 = points[i]
                .iter()
                .zip(p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            dens += (-d2 / (2.0 * h * h)).exp();
        }
        let p_hat = (dens * norm).max(1e-300);
        terms.push(p_hat.powf(exponent));
    }
    let mean_t: f64 = terms.iter().sum::<f64>() / n as f64;
    let var_t: f64 =
        terms.iter().map(|t| (t - mean_t) * (t - mean_t)).sum::<f64>() / n as f64;
    (mean_t, (var_t / n as f64).sqrt())
}

// ---- covering-radius scaling ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoveringReport {
    pub d: usize,
    pub sizes: Vec<usize>,
    pub radii: Vec<f64>,
    pub slope: f64,
    pub degenerate: bool,
}

fn uniform_points(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen::<f64>()).collect()).collect()
}

/// Dense evaluation set: a grid (with corners) in low dimension, random
/// points otherwise.
fn dense_eval_points(d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let budget = 200_000usize;
    if d <= 3 {
        let side = (budget as f64).powf(1.0 / d as f64).floor() as usize;
        let mut pts = Vec::new();
        let mut idx = vec![0usize; d];
        loop {
            pts.push(idx.iter().map(|&i| i as f64 / (side - 1) as f64).collect());
            let mut k = 0;
            loop {
                idx[k] += 1;
                if idx[k] < side {
                    break;
                }
                idx[k] = 0;
                k += 1;
                if k == d {
                    return pts;
                }
            }
        }
    } else {
        uniform_points(budget, d, rng)
    }
}

fn max_min_distance(eval: &[Vec<f64>], codes: &[Vec<f64>]) -> f64 {
    eval.iter()
        .map(|p| {
            codes
                .iter()
                .map(|c| euclid(p, c))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Farthest-point traversal: nested codebooks with strictly decreasing
/// covering radius.
pub fn farthest_point_codes(points: &[Vec<f64>], size: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, "fp-init", 0);
    let mut codes: Vec<Vec<f64>> = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| euclid(p, &codes[0])).collect();
    while codes.len() < size {
        let far = dist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        codes.push(points[far].clone());
        for (di, p) in dist.iter_mut().zip(points) {
            *di = di.min(euclid(p, codes.last().unwrap()));
        }
    }
    codes
}

/// K-means-style fit: farthest-point init followed by Lloyd iterations.
pub fn fit_codebook(points: &[Vec<f64>], size: usize, seed: u64, lloyd_iters: usize) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let mut codes = farthest_point_codes(points, size, seed);
    for _ in 0..lloyd_iters {
        let mut sums = vec![vec![0.0; d]; size];
        let mut counts = vec![0usize; size];
        for p in points {
            let (mut best, mut best_d) = (0usize, f64::INFINITY);
            for (c, code) in codes.iter().enumerate() {
                let dd = euclid(p, code);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            counts[best] += 1;
            for (s, x) in sums[best].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..size {
            if counts[c] > 0 {
                for (code_x, s) in codes[c].iter_mut().zip(&sums[c]) {
                    *code_x = s / counts[c] as f64;
                }
            }
        }
    }
    codes
}

/// Measures covering radius versus codebook size for uniform data on the
/// unit cube and fits the log-log slope (expected ~ -1/d).
pub fn covering_radius_scaling(d: usize, sizes: &[usize], seed: u64) -> Result<CoveringReport> {
    if sizes.len() < 2 {
        return Err(Error::InvalidParameter("need at least two codebook sizes".into()));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("codebook sizes must increase".into()));
    }
    let mut rng = stream(seed, "covering", 0);
    let train = uniform_points(20_000, d, &mut rng);
    let eval = dense_eval_points(d, &mut rng);
    let mut radii = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let codes = fit_codebook(&train, size, seed, 40);
        radii.push(max_min_distance(&eval, &codes));
    }
    // Least squares on (ln size, ln radius).
    let xs: Vec<f64> = sizes.iter().map(|&s| (s as f64).ln()).collect();
    let ys: Vec<f64> = radii.iter().map(|&r| r.max(1e-300).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let degenerate = sxx <= 0.0 || radii.iter().any(|&r| r <= 0.0);
    let slope = if degenerate { 0.0 } else { sxy / sxx };
    Ok(CoveringReport { d, sizes: sizes.to_vec(), radii, slope, degenerate })
}

/// Covering radius of nested farthest-point prefixes (strictly
/// decreasing as the codebook grows).
pub fn nested_covering_radii(d: usize, sizes: &[usize], seed: u64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::InvalidParameter("sizes must be nonempty".into()));
    }
    let mut rng = stream(seed, "covering-nested", 0);
    let train = uniform_points(20_000, d, &mut rng);
    let eval = dense_eval_points(d, &mut rng);
    let all = farthest_point_codes(&train, *sizes.last().unwrap(), seed);
    Ok(sizes.iter().map(|&s| max_min_distance(&eval, &all[..s])).collect())
}

/// Refinement sweep: splits the worst code in half (median along the
/// highest-variance embedding coordinate) and scores each size with
/// midrange reward tables. eps_r is non-increasing because every new
/// cell's reward range is contained in its parent's.
pub fn refinement_epsilon_sweep(
    mdp: &TabularMdp,
    embeddings: &[Vec<f64>],
    sizes: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if embeddings.len() != mdp.n_states {
        return Err(Error::Shape("one embedding per state required".into()));
    }
    let mut partition: Vec<Vec<usize>> = vec![(0..mdp.n_states).collect()];
    let eps_of = |partition: &[Vec<usize>]| -> f64 {
        let mut worst = 0.0f64;
        for cell in partition {
            for a in 0..mdp.n_actions {
                let vals: Vec<f64> = cell.iter().map(|&s| mdp.reward[s][a]).collect();
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                worst = worst.max((hi - lo) / 2.0);
            }
        }
        worst
    };
    let mut out = Vec::new();
    let max_size = *sizes.iter().max().unwrap();
    let mut targets: Vec<usize> = sizes.to_vec();
    targets.sort_unstable();
    let mut next_target = 0;
    for size in 1..=max_size {
        if size > 1 {
            // Split the cell with the largest reward half-range.
            let (worst_cell, _) = partition
                .iter()
                .enumerate()
                .filter(|(_, cell)| cell.len() >= 2)
                .map(|(i, cell)| {
                    let mut score = 0.0f64;
                    for a in 0..mdp.n_actions {
                        let vals: Vec<f64> = cell.iter().map(|&s| mdp.reward[s][a]).collect();
                        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                        score = score.max(hi - lo);
                    }
                    (i, score)
                })
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .ok_or_else(|| {
                    Error::InvalidParameter("cannot refine: all cells are singletons".into())
                })?;
            let cell = partition.remove(worst_cell);
            let d = embeddings[0].len();
            // Highest-variance coordinate within the cell.
            let mut best_dim = 0;
            let mut best_var = -1.0;
            for dim in 0..d {
                let mean: f64 =
                    cell.iter().map(|&s| embeddings[s][dim]).sum::<f64>() / cell.len() as f64;
                let var: f64 = cell
                    .iter()
                    .map(|&s| (embeddings[s][dim] - mean).powi(2))
                    .sum::<f64>();
                if var > best_var {
                    best_var = var;
                    best_dim = dim;
                }
            }
            let mut sorted = cell.clone();
            sorted.sort_by(|&a, &b| {
                embeddings[a][best_dim]
                    .partial_cmp(&embeddings[b][best_dim])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let half = sorted.len() / 2;
            partition.push(sorted[..half].to_vec());
            partition.push(sorted[half..].to_vec());
        }
        if next_target < targets.len() && size == targets[next_target] {
            out.push((size, eps_of(&partition)));
            next_target += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::make_random_mdp;

    #[test]
    fn lossless_abstraction_zeroes_everything() {
        let mdp = make_random_mdp(3, 6, 3, 4, 0.6).unwrap();
        let abs = LosslessAbstraction::new(&mdp);
        let report = theorem_bound_check(&mdp, &abs, 0).unwrap();
        assert!(report.eps_r <= 1e-12, "eps_r {}", report.eps_r);
        assert!(report.eps_p <= 1e-12, "eps_p {}", report.eps_p);
        assert!(report.value_gap <= 1e-6, "gap {}", report.value_gap);
        assert!(report.covering_radius <= 1e-12);
        assert!(report.bound_value >= report.value_gap);
        assert!(report.holds_with_kappa_hat);
    }

    #[test]
    fn gamma_zero_bound_drops_transition_term() {
        let mut mdp = make_random_mdp(4, 5, 2, 3, 0.8).unwrap();
        mdp.gamma = 0.0;
        let abs = LosslessAbstraction::new(&mdp);
        let report = theorem_bound_check(&mdp, &abs, 0).unwrap();
        // 2 (eps_r + kappa I^((d+2)/2d) |C|^(-1/d)); here eps_r = 0 and
        // the covering radius is 0, but kappa_hat is generally > 0.
        let expect = 2.0
            * (report.eps_r
                + report.kappa_hat
                    * report.i_hat.powf((report.d as f64 + 2.0) / (2.0 * report.d as f64))
                    * (report.codebook_size as f64).powf(-1.0 / report.d as f64));
        assert!((report.bound_value - expect).abs() < 1e-9);
    }

    #[test]
    fn bound_report_is_deterministic() {
        let mdp = make_random_mdp(5, 8, 3, 4, 0.7).unwrap();
        let abs = LosslessAbstraction::new(&mdp);
        let a = theorem_bound_check(&mdp, &abs, 7).unwrap();
        let b = theorem_bound_check(&mdp, &abs, 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn enumeration_guard() {
        let mdp = make_random_mdp(6, 4, 2, 3, 1.0).unwrap();
        let mut big = mdp.clone();
        big.n_states = 2000;
        big.n_actions = 2000;
        let abs = LosslessAbstraction::new(&mdp);
        assert!(matches!(
            theorem_bound_check(&big, &abs, 0),
            Err(Error::Enumeration(_))
        ));
    }

    #[test]
    fn half_diagonal_single_code() {
        // One code at the centroid of the unit square: radius is the
        // half-diagonal.
        let mut rng = stream(0, "t", 0);
        let train = uniform_points(20_000, 2, &mut rng);
        let codes = fit_codebook(&train, 1, 0, 40);
        let eval = dense_eval_points(2, &mut rng);
        let r = max_min_distance(&eval, &codes);
        assert!((r - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.02, "radius {r}");
    }

    #[test]
    fn nested_radii_strictly_decrease() {
        let radii = nested_covering_radii(2, &[1, 2, 4, 8, 16], 3).unwrap();
        for w in radii.windows(2) {
            assert!(w[1] < w[0], "{radii:?}");
        }
    }

    #[test]
    fn covering_slope_near_minus_half_in_2d() {
        let report = covering_radius_scaling(2, &[4, 16, 64, 256], 1).unwrap();
        assert!(!report.degenerate);
        assert!(
            (report.slope - -0.5).abs() <= 0.15,
            "slope {} radii {:?}",
            report.slope,
            report.radii
        );
    }

    #[test]
    fn refinement_sweep_is_non_increasing() {
        let mdp = make_random_mdp(9, 24, 3, 4, 0.5).unwrap();
        let embeddings = mdp.state_features.clone();
        let sweep = refinement_epsilon_sweep(&mdp, &embeddings, &[1, 2, 4, 8, 16, 24]).unwrap();
        for w in sweep.windows(2) {
            assert!(w[1].1 <= w[0].1 + 1e-12, "{sweep:?}");
        }
        // Full refinement (one state per code) nails the rewards exactly.
        assert!(sweep.last().unwrap().1 <= 1e-12);
    }
}
