//! Contrastive state abstraction.
//!
//! States are encoded and quantized against a learned codebook. The
//! assignment similarity blends the state encoding with the temporal
//! advantage embedding; a Gumbel-softmax relaxation keeps the hard
//! assignment differentiable. Reward-prediction and contrastive
//! transition-prediction heads keep the codebook informative, and an
//! entropy regularizer counteracts codebook collapse.

use crate::error::{Error, Result};
use crate::nn::graph::{argmax, Graph, Var};
use crate::nn::layers::{relu_mlp, Linear, Mlp, MlpVars};
use crate::nn::{Scalar, Tensor};
use rand::Rng;

/// Learned code vectors plus the assignment hyperparameters.
#[derive(Debug, Clone)]
pub struct Codebook<S> {
    /// `[M, d]` code vectors.
    pub vectors: Tensor<S>,
    /// Blend between state term and TA term in the similarity, in [0, 1].
    pub alpha: f64,
    /// Gumbel-softmax temperature used when no schedule overrides it.
    pub temperature: f64,
}

impl<S: Scalar> Codebook<S> {
    pub fn new(m: usize, d: usize, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidParameter(format!("codebook size {m} < 2")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidParameter(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(Codebook { vectors: Tensor::randn(m, d, 0.5, rng), alpha, temperature: 1.0 })
    }

    pub fn size(&self) -> usize {
        self.vectors.rows()
    }
}

/// All CSA parameters. The TA embedder is shared with the return-token
/// path of the policy model.
#[derive(Debug, Clone)]
pub struct CsaParams<S> {
    pub state_encoder: Mlp<S>,
    pub ta_embedder: Linear<S>,
    pub codebook: Codebook<S>,
    pub rp_net: Mlp<S>,
    pub ctp_net: Mlp<S>,
    pub k_neg: usize,
}

impl<S: Scalar> CsaParams<S> {
    pub fn new(
        d_s: usize,
        d: usize,
        m: usize,
        alpha: f64,
        k_neg: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k_neg == 0 {
            return Err(Error::InvalidParameter("k_neg must be >= 1".into()));
        }
        Ok(CsaParams {
            state_encoder: Mlp::new(&[d_s, d, d], rng),
            ta_embedder: Linear::new(1, d, rng),
            codebook: Codebook::new(m, d, alpha, rng)?,
            rp_net: Mlp::new(&[2 * d, d, 1], rng),
            ctp_net: Mlp::new(&[3 * d, d, 1], rng),
            k_neg,
        })
    }
}

/// Eq.-level similarity: `z_i = alpha * c_i . e + (1 - alpha) * c_i . ta`,
/// softmaxed over the codebook.
pub fn tac_svq_similarity<S: Scalar>(
    g: &mut Graph<S>,
    e: Var,
    codebook: Var,
    ta_emb: Var,
    alpha: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} outside [0, 1]")));
    }
    let state_term = g.matmul_nt(e, codebook)?;
    let ta_term = g.matmul_nt(ta_emb, codebook)?;
    let a = g.scale(state_term, alpha);
    let b = g.scale(ta_term, 1.0 - alpha);
    let z = g.add(a, b)?;
    Ok(g.row_softmax(z))
}

/// Quantization result for one state.
pub struct Quantized {
    pub code_id: usize,
    /// `[1, d]` quantized embedding `C z`.
    pub code_vec: Var,
    /// `[1, M]` similarity distribution (before Gumbel noise).
    pub assign_probs: Var,
    /// `[1, M]` soft assignment after the Gumbel-softmax.
    pub soft_assign: Var,
    /// `[1, M]` assignment actually multiplied with the codebook: exact
    /// one-hot when hardened (straight-through), else `soft_assign`.
    pub assignment: Var,
}

/// Gumbel-softmax assignment over precomputed similarity probs.
///
/// `noise` must be a `[1, M]` standard-Gumbel draw (or `None` for the
/// deterministic argmax used at evaluation time).
pub fn gumbel_assign<S: Scalar>(
    g: &mut Graph<S>,
    probs: Var,
    codebook: Var,
    temperature: f64,
    noise: Option<&Tensor<S>>,
    hard: bool,
) -> Result<Quantized> {
    if temperature <= 0.0 {
        return Err(Error::InvalidParameter(format!("temperature {temperature} must be > 0")));
    }
    let lp = g.ln_clamped(probs);
    let noisy = match noise {
        Some(n) => {
            if n.shape != g.value(lp).shape {
                return Err(Error::Shape(format!(
                    "gumbel noise {:?} vs probs {:?}",
                    n.shape,
                    g.value(lp).shape
                )));
            }
            let nv = g.input(n.clone());
            g.add(lp, nv)?
        }
        None => lp,
    };
    let scaled = g.scale(noisy, 1.0 / temperature);
    let soft = g.row_softmax(scaled);
    let code_id = argmax(g.value(soft).row_slice(0));
    let assignment = if hard { g.straight_through_onehot(soft)? } else { soft };
    let code_vec = g.matmul(assignment, codebook)?;
    Ok(Quantized { code_id, code_vec, assign_probs: probs, soft_assign: soft, assignment })
}

/// Which distribution the entropy regularizer is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    /// Mean over samples of `sum_i p_i ln p_i` (per-sample negative
    /// entropy; minimizing it spreads each assignment).
    PerSample,
    /// Negative entropy of the batch-averaged assignment distribution.
    BatchMean,
}

/// Entropy regularizer over a batch of `[1, M]` assignment rows.
/// Always in `[-ln M, 0]`.
pub fn entropy_reg_loss<S: Scalar>(g: &mut Graph<S>, probs: &[Var], mode: RegMode) -> Result<Var> {
    if probs.is_empty() {
        return Err(Error::InvalidParameter("entropy_reg_loss needs at least one row".into()));
    }
    match mode {
        RegMode::PerSample => {
            let terms: Vec<Var> = probs
                .iter()
                .map(|&p| {
                    let lp = g.ln_clamped(p);
                    let plogp = g.mul(p, lp)?;
                    Ok(g.sum_all(plogp))
                })
                .collect::<Result<_>>()?;
            g.mean_list(&terms)
        }
        RegMode::BatchMean => {
            let stacked = g.stack_rows(probs)?;
            let pbar = g.mean_over_rows(stacked);
            let lp = g.ln_clamped(pbar);
            let plogp = g.mul(pbar, lp)?;
            Ok(g.sum_all(plogp))
        }
    }
}

/// Reward prediction head: `MLP([code_vec, action_emb]) -> scalar`.
pub fn rp_forward<S: Scalar>(
    g: &mut Graph<S>,
    rp_net: &MlpVars,
    code_vec: Var,
    action_emb: Var,
) -> Result<Var> {
    let input = g.concat_cols(&[code_vec, action_emb])?;
    relu_mlp(g, input, rp_net)
}

/// Loss reduction over an index set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

pub fn reduce<S: Scalar>(g: &mut Graph<S>, terms: &[Var], reduction: Reduction) -> Result<Var> {
    match reduction {
        Reduction::Mean => g.mean_list(terms),
        Reduction::Sum => g.add_list(terms),
    }
}

/// Squared-error reward loss over `(prediction, target)` pairs.
pub fn rp_loss<S: Scalar>(
    g: &mut Graph<S>,
    preds: &[Var],
    targets: &[f64],
    reduction: Reduction,
) -> Result<Var> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "rp_loss: {} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let terms: Vec<Var> = preds
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let d = g.offset(p, -t);
            g.mul(d, d)
        })
        .collect::<Result<_>>()?;
    reduce(g, &terms, reduction)
}

/// Transition-prediction logit: `MLP([code_t, action_emb, code_next])`.
pub fn ctp_logit<S: Scalar>(
    g: &mut Graph<S>,
    ctp_net: &MlpVars,
    code_t: Var,
    action_emb: Var,
    code_next: Var,
) -> Result<Var> {
    let input = g.concat_cols(&[code_t, action_emb, code_next])?;
    relu_mlp(g, input, ctp_net)
}

/// Denominator convention for the contrastive transition loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtpDenominator {
    /// Standard InfoNCE: positive included in the denominator (default;
    /// keeps the loss nonnegative).
    WithPositive,
    /// Literal reading: only the sampled negatives in the denominator.
    NegativesOnly,
}

/// Draws `k_neg` negative code ids, excluding both `c_t` and `c_next`.
/// Without replacement when `m - 2 >= k_neg`, else with replacement.
pub fn sample_negatives(
    m: usize,
    c_t: usize,
    c_next: usize,
    k_neg: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut allowed: Vec<usize> = (0..m).filter(|&c| c != c_t && c != c_next).collect();
    if allowed.is_empty() {
        return Err(Error::Sampling(format!(
            "no admissible negatives: M = {m}, excluded codes {c_t} and {c_next}"
        )));
    }
    if m.saturating_sub(2) >= k_neg {
        for i in 0..k_neg.min(allowed.len()) {
            let j = rng.gen_range(i..allowed.len());
            allowed.swap(i, j);
        }
        Ok(allowed[..k_neg].to_vec())
    } else {
        Ok((0..k_neg).map(|_| allowed[rng.gen_range(0..allowed.len())]).collect())
    }
}

/// Contrastive loss for one positive against its sampled negatives:
/// `-ln( exp(z+) / denom )` via a stable log-sum-exp.
pub fn ctp_pair_loss<S: Scalar>(
    g: &mut Graph<S>,
    pos_logit: Var,
    neg_logits: &[Var],
    denominator: CtpDenominator,
) -> Result<Var> {
    let row = match denominator {
        CtpDenominator::WithPositive => {
            let mut all = Vec::with_capacity(neg_logits.len() + 1);
            all.push(pos_logit);
            all.extend_from_slice(neg_logits);
            g.concat_cols(&all)?
        }
        CtpDenominator::NegativesOnly => g.concat_cols(neg_logits)?,
    };
    let lse = g.logsumexp_rows(row);
    g.sub(lse, pos_logit)
}

/// Weighted combination `sum_k w_k * term_k` with per-component values
/// reported by the caller.
pub fn weighted_sum<S: Scalar>(g: &mut Graph<S>, terms: &[(Var, f64)]) -> Result<Var> {
    let scaled: Vec<Var> = terms.iter().map(|&(v, w)| g.scale(v, w)).collect();
    g.add_list(&scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gumbel_sample;
    use crate::rng::stream;

    fn graph() -> Graph<f64> {
        Graph::new()
    }

    fn rowvar(g: &mut Graph<f64>, data: &[f64]) -> Var {
        g.input(Tensor::from_f64(1, data.len(), data).unwrap())
    }

    #[test]
    fn tac_svq_alpha_one_ignores_ta() {
        let mut g = graph();
        let e = rowvar(&mut g, &[1.0, 0.5]);
        let cb = g.input(Tensor::from_f64(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 2.0]).unwrap());
        let ta_a = rowvar(&mut g, &[5.0, -7.0]);
        let ta_b = rowvar(&mut g, &[0.0, 0.0]);
        let p1 = tac_svq_similarity(&mut g, e, cb, ta_a, 1.0).unwrap();
        let p2 = tac_svq_similarity(&mut g, e, cb, ta_b, 1.0).unwrap();
        assert_eq!(g.value(p1).data, g.value(p2).data);
    }

    #[test]
    fn tac_svq_zero_inputs_give_uniform() {
        let mut g = graph();
        let e = rowvar(&mut g, &[0.0, 0.0]);
        let ta = rowvar(&mut g, &[0.0, 0.0]);
        let cb = g.input(Tensor::from_f64(4, 2, &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let p = tac_svq_similarity(&mut g, e, cb, ta, 0.7).unwrap();
        for &v in &g.value(p).data {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn tac_svq_hand_softmax() {
        // c1 = (1,0), c2 = (0,1), e = (1,0), ta = 0, alpha = 1:
        // logits (1, 0) -> softmax = (e/(1+e), 1/(1+e)).
        let mut g = graph();
        let e = rowvar(&mut g, &[1.0, 0.0]);
        let ta = rowvar(&mut g, &[0.0, 0.0]);
        let cb = g.input(Tensor::from_f64(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let p = tac_svq_similarity(&mut g, e, cb, ta, 1.0).unwrap();
        let want0 = 1.0f64.exp() / (1.0 + 1.0f64.exp());
        assert!((g.value(p).data[0] - want0).abs() < 1e-4);
        assert!((g.value(p).data[0] - 0.7311).abs() < 1e-4);
        assert!((g.value(p).data[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn gumbel_assign_hard_is_exact_onehot() {
        let mut g = graph();
        let probs = rowvar(&mut g, &[0.2, 0.5, 0.3]);
        let cb = g.input(Tensor::from_f64(3, 2, &[1., 0., 0., 1., 1., 1.]).unwrap());
        let noise: Tensor<f64> = gumbel_sample(1, 3, 3, 0);
        let q = gumbel_assign(&mut g, probs, cb, 1.0, Some(&noise), true).unwrap();
        let hard = g.value(q.assignment);
        let ones: Vec<&f64> = hard.data.iter().filter(|&&v| v == 1.0).collect();
        assert_eq!(ones.len(), 1);
        assert_eq!(hard.data.iter().filter(|&&v| v == 0.0).count(), 2);
        assert_eq!(hard.data[q.code_id], 1.0);
        // code_vec equals the selected codebook row exactly.
        let cb_row = [[1., 0.], [0., 1.], [1., 1.]][q.code_id];
        assert_eq!(g.value(q.code_vec).data, cb_row.to_vec());
    }

    #[test]
    fn gumbel_assign_low_temperature_matches_argmax() {
        // As tau -> 0 the hardened sample is argmax(ln p + gumbel).
        let probs_raw = [0.1, 0.6, 0.3];
        for idx in 0..20 {
            let noise: Tensor<f64> = gumbel_sample(1, 3, 55, idx);
            let keys: Vec<f64> = probs_raw
                .iter()
                .zip(&noise.data)
                .map(|(&p, &n): (&f64, &f64)| p.ln() + n)
                .collect();
            let want = argmax(&keys);
            let mut g = graph();
            let probs = rowvar(&mut g, &probs_raw);
            let cb = g.input(Tensor::zeros(3, 2));
            let q = gumbel_assign(&mut g, probs, cb, 1e-4, Some(&noise), true).unwrap();
            assert_eq!(q.code_id, want);
        }
    }

    #[test]
    fn gumbel_assign_frequencies_match_probs() {
        // Gumbel-max property: hardened frequencies follow the similarity
        // distribution at any temperature. 3-sigma bands over 10k draws.
        let probs_raw = [0.5, 0.3, 0.2];
        let n = 10_000;
        let mut counts = [0usize; 3];
        for i in 0..n {
            let noise: Tensor<f64> = gumbel_sample(1, 3, 99, i as u64);
            let mut g = graph();
            let probs = rowvar(&mut g, &probs_raw);
            let cb = g.input(Tensor::zeros(3, 2));
            let q = gumbel_assign(&mut g, probs, cb, 1.0, Some(&noise), true).unwrap();
            counts[q.code_id] += 1;
        }
        for (i, &p) in probs_raw.iter().enumerate() {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let diff = (counts[i] as f64 - n as f64 * p).abs();
            assert!(diff <= 3.0 * sigma, "code {i}: {} vs {}", counts[i], n as f64 * p);
        }
    }

    #[test]
    fn gumbel_assign_rejects_bad_temperature() {
        let mut g = graph();
        let probs = rowvar(&mut g, &[0.5, 0.5]);
        let cb = g.input(Tensor::zeros(2, 2));
        assert!(gumbel_assign(&mut g, probs, cb, 0.0, None, true).is_err());
    }

    #[test]
    fn entropy_uniform_is_neg_log_m() {
        let mut g = graph();
        let p = rowvar(&mut g, &vec![1.0 / 64.0; 64]);
        let l = entropy_reg_loss(&mut g, &[p], RegMode::PerSample).unwrap();
        assert!((g.value(l).scalar_value() - -(64.0f64.ln())).abs() < 1e-9);
        assert!((g.value(l).scalar_value() - -4.158883).abs() < 1e-5);
    }

    #[test]
    fn entropy_onehot_is_zero() {
        let mut g = graph();
        let p = rowvar(&mut g, &[0.0, 1.0, 0.0]);
        let l = entropy_reg_loss(&mut g, &[p], RegMode::PerSample).unwrap();
        assert_eq!(g.value(l).scalar_value(), 0.0);
    }

    #[test]
    fn entropy_hand_row() {
        let p0 = 1.0f64 / (1.0 + (-1.0f64).exp()); // 0.7311
        let row = [p0, 1.0 - p0];
        let want: f64 = row.iter().map(|&p| p * p.ln()).sum();
        let mut g = graph();
        let p = rowvar(&mut g, &row);
        let l = entropy_reg_loss(&mut g, &[p], RegMode::PerSample).unwrap();
        assert!((g.value(l).scalar_value() - want).abs() < 1e-12);
        assert!((want - -0.5822).abs() < 1e-4);
    }

    #[test]
    fn entropy_range_invariant() {
        let mut rng = stream(7, "ent", 0);
        for _ in 0..50 {
            let m = rng.gen_range(2..12);
            let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let mut g = graph();
            let p = rowvar(&mut g, &row);
            for mode in [RegMode::PerSample, RegMode::BatchMean] {
                let l = entropy_reg_loss(&mut g, &[p], mode).unwrap();
                let v = g.value(l).scalar_value();
                assert!(v <= 1e-12 && v >= -(m as f64).ln() - 1e-12);
            }
        }
    }

    #[test]
    fn rp_loss_examples() {
        let mut g = graph();
        // Perfect predictions.
        let preds: Vec<Var> = [0.3, 0.9].iter().map(|&v| g.scalar_input(v)).collect();
        let l = rp_loss(&mut g, &preds, &[0.3, 0.9], Reduction::Mean).unwrap();
        assert!(g.value(l).scalar_value().abs() < 1e-15);
        // Constant offset 1 on every sample -> 1.0 under the mean.
        let preds: Vec<Var> = [1.3, 1.9, 0.0].iter().map(|&v| g.scalar_input(v)).collect();
        let l = rp_loss(&mut g, &preds, &[0.3, 0.9, -1.0], Reduction::Mean).unwrap();
        assert!((g.value(l).scalar_value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rp_loss_matches_hand_mse() {
        let mut rng = stream(8, "rp", 0);
        let preds_raw: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let targets: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let want: f64 = preds_raw
            .iter()
            .zip(&targets)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / 6.0;
        let mut g = graph();
        let preds: Vec<Var> = preds_raw.iter().map(|&v| g.scalar_input(v)).collect();
        let l = rp_loss(&mut g, &preds, &targets, Reduction::Mean).unwrap();
        assert!((g.value(l).scalar_value() - want).abs() < 1e-6);
    }

    #[test]
    fn ctp_uniform_logits_give_log_k_plus_one() {
        let mut g = graph();
        let pos = g.scalar_input(0.37);
        let negs: Vec<Var> = (0..3).map(|_| g.scalar_input(0.37)).collect();
        let l = ctp_pair_loss(&mut g, pos, &negs, CtpDenominator::WithPositive).unwrap();
        assert!((g.value(l).scalar_value() - 4.0f64.ln()).abs() < 1e-12);
        assert!((g.value(l).scalar_value() - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn ctp_dominant_positive_drives_loss_to_zero() {
        let mut g = graph();
        let pos = g.scalar_input(40.0);
        let negs: Vec<Var> = (0..4).map(|_| g.scalar_input(0.0)).collect();
        let l = ctp_pair_loss(&mut g, pos, &negs, CtpDenominator::WithPositive).unwrap();
        assert!(g.value(l).scalar_value() < 1e-12);
    }

    #[test]
    fn ctp_matches_enumeration_oracle() {
        let mut rng = stream(9, "ctp", 0);
        for _ in 0..20 {
            let k = rng.gen_range(1..6);
            let pos_raw: f64 = rng.gen_range(-2.0..2.0);
            let negs_raw: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for denom in [CtpDenominator::WithPositive, CtpDenominator::NegativesOnly] {
                let mut all = if matches!(denom, CtpDenominator::WithPositive) {
                    vec![pos_raw]
                } else {
                    vec![]
                };
                all.extend(&negs_raw);
                let want = all.iter().map(|z| z.exp()).sum::<f64>().ln() - pos_raw;
                let mut g = graph();
                let pos = g.scalar_input(pos_raw);
                let negs: Vec<Var> = negs_raw.iter().map(|&v| g.scalar_input(v)).collect();
                let l = ctp_pair_loss(&mut g, pos, &negs, denom).unwrap();
                assert!((g.value(l).scalar_value() - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn negative_sampling_respects_exclusions() {
        let mut rng = stream(10, "neg", 0);
        for _ in 0..200 {
            let negs = sample_negatives(6, 2, 4, 4, &mut rng).unwrap();
            assert_eq!(negs.len(), 4);
            assert!(negs.iter().all(|&c| c != 2 && c != 4));
            // m - 2 = 4 >= k_neg, so no repeats.
            let mut sorted = negs.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 4);
        }
    }

    #[test]
    fn negative_sampling_m2_unsatisfiable() {
        let mut rng = stream(11, "neg", 0);
        assert!(matches!(
            sample_negatives(2, 0, 1, 1, &mut rng),
            Err(Error::Sampling(_))
        ));
        // Same code twice leaves one admissible id.
        let negs = sample_negatives(2, 1, 1, 2, &mut rng).unwrap();
        assert_eq!(negs, vec![0, 0]);
    }

    #[test]
    fn weighted_sum_composition() {
        let mut g = graph();
        let a = g.scalar_input(0.5);
        let b = g.scalar_input(2.0);
        let c = g.scalar_input(-1.0);
        // All weights zero -> 0.
        let z = weighted_sum(&mut g, &[(a, 0.0), (b, 0.0), (c, 0.0)]).unwrap();
        assert_eq!(g.value(z).scalar_value(), 0.0);
        // Single weight projects one component.
        let z = weighted_sum(&mut g, &[(a, 1.0), (b, 0.0), (c, 0.0)]).unwrap();
        assert_eq!(g.value(z).scalar_value(), 0.5);
        // Random recomposition.
        let z = weighted_sum(&mut g, &[(a, 0.3), (b, 0.7), (c, 1.1)]).unwrap();
        assert!((g.value(z).scalar_value() - (0.3 * 0.5 + 0.7 * 2.0 - 1.1)).abs() < 1e-12);
    }

    #[test]
    fn csa_loss_gradients_pass_gradcheck() {
        // L_r + L_c + L_reg through encoder, codebook (soft path), and
        // both heads, against central finite differences.
        use crate::nn::gradcheck::gradcheck;
        let mut rng = stream(12, "csa-grad", 0);
        let csa: CsaParams<f64> = CsaParams::new(3, 4, 4, 0.7, 2, &mut rng).unwrap();
        let state = Tensor::randn(1, 3, 1.0, &mut rng);
        let state2 = Tensor::randn(1, 3, 1.0, &mut rng);
        let action_emb = Tensor::randn(1, 4, 1.0, &mut rng);
        let noise1: Tensor<f64> = gumbel_sample(1, 4, 5, 0);
        let noise2: Tensor<f64> = gumbel_sample(1, 4, 5, 1);

        let mut params: Vec<Tensor<f64>> = Vec::new();
        for l in csa.state_encoder.layers.iter().chain(csa.rp_net.layers.iter()).chain(csa.ctp_net.layers.iter()) {
            params.push(l.w.clone());
            params.push(l.b.clone());
        }
        params.push(csa.ta_embedder.w.clone());
        params.push(csa.ta_embedder.b.clone());
        params.push(csa.codebook.vectors.clone());

        let build = |p: &[Tensor<f64>], want: bool| {
            let mut g: Graph<f64> = Graph::new();
            let vars: Vec<Var> = p.iter().map(|t| g.input(t.clone())).collect();
            let mut i = 0;
            let mut lin = || {
                let l = crate::nn::layers::LinearVars { w: vars[i], b: vars[i + 1] };
                i += 2;
                l
            };
            let enc = MlpVars { layers: vec![lin(), lin()] };
            let rp = MlpVars { layers: vec![lin(), lin()] };
            let ctp = MlpVars { layers: vec![lin(), lin()] };
            let ta = lin();
            let cb = vars[i];

            let sv = g.input(state.clone());
            let sv2 = g.input(state2.clone());
            let av = g.input(action_emb.clone());
            let e1 = relu_mlp(&mut g, sv, &enc).unwrap();
            let e2 = relu_mlp(&mut g, sv2, &enc).unwrap();
            let ta_in = g.input(Tensor::from_f64(1, 1, &[0.4]).unwrap());
            let ta_emb = crate::nn::layers::dense(&mut g, ta_in, &ta).unwrap();
            let p1 = tac_svq_similarity(&mut g, e1, cb, ta_emb, 0.7).unwrap();
            let p2 = tac_svq_similarity(&mut g, e2, cb, ta_emb, 0.7).unwrap();
            // Soft path: finite differences require a smooth function.
            let q1 = gumbel_assign(&mut g, p1, cb, 1.0, Some(&noise1), false).unwrap();
            let q2 = gumbel_assign(&mut g, p2, cb, 1.0, Some(&noise2), false).unwrap();

            let rhat = rp_forward(&mut g, &rp, q1.code_vec, av).unwrap();
            let l_r = rp_loss(&mut g, &[rhat], &[0.8], Reduction::Mean).unwrap();

            let pos = ctp_logit(&mut g, &ctp, q1.code_vec, av, q2.code_vec).unwrap();
            let negs: Vec<Var> = [0usize, 3]
                .iter()
                .map(|&id| {
                    let row = g.gather_rows(cb, &[id]).unwrap();
                    ctp_logit(&mut g, &ctp, q1.code_vec, av, row).unwrap()
                })
                .collect();
            let l_c = ctp_pair_loss(&mut g, pos, &negs, CtpDenominator::WithPositive).unwrap();

            let l_reg =
                entropy_reg_loss(&mut g, &[q1.assign_probs, q2.assign_probs], RegMode::PerSample)
                    .unwrap();

            let root =
                weighted_sum(&mut g, &[(l_r, 1.0), (l_c, 1.0), (l_reg, 0.1)]).unwrap();
            let loss = g.value(root).scalar_value();
            if !want {
                return Ok((loss, None));
            }
            g.backward(root).unwrap();
            let grads = vars
                .iter()
                .zip(p)
                .map(|(v, t)| {
                    g.grad(*v).map(|gt| gt.data.clone()).unwrap_or_else(|| vec![0.0; t.len()])
                })
                .collect();
            Ok((loss, Some(grads)))
        };
        let report = gradcheck(&params, build, 1e-5).unwrap();
        assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
    }
}
