//! Policy model: return/code/action token assembly, causal transformer,
//! action and return heads, and the combined training objective.
//!
//! Each timestep contributes three tokens in the order (return, code,
//! action). A learned start token precedes the sequence so the return
//! head has context for the first step. The action head reads the hidden
//! state at the code token and scores all items against the shared item
//! embedding table; the return head reads the hidden state at the
//! previous action token.

use crate::csa::{
    ctp_logit, ctp_pair_loss, entropy_reg_loss, gumbel_assign, rp_forward, rp_loss,
    tac_svq_similarity, weighted_sum, CsaParams, CtpDenominator, Quantized, Reduction, RegMode,
};
use crate::error::{Error, Result};
use crate::nn::graph::{argmax, Graph, Var};
use crate::nn::layers::{
    dense, relu_mlp, Linear, LinearVars, Mlp, MlpVars, Transformer, TransformerVars,
};
use crate::nn::{gumbel_sample, Scalar, Tensor};
use crate::rank::{build_groups, pairwise_rank_loss, GroupInput, GroupTable};
use crate::rng::{mix3, stream};
use crate::trajectory::ReturnStats;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Architecture and loss hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_s: usize,
    /// Candidate item count.
    pub m: usize,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub t_max: usize,
    pub codebook_size: usize,
    pub alpha: f64,
    pub k_neg: usize,
    pub beta: f64,
    pub delta: f64,
    pub bin_width: f64,
    /// Weights for (rank, return, reward, contrastive, entropy) losses.
    pub lambda: [f64; 5],
    pub ctp_denominator: CtpDenominator,
    pub reg_mode: RegMode,
    pub reduction: Reduction,
    /// Max pairs per group in the rank loss; 0 disables the cap.
    pub rank_pair_cap: usize,
    // Ablation switches.
    pub no_tac: bool,
    pub no_ctp: bool,
    pub no_rp: bool,
    pub no_csa: bool,
    pub no_ta: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 || self.d_s == 0 || self.t_max == 0 || self.n_layers == 0 {
            return Err(Error::InvalidParameter("model dims must be positive".into()));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "hidden dim {} not divisible by heads {}",
                self.d, self.n_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidParameter(format!("beta {} outside (0, 1)", self.beta)));
        }
        if self.delta < 0.0 || self.bin_width <= 0.0 {
            return Err(Error::InvalidParameter("delta >= 0 and bin_width > 0 required".into()));
        }
        if self.lambda.iter().any(|l| *l < 0.0) {
            return Err(Error::InvalidParameter("loss weights must be >= 0".into()));
        }
        if self.no_csa && self.lambda[0] != 0.0 {
            return Err(Error::InvalidParameter(
                "no_csa requires the rank loss to be disabled (lambda1 = 0): grouping uses codebook ids".into(),
            ));
        }
        if self.no_csa && (self.lambda[2] != 0.0 || self.lambda[3] != 0.0 || self.lambda[4] != 0.0)
        {
            return Err(Error::InvalidParameter(
                "no_csa disables the whole abstraction module (lambda3..5 must be 0)".into(),
            ));
        }
        if self.codebook_size < 2 {
            return Err(Error::InvalidParameter("codebook_size must be >= 2".into()));
        }
        Ok(())
    }

    /// Effective similarity blend: the TA-conditioning ablation pins
    /// alpha to 1.
    pub fn alpha_eff(&self) -> f64 {
        if self.no_tac {
            1.0
        } else {
            self.alpha
        }
    }
}

/// All learnable parameters.
#[derive(Debug, Clone)]
pub struct TadtModel<S> {
    pub cfg: ModelConfig,
    pub item_emb: Tensor<S>,
    pub rtg_embed: Linear<S>,
    pub return_enc: Mlp<S>,
    pub action_enc: Mlp<S>,
    pub pos_embed: Tensor<S>,
    pub bos: Tensor<S>,
    pub transformer: Transformer<S>,
    pub return_head: Mlp<S>,
    pub csa: CsaParams<S>,
}

impl<S: Scalar> TadtModel<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, "model-init", 0);
        let d = cfg.d;
        Ok(TadtModel {
            item_emb: Tensor::randn(cfg.m, d, 0.02, &mut rng),
            rtg_embed: Linear::new(1, d, &mut rng),
            return_enc: Mlp::new(&[2 * d, d, d], &mut rng),
            action_enc: Mlp::new(&[d, d, d], &mut rng),
            pos_embed: Tensor::randn(cfg.t_max, d, 0.02, &mut rng),
            bos: Tensor::randn(1, d, 0.02, &mut rng),
            transformer: Transformer::new(d, cfg.n_layers, &mut rng),
            return_head: Mlp::new(&[d, d, 2], &mut rng),
            csa: CsaParams::new(cfg.d_s, d, cfg.codebook_size, cfg.alpha, cfg.k_neg, &mut rng)?,
            cfg,
        })
    }

    /// Named mutable views of every parameter, in canonical order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        out.push(("item_emb".into(), &mut self.item_emb));
        out.push(("rtg_embed.w".into(), &mut self.rtg_embed.w));
        out.push(("rtg_embed.b".into(), &mut self.rtg_embed.b));
        for (i, l) in self.return_enc.layers.iter_mut().enumerate() {
            out.push((format!("return_enc.{i}.w"), &mut l.w));
            out.push((format!("return_enc.{i}.b"), &mut l.b));
        }
        for (i, l) in self.action_enc.layers.iter_mut().enumerate() {
            out.push((format!("action_enc.{i}.w"), &mut l.w));
            out.push((format!("action_enc.{i}.b"), &mut l.b));
        }
        out.push(("pos_embed".into(), &mut self.pos_embed));
        out.push(("bos".into(), &mut self.bos));
        for (bi, b) in self.transformer.blocks.iter_mut().enumerate() {
            out.push((format!("tf.{bi}.ln1.gain"), &mut b.ln1.gain));
            out.push((format!("tf.{bi}.ln1.bias"), &mut b.ln1.bias));
            out.push((format!("tf.{bi}.wq.w"), &mut b.wq.w));
            out.push((format!("tf.{bi}.wq.b"), &mut b.wq.b));
            out.push((format!("tf.{bi}.wk.w"), &mut b.wk.w));
            out.push((format!("tf.{bi}.wk.b"), &mut b.wk.b));
            out.push((format!("tf.{bi}.wv.w"), &mut b.wv.w));
            out.push((format!("tf.{bi}.wv.b"), &mut b.wv.b));
            out.push((format!("tf.{bi}.wo.w"), &mut b.wo.w));
            out.push((format!("tf.{bi}.wo.b"), &mut b.wo.b));
            out.push((format!("tf.{bi}.ln2.gain"), &mut b.ln2.gain));
            out.push((format!("tf.{bi}.ln2.bias"), &mut b.ln2.bias));
            out.push((format!("tf.{bi}.fc1.w"), &mut b.fc1.w));
            out.push((format!("tf.{bi}.fc1.b"), &mut b.fc1.b));
            out.push((format!("tf.{bi}.fc2.w"), &mut b.fc2.w));
            out.push((format!("tf.{bi}.fc2.b"), &mut b.fc2.b));
        }
        out.push(("tf.ln_f.gain".into(), &mut self.transformer.ln_f.gain));
        out.push(("tf.ln_f.bias".into(), &mut self.transformer.ln_f.bias));
        for (i, l) in self.return_head.layers.iter_mut().enumerate() {
            out.push((format!("return_head.{i}.w"), &mut l.w));
            out.push((format!("return_head.{i}.b"), &mut l.b));
        }
        for (i, l) in self.csa.state_encoder.layers.iter_mut().enumerate() {
            out.push((format!("csa.enc.{i}.w"), &mut l.w));
            out.push((format!("csa.enc.{i}.b"), &mut l.b));
        }
        out.push(("csa.ta_embed.w".into(), &mut self.csa.ta_embedder.w));
        out.push(("csa.ta_embed.b".into(), &mut self.csa.ta_embedder.b));
        out.push(("csa.codebook".into(), &mut self.csa.codebook.vectors));
        for (i, l) in self.csa.rp_net.layers.iter_mut().enumerate() {
            out.push((format!("csa.rp.{i}.w"), &mut l.w));
            out.push((format!("csa.rp.{i}.b"), &mut l.b));
        }
        for (i, l) in self.csa.ctp_net.layers.iter_mut().enumerate() {
            out.push((format!("csa.ctp.{i}.w"), &mut l.w));
            out.push((format!("csa.ctp.{i}.b"), &mut l.b));
        }
        out
    }

    /// Registers every parameter as a graph input, mirroring the order
    /// and names of `params_mut`.
    pub fn bind(&self, g: &mut Graph<S>) -> (ModelVars, Vec<(String, Var)>) {
        let mut reg: Vec<(String, Var)> = Vec::new();
        let input = |g: &mut Graph<S>, reg: &mut Vec<(String, Var)>, name: String, t: &Tensor<S>| {
            let v = g.input(t.clone());
            reg.push((name, v));
            v
        };
        let lin = |g: &mut Graph<S>, reg: &mut Vec<(String, Var)>, name: &str, l: &Linear<S>| {
            LinearVars {
                w: {
                    let v = g.input(l.w.clone());
                    reg.push((format!("{name}.w"), v));
                    v
                },
                b: {
                    let v = g.input(l.b.clone());
                    reg.push((format!("{name}.b"), v));
                    v
                },
            }
        };
        let mlp = |g: &mut Graph<S>, reg: &mut Vec<(String, Var)>, name: &str, m: &Mlp<S>| MlpVars {
            layers: m
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| lin(g, reg, &format!("{name}.{i}"), l))
                .collect(),
        };

        let item_emb = input(g, &mut reg, "item_emb".into(), &self.item_emb);
        let rtg_embed = lin(g, &mut reg, "rtg_embed", &self.rtg_embed);
        let return_enc = mlp(g, &mut reg, "return_enc", &self.return_enc);
        let action_enc = mlp(g, &mut reg, "action_enc", &self.action_enc);
        let pos_embed = input(g, &mut reg, "pos_embed".into(), &self.pos_embed);
        let bos = input(g, &mut reg, "bos".into(), &self.bos);
        let blocks = self
            .transformer
            .blocks
            .iter()
            .enumerate()
            .map(|(bi, b)| crate::nn::layers::BlockVars {
                ln1: crate::nn::layers::LayerNormVars {
                    gain: input(g, &mut reg, format!("tf.{bi}.ln1.gain"), &b.ln1.gain),
                    bias: input(g, &mut reg, format!("tf.{bi}.ln1.bias"), &b.ln1.bias),
                },
                wq: lin(g, &mut reg, &format!("tf.{bi}.wq"), &b.wq),
                wk: lin(g, &mut reg, &format!("tf.{bi}.wk"), &b.wk),
                wv: lin(g, &mut reg, &format!("tf.{bi}.wv"), &b.wv),
                wo: lin(g, &mut reg, &format!("tf.{bi}.wo"), &b.wo),
                ln2: crate::nn::layers::LayerNormVars {
                    gain: input(g, &mut reg, format!("tf.{bi}.ln2.gain"), &b.ln2.gain),
                    bias: input(g, &mut reg, format!("tf.{bi}.ln2.bias"), &b.ln2.bias),
                },
                fc1: lin(g, &mut reg, &format!("tf.{bi}.fc1"), &b.fc1),
                fc2: lin(g, &mut reg, &format!("tf.{bi}.fc2"), &b.fc2),
            })
            .collect();
        let transformer = TransformerVars {
            blocks,
            ln_f: crate::nn::layers::LayerNormVars {
                gain: input(g, &mut reg, "tf.ln_f.gain".into(), &self.transformer.ln_f.gain),
                bias: input(g, &mut reg, "tf.ln_f.bias".into(), &self.transformer.ln_f.bias),
            },
        };
        let return_head = mlp(g, &mut reg, "return_head", &self.return_head);
        let state_encoder = mlp(g, &mut reg, "csa.enc", &self.csa.state_encoder);
        let ta_embedder = lin(g, &mut reg, "csa.ta_embed", &self.csa.ta_embedder);
        let codebook = input(g, &mut reg, "csa.codebook".into(), &self.csa.codebook.vectors);
        let rp_net = mlp(g, &mut reg, "csa.rp", &self.csa.rp_net);
        let ctp_net = mlp(g, &mut reg, "csa.ctp", &self.csa.ctp_net);

        (
            ModelVars {
                item_emb,
                rtg_embed,
                return_enc,
                action_enc,
                pos_embed,
                bos,
                transformer,
                return_head,
                state_encoder,
                ta_embedder,
                codebook,
                rp_net,
                ctp_net,
            },
            reg,
        )
    }
}

/// Graph handles for one bound forward pass.
pub struct ModelVars {
    pub item_emb: Var,
    pub rtg_embed: LinearVars,
    pub return_enc: MlpVars,
    pub action_enc: MlpVars,
    pub pos_embed: Var,
    pub bos: Var,
    pub transformer: TransformerVars,
    pub return_head: MlpVars,
    pub state_encoder: MlpVars,
    pub ta_embedder: LinearVars,
    pub codebook: Var,
    pub rp_net: MlpVars,
    pub ctp_net: MlpVars,
}

/// One training sample (a trajectory chunk of length T <= t_max).
#[derive(Debug, Clone)]
pub struct BatchSample {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub rtg: Vec<f64>,
    pub ta: Vec<f64>,
}

impl BatchSample {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Interleaved per-timestep token handles, in (return, code, action)
/// order; exactly 3T tokens.
pub struct TokenSequence {
    pub return_tokens: Vec<Var>,
    pub code_tokens: Vec<Var>,
    pub action_tokens: Vec<Var>,
    pub timesteps: Vec<usize>,
}

impl TokenSequence {
    pub fn interleaved(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(3 * self.timesteps.len());
        for t in 0..self.timesteps.len() {
            out.push(self.return_tokens[t]);
            out.push(self.code_tokens[t]);
            out.push(self.action_tokens[t]);
        }
        out
    }

    pub fn len_tokens(&self) -> usize {
        3 * self.timesteps.len()
    }
}

/// Discrete choices fixed before building the differentiable graph:
/// Gumbel draws, negative code samples, and the group table. Recomputed
/// each training step; frozen during gradient verification.
pub struct BatchPlan<S> {
    pub gumbel: Vec<Vec<Tensor<S>>>,
    pub negatives: Vec<Vec<Vec<usize>>>,
    pub groups: Option<GroupTable>,
    pub code_ids: Vec<Vec<usize>>,
}

/// Per-sample forward outputs.
pub struct SampleForward {
    pub tokens: TokenSequence,
    /// `[1, m]` action logits per timestep.
    pub logits: Vec<Var>,
    /// Scalar logit of the ground-truth action per timestep.
    pub own_logits: Vec<Var>,
    /// `[1, 2]` standardized return prediction per timestep.
    pub ret_preds: Vec<Var>,
    /// Quantization outputs (None when the abstraction is bypassed).
    pub quantized: Option<Vec<Quantized>>,
    /// Code token sources: quantized vectors, or encoder outputs when
    /// the abstraction is bypassed.
    pub code_vecs: Vec<Var>,
    /// Raw item embedding rows of the taken actions.
    pub action_embs: Vec<Var>,
}

fn standardized_signals<S: Scalar>(
    cfg: &ModelConfig,
    stats: &ReturnStats,
    sample: &BatchSample,
) -> (Vec<S>, Vec<S>) {
    let rtg_n = sample.rtg.iter().map(|&x| S::fl(stats.standardize_rtg(x))).collect();
    let ta_n = sample
        .ta
        .iter()
        .map(|&x| {
            if cfg.no_ta {
                S::zero()
            } else {
                S::fl(stats.standardize_ta(x))
            }
        })
        .collect();
    (rtg_n, ta_n)
}

/// Builds the full per-sample forward: tokens, transformer, heads.
///
/// `noises` enables Gumbel-perturbed assignments (training); `None` uses
/// the deterministic argmax (evaluation). `hard` selects straight-through
/// one-hot (training/eval) versus the soft path (gradient checks).
pub fn forward_sample<S: Scalar>(
    g: &mut Graph<S>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    stats: &ReturnStats,
    sample: &BatchSample,
    noises: Option<&[Tensor<S>]>,
    tau: f64,
    hard: bool,
) -> Result<SampleForward> {
    let t_len = sample.len();
    if t_len == 0 {
        return Err(Error::EmptyTrajectory);
    }
    if t_len > cfg.t_max {
        return Err(Error::Context(format!(
            "sample length {t_len} exceeds context limit {}",
            cfg.t_max
        )));
    }
    if sample.states.len() != t_len
        || sample.rewards.len() != t_len
        || sample.rtg.len() != t_len
        || sample.ta.len() != t_len
    {
        return Err(Error::Assembly(format!(
            "inconsistent sample arrays at length {t_len}"
        )));
    }
    let (rtg_n, ta_n) = standardized_signals::<S>(cfg, stats, sample);

    let mut return_tokens = Vec::with_capacity(t_len);
    let mut code_tokens = Vec::with_capacity(t_len);
    let mut action_tokens = Vec::with_capacity(t_len);
    let mut quantized: Vec<Quantized> = Vec::with_capacity(t_len);
    let mut code_vecs = Vec::with_capacity(t_len);
    let mut action_embs = Vec::with_capacity(t_len);

    let zero_d = g.input(Tensor::zeros(1, cfg.d));
    for t in 0..t_len {
        // Shared TA embedding: zero vector at the first step (and under
        // the TA ablation), else a linear map of the standardized score.
        let ta_emb = if t == 0 || cfg.no_ta {
            zero_d
        } else {
            let ta_in = g.input(Tensor::from_vec(1, 1, vec![ta_n[t]])?);
            dense(g, ta_in, &vars.ta_embedder)?
        };

        // State encoding and quantization.
        let state_row = g.input(Tensor::from_f64(1, cfg.d_s, &sample.states[t])?);
        let e_t = relu_mlp(g, state_row, &vars.state_encoder)?;
        let code_vec = if cfg.no_csa {
            e_t
        } else {
            let probs = tac_svq_similarity(g, e_t, vars.codebook, ta_emb, cfg.alpha_eff())?;
            let noise = noises.map(|n| &n[t]);
            let q = gumbel_assign(g, probs, vars.codebook, tau, noise, hard)?;
            let cv = q.code_vec;
            quantized.push(q);
            cv
        };
        code_vecs.push(code_vec);

        // Return token: per-scalar linear embeddings, concatenated, then
        // the return encoder.
        let rtg_in = g.input(Tensor::from_vec(1, 1, vec![rtg_n[t]])?);
        let rtg_emb = dense(g, rtg_in, &vars.rtg_embed)?;
        let ret_cat = g.concat_cols(&[rtg_emb, ta_emb])?;
        let ret_token = relu_mlp(g, ret_cat, &vars.return_enc)?;

        // Action token from the shared item embedding.
        let a_emb = g.gather_rows(vars.item_emb, &[sample.actions[t]])?;
        action_embs.push(a_emb);
        let act_token = relu_mlp(g, a_emb, &vars.action_enc)?;

        // Positional embedding added to all three tokens of the step.
        let pos = g.gather_rows(vars.pos_embed, &[t])?;
        return_tokens.push(g.add(ret_token, pos)?);
        code_tokens.push(g.add(code_vec, pos)?);
        action_tokens.push(g.add(act_token, pos)?);
    }

    let tokens = TokenSequence {
        return_tokens,
        code_tokens,
        action_tokens,
        timesteps: (0..t_len).collect(),
    };

    // Transformer input: start token followed by the 3T interleaved rows.
    let mut rows = Vec::with_capacity(1 + 3 * t_len);
    rows.push(vars.bos);
    rows.extend(tokens.interleaved());
    let x = g.stack_rows(&rows)?;
    let h = crate::nn::layers::transformer_forward(g, x, &vars.transformer, cfg.n_heads)?;

    let mut logits = Vec::with_capacity(t_len);
    let mut own_logits = Vec::with_capacity(t_len);
    let mut ret_preds = Vec::with_capacity(t_len);
    for t in 0..t_len {
        // Positions (0-based, +1 for the start token): return at 1+3t,
        // code at 2+3t, action at 3+3t.
        let h_code = g.gather_rows(h, &[2 + 3 * t])?;
        let logit_row = g.matmul_nt(h_code, vars.item_emb)?;
        own_logits.push(g.pick(logit_row, 0, sample.actions[t])?);
        logits.push(logit_row);

        let h_prev = g.gather_rows(h, &[3 * t])?;
        ret_preds.push(relu_mlp(g, h_prev, &vars.return_head)?);
    }

    Ok(SampleForward {
        tokens,
        logits,
        own_logits,
        ret_preds,
        quantized: if cfg.no_csa { None } else { Some(quantized) },
        code_vecs,
        action_embs,
    })
}

/// Fixes the step's discrete choices: Gumbel draws, code assignments (for
/// grouping and negative exclusion), negative samples. `use_noise`
/// matches the forward mode: perturbed assignments in training,
/// deterministic argmax otherwise.
#[allow(clippy::too_many_arguments)]
pub fn plan_batch<S: Scalar>(
    model: &TadtModel<S>,
    batch: &[BatchSample],
    stats: &ReturnStats,
    tau: f64,
    seed: u64,
    step: u64,
    use_noise: bool,
) -> Result<BatchPlan<S>> {
    let cfg = &model.cfg;
    let m = cfg.codebook_size;
    let mut gumbel: Vec<Vec<Tensor<S>>> = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        gumbel.push(
            (0..sample.len())
                .map(|t| gumbel_sample(1, m, seed, mix3(step, i as u64, t as u64)))
                .collect(),
        );
    }
    if cfg.no_csa {
        return Ok(BatchPlan { gumbel, negatives: vec![], groups: None, code_ids: vec![] });
    }

    // Value-only quantizer pass to fix code assignments.
    let mut g: Graph<S> = Graph::new();
    let (vars, _) = model.bind(&mut g);
    let mut code_ids: Vec<Vec<usize>> = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        let (_, ta_n) = standardized_signals::<S>(cfg, stats, sample);
        let zero_d = g.input(Tensor::zeros(1, cfg.d));
        let mut ids = Vec::with_capacity(sample.len());
        for t in 0..sample.len() {
            let ta_emb = if t == 0 || cfg.no_ta {
                zero_d
            } else {
                let ta_in = g.input(Tensor::from_vec(1, 1, vec![ta_n[t]])?);
                dense(&mut g, ta_in, &vars.ta_embedder)?
            };
            let state_row = g.input(Tensor::from_f64(1, cfg.d_s, &sample.states[t])?);
            let e_t = relu_mlp(&mut g, state_row, &vars.state_encoder)?;
            let probs = tac_svq_similarity(&mut g, e_t, vars.codebook, ta_emb, cfg.alpha_eff())?;
            let noise = use_noise.then(|| &gumbel[i][t]);
            let q = gumbel_assign(&mut g, probs, vars.codebook, tau, noise, true)?;
            ids.push(q.code_id);
        }
        code_ids.push(ids);
    }

    let mut negatives: Vec<Vec<Vec<usize>>> = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        let mut per_t = Vec::new();
        for t in 0..sample.len().saturating_sub(1) {
            let mut rng = stream(seed, "ctp-neg", mix3(step, i as u64, t as u64));
            per_t.push(crate::csa::sample_negatives(
                m,
                code_ids[i][t],
                code_ids[i][t + 1],
                cfg.k_neg,
                &mut rng,
            )?);
        }
        negatives.push(per_t);
    }

    let inputs: Vec<GroupInput> = batch
        .iter()
        .zip(&code_ids)
        .map(|(s, ids)| GroupInput {
            codes: ids,
            actions: &s.actions,
            rtg: &s.rtg,
            ta: &s.ta,
        })
        .collect();
    let groups = build_groups(&inputs, cfg.bin_width)?;

    Ok(BatchPlan { gumbel, negatives, groups: Some(groups), code_ids })
}

/// Scalar loss handles for one batch.
pub struct LossVars {
    pub total: Var,
    pub action: Var,
    pub rank: Option<Var>,
    pub ret: Var,
    pub reward: Option<Var>,
    pub contrastive: Option<Var>,
    pub entropy: Option<Var>,
    pub forwards: Vec<SampleForward>,
}

/// Raw (unweighted) component values.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub action: f64,
    pub rank: f64,
    pub ret: f64,
    pub reward: f64,
    pub contrastive: f64,
    pub entropy: f64,
}

impl LossValues {
    /// Recombines raw components with weights; equals `total` to float
    /// tolerance by construction.
    pub fn weighted_sum(&self, lambda: [f64; 5]) -> f64 {
        self.action
            + lambda[0] * self.rank
            + lambda[1] * self.ret
            + lambda[2] * self.reward
            + lambda[3] * self.contrastive
            + lambda[4] * self.entropy
    }
}

/// Builds every loss of the combined objective on one graph.
#[allow(clippy::too_many_arguments)]
pub fn build_losses<S: Scalar>(
    g: &mut Graph<S>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    stats: &ReturnStats,
    batch: &[BatchSample],
    plan: &BatchPlan<S>,
    tau: f64,
    hard: bool,
    train_noise: bool,
    rank_seed: u64,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let mut forwards = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        let noises = if train_noise { Some(plan.gumbel[i].as_slice()) } else { None };
        forwards.push(forward_sample(g, vars, cfg, stats, sample, noises, tau, hard)?);
    }

    // Action NLL over all (sample, t).
    let mut nll_terms = Vec::new();
    for (sample, fwd) in batch.iter().zip(&forwards) {
        for t in 0..sample.len() {
            let term = g.nll_rows(fwd.logits[t], &[sample.actions[t]])?;
            nll_terms.push(term);
        }
    }
    let action = crate::csa::reduce(g, &nll_terms, cfg.reduction)?;

    // Return regression: squared norm over both standardized components.
    let mut ret_terms = Vec::new();
    for (sample, fwd) in batch.iter().zip(&forwards) {
        let (rtg_n, ta_n) = standardized_signals::<S>(cfg, stats, sample);
        for t in 0..sample.len() {
            let target = g.input(Tensor::from_vec(1, 2, vec![rtg_n[t], ta_n[t]])?);
            let diff = g.sub(fwd.ret_preds[t], target)?;
            let sq = g.mul(diff, diff)?;
            ret_terms.push(g.sum_all(sq));
        }
    }
    let ret = crate::csa::reduce(g, &ret_terms, cfg.reduction)?;

    // CSA losses.
    let (mut reward, mut contrastive, mut entropy) = (None, None, None);
    if !cfg.no_csa {
        if !cfg.no_rp && cfg.lambda[2] > 0.0 {
            let mut preds = Vec::new();
            let mut targets = Vec::new();
            for (sample, fwd) in batch.iter().zip(&forwards) {
                for t in 0..sample.len() {
                    preds.push(rp_forward(g, &vars.rp_net, fwd.code_vecs[t], fwd.action_embs[t])?);
                    targets.push(sample.rewards[t]);
                }
            }
            reward = Some(rp_loss(g, &preds, &targets, cfg.reduction)?);
        }
        if !cfg.no_ctp && cfg.lambda[3] > 0.0 {
            let mut terms = Vec::new();
            for ((sample, fwd), negs) in batch.iter().zip(&forwards).zip(&plan.negatives) {
                for t in 0..sample.len().saturating_sub(1) {
                    let pos = ctp_logit(
                        g,
                        &vars.ctp_net,
                        fwd.code_vecs[t],
                        fwd.action_embs[t],
                        fwd.code_vecs[t + 1],
                    )?;
                    let neg_logits: Vec<Var> = negs[t]
                        .iter()
                        .map(|&id| {
                            let row = g.gather_rows(vars.codebook, &[id])?;
                            ctp_logit(g, &vars.ctp_net, fwd.code_vecs[t], fwd.action_embs[t], row)
                        })
                        .collect::<Result<_>>()?;
                    terms.push(ctp_pair_loss(g, pos, &neg_logits, cfg.ctp_denominator)?);
                }
            }
            if !terms.is_empty() {
                contrastive = Some(crate::csa::reduce(g, &terms, cfg.reduction)?);
            }
        }
        if cfg.lambda[4] > 0.0 {
            let rows: Vec<Var> = forwards
                .iter()
                .flat_map(|f| f.quantized.as_ref().unwrap().iter().map(|q| q.assign_probs))
                .collect();
            entropy = Some(entropy_reg_loss(g, &rows, cfg.reg_mode)?);
        }
    }

    // Quantile pairwise ranking loss over hashed groups.
    let mut rank = None;
    if cfg.lambda[0] > 0.0 {
        if let Some(groups) = &plan.groups {
            let own: Vec<Vec<Var>> = forwards.iter().map(|f| f.own_logits.clone()).collect();
            rank = pairwise_rank_loss(
                g,
                groups,
                &own,
                cfg.beta,
                cfg.delta,
                cfg.rank_pair_cap,
                rank_seed,
                cfg.reduction,
            )?;
        }
    }

    let mut weighted: Vec<(Var, f64)> = vec![(action, 1.0), (ret, cfg.lambda[1])];
    if let Some(r) = rank {
        weighted.push((r, cfg.lambda[0]));
    }
    if let Some(r) = reward {
        weighted.push((r, cfg.lambda[2]));
    }
    if let Some(c) = contrastive {
        weighted.push((c, cfg.lambda[3]));
    }
    if let Some(e) = entropy {
        weighted.push((e, cfg.lambda[4]));
    }
    let total = weighted_sum(g, &weighted)?;

    Ok(LossVars { total, action, rank, ret, reward, contrastive, entropy, forwards })
}

impl LossVars {
    pub fn values<S: Scalar>(&self, g: &Graph<S>) -> LossValues {
        let read = |v: Option<Var>| v.map(|v| g.value(v).scalar_value().to64()).unwrap_or(0.0);
        LossValues {
            total: g.value(self.total).scalar_value().to64(),
            action: g.value(self.action).scalar_value().to64(),
            rank: read(self.rank),
            ret: g.value(self.ret).scalar_value().to64(),
            reward: read(self.reward),
            contrastive: read(self.contrastive),
            entropy: read(self.entropy),
        }
    }
}

// ---- inference ----

/// Rolling context for autoregressive generation. `states` has one more
/// entry than `actions` while an action is pending.
#[derive(Debug, Clone, Default)]
pub struct InferenceContext {
    pub rtg: Vec<f64>,
    pub ta: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
}

fn window_start(len: usize, t_max: usize) -> usize {
    len.saturating_sub(t_max)
}

/// Builds transformer rows for the (windowed) context. When `pending` is
/// true the last step contributes only its return and code tokens.
fn context_rows<S: Scalar>(
    g: &mut Graph<S>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    stats: &ReturnStats,
    ctx: &InferenceContext,
    pending: bool,
) -> Result<Vec<Var>> {
    let n = ctx.states.len();
    if ctx.rtg.len() != n || ctx.ta.len() != n {
        return Err(Error::Context(format!(
            "context arrays disagree: states {n}, rtg {}, ta {}",
            ctx.rtg.len(),
            ctx.ta.len()
        )));
    }
    let expected_actions = if pending { n - 1 } else { n };
    if ctx.actions.len() != expected_actions {
        return Err(Error::Context(format!(
            "expected {expected_actions} actions, got {}",
            ctx.actions.len()
        )));
    }
    let start = window_start(n, cfg.t_max);
    let mut rows = vec![vars.bos];
    let zero_d = g.input(Tensor::zeros(1, cfg.d));
    for (w, t) in (start..n).enumerate() {
        let ta_emb = if t == 0 || cfg.no_ta {
            zero_d
        } else {
            let v = S::fl(stats.standardize_ta(ctx.ta[t]));
            let ta_in = g.input(Tensor::from_vec(1, 1, vec![v])?);
            dense(g, ta_in, &vars.ta_embedder)?
        };
        let state_row = g.input(Tensor::from_f64(1, cfg.d_s, &ctx.states[t])?);
        let e_t = relu_mlp(g, state_row, &vars.state_encoder)?;
        let code_vec = if cfg.no_csa {
            e_t
        } else {
            let probs = tac_svq_similarity(g, e_t, vars.codebook, ta_emb, cfg.alpha_eff())?;
            gumbel_assign(g, probs, vars.codebook, 1.0, None, true)?.code_vec
        };
        let rtg_in = g.input(Tensor::from_vec(1, 1, vec![S::fl(stats.standardize_rtg(ctx.rtg[t]))])?);
        let rtg_emb = dense(g, rtg_in, &vars.rtg_embed)?;
        let ret_cat = g.concat_cols(&[rtg_emb, ta_emb])?;
        let ret_token = relu_mlp(g, ret_cat, &vars.return_enc)?;
        let pos = g.gather_rows(vars.pos_embed, &[w])?;
        rows.push(g.add(ret_token, pos)?);
        rows.push(g.add(code_vec, pos)?);
        if t < ctx.actions.len() {
            let a_emb = g.gather_rows(vars.item_emb, &[ctx.actions[t]])?;
            let act_token = relu_mlp(g, a_emb, &vars.action_enc)?;
            rows.push(g.add(act_token, pos)?);
        }
    }
    Ok(rows)
}

/// Reusable inference state: parameters bound once, the graph grows with
/// each query and can be reset between episodes.
pub struct InferenceSession<'m, S: Scalar> {
    model: &'m TadtModel<S>,
    stats: ReturnStats,
    g: Graph<S>,
    vars: ModelVars,
}

impl<'m, S: Scalar> InferenceSession<'m, S> {
    pub fn new(model: &'m TadtModel<S>, stats: &ReturnStats) -> Self {
        let mut g = Graph::new();
        let (vars, _) = model.bind(&mut g);
        InferenceSession { model, stats: *stats, g, vars }
    }

    /// Drops accumulated forward nodes (call between episodes).
    pub fn reset(&mut self) {
        let mut g = Graph::new();
        let (vars, _) = self.model.bind(&mut g);
        self.g = g;
        self.vars = vars;
    }

    /// Action distribution over all items given a context ending at a
    /// code token.
    pub fn action_probs(&mut self, ctx: &InferenceContext) -> Result<Vec<f64>> {
        let cfg = &self.model.cfg;
        let rows = context_rows(&mut self.g, &self.vars, cfg, &self.stats, ctx, true)?;
        let x = self.g.stack_rows(&rows)?;
        let h =
            crate::nn::layers::transformer_forward(&mut self.g, x, &self.vars.transformer, cfg.n_heads)?;
        let last = self.g.gather_rows(h, &[self.g.value(h).rows() - 1])?;
        let logits = self.g.matmul_nt(last, self.vars.item_emb)?;
        let probs = self.g.row_softmax(logits);
        Ok(self.g.value(probs).to_f64_vec())
    }

    /// Predicted (rtg, ta) for the next step, de-standardized.
    pub fn return_pred(&mut self, ctx: &InferenceContext) -> Result<(f64, f64)> {
        let cfg = &self.model.cfg;
        let rows = if ctx.states.is_empty() {
            vec![self.vars.bos]
        } else {
            context_rows(&mut self.g, &self.vars, cfg, &self.stats, ctx, false)?
        };
        let x = self.g.stack_rows(&rows)?;
        let h =
            crate::nn::layers::transformer_forward(&mut self.g, x, &self.vars.transformer, cfg.n_heads)?;
        let last = self.g.gather_rows(h, &[self.g.value(h).rows() - 1])?;
        let pred = relu_mlp(&mut self.g, last, &self.vars.return_head)?;
        let v = self.g.value(pred);
        Ok((
            self.stats.destandardize_rtg(v.get(0, 0).to64()),
            self.stats.destandardize_ta(v.get(0, 1).to64()),
        ))
    }
}

/// Action distribution over all items given a context ending at a code
/// token.
pub fn predict_action<S: Scalar>(
    model: &TadtModel<S>,
    stats: &ReturnStats,
    ctx: &InferenceContext,
) -> Result<Vec<f64>> {
    InferenceSession::new(model, stats).action_probs(ctx)
}

/// Predicted (rtg, ta) for the next step, de-standardized.
pub fn predict_return<S: Scalar>(
    model: &TadtModel<S>,
    stats: &ReturnStats,
    ctx: &InferenceContext,
) -> Result<(f64, f64)> {
    InferenceSession::new(model, stats).return_pred(ctx)
}

/// How the return token evolves during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    /// RTG decrements by realized reward (divided by gamma when < 1); TA
    /// recomputed from the realized RTG sequence.
    RtgDecrement,
    /// The return head's predictions feed the next return token.
    ModelPredicted,
}

impl std::str::FromStr for GenMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtg_decrement" => Ok(GenMode::RtgDecrement),
            "model_predicted" => Ok(GenMode::ModelPredicted),
            other => Err(Error::InvalidParameter(format!("unknown generation mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenStep {
    pub t: usize,
    pub action: usize,
    pub rtg: f64,
    pub ta: f64,
    pub reward: f64,
}

/// Autoregressive rollout in a simulated environment.
#[allow(clippy::too_many_arguments)]
pub fn generate<S: Scalar>(
    model: &TadtModel<S>,
    stats: &ReturnStats,
    env: &mut crate::env::EnvSim,
    gamma: f64,
    target_return: f64,
    mode: GenMode,
    horizon: usize,
    seed: u64,
    sample_actions: bool,
) -> Result<Vec<GenStep>> {
    if !target_return.is_finite() {
        return Err(Error::InvalidParameter("target_return must be finite".into()));
    }
    let mut session = InferenceSession::new(model, stats);
    let mut ctx = InferenceContext::default();
    let mut out: Vec<GenStep> = Vec::with_capacity(horizon);
    let mut rng = stream(seed, "generate", 0);
    for t in 0..horizon {
        let (rtg_t, ta_t) = if t == 0 {
            (target_return, 0.0)
        } else {
            match mode {
                GenMode::RtgDecrement => {
                    let prev_rtg = ctx.rtg[t - 1];
                    let prev_reward = out[t - 1].reward;
                    let rtg = if gamma < 1.0 {
                        (prev_rtg - prev_reward) / gamma
                    } else {
                        prev_rtg - prev_reward
                    };
                    let ta = gamma * ctx.ta[t - 1] + (rtg - prev_rtg);
                    (rtg, ta)
                }
                GenMode::ModelPredicted => session.return_pred(&ctx)?,
            }
        };
        let obs = env.observe().to_vec();
        ctx.rtg.push(rtg_t);
        ctx.ta.push(ta_t);
        ctx.states.push(obs);

        let probs = session.action_probs(&ctx)?;
        let action = if sample_actions {
            let mut dart: f64 = rng.gen::<f64>();
            let mut chosen = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                dart -= p;
                if dart <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            argmax(&probs)
        };
        let reward = env.step(action)?;
        ctx.actions.push(action);
        out.push(GenStep { t, action, rtg: rtg_t, ta: ta_t, reward });
    }
    Ok(out)
}
