//! Finite-difference verification of every loss component on a tiny
//! model configuration.
//!
//! The check freezes the step's discrete structure (assignments, groups,
//! negative samples) and runs the quantizer on its soft path, so the
//! composed objective is smooth. In single precision the analytic f32
//! gradients are compared against central differences evaluated on an
//! exact f64 copy of the parameters; in double precision both sides are
//! f64.

use crate::csa::{CtpDenominator, Reduction, RegMode};
use crate::error::Result;
use crate::model::{build_losses, plan_batch, BatchPlan, BatchSample, ModelConfig, TadtModel};
use crate::nn::graph::{Graph, Var};
use crate::nn::Scalar;
use crate::train::Precision;
use crate::trajectory::ReturnStats;
use serde::{Deserialize, Serialize};

pub const LOSS_NAMES: [&str; 7] =
    ["action", "rank", "return", "reward", "contrastive", "entropy", "total"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdReport {
    pub precision: Precision,
    pub params_checked: usize,
    pub checks: Vec<LossCheck>,
}

impl FdReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// T = 2, m = 3, M = 4, d = 8 configuration from the verification
/// contract.
pub fn tiny_check_config() -> ModelConfig {
    ModelConfig {
        d_s: 4,
        m: 3,
        d: 8,
        n_layers: 1,
        n_heads: 2,
        t_max: 2,
        codebook_size: 4,
        alpha: 0.7,
        k_neg: 2,
        beta: 0.5,
        delta: 0.3,
        bin_width: 0.1,
        lambda: [1.0, 1.0, 1.0, 1.0, 0.1],
        ctp_denominator: CtpDenominator::WithPositive,
        reg_mode: RegMode::PerSample,
        reduction: Reduction::Mean,
        rank_pair_cap: 256,
        no_tac: false,
        no_ctp: false,
        no_rp: false,
        no_csa: false,
        no_ta: false,
    }
}

/// Two samples with a shared first state, so the rank loss has a group
/// with one positive/negative pair.
pub fn tiny_check_batch() -> Vec<BatchSample> {
    let shared = vec![0.3, -0.5, 0.8, 0.1];
    vec![
        BatchSample {
            states: vec![shared.clone(), vec![1.1, 0.2, -0.7, 0.4]],
            actions: vec![0, 2],
            rewards: vec![1.0, 0.0],
            rtg: vec![1.0, 0.0],
            ta: vec![0.0, -1.0],
        },
        BatchSample {
            states: vec![shared, vec![-0.9, 0.6, 0.2, -0.2]],
            actions: vec![1, 1],
            rewards: vec![0.0, 1.0],
            rtg: vec![0.9, 1.0],
            ta: vec![0.0, 0.1],
        },
    ]
}

fn unit_stats() -> ReturnStats {
    ReturnStats { rtg_mean: 0.0, rtg_std: 1.0, ta_mean: 0.0, ta_std: 1.0 }
}

fn loss_roots<S: Scalar>(
    g: &mut Graph<S>,
    model: &TadtModel<S>,
    batch: &[BatchSample],
    plan: &BatchPlan<S>,
) -> Result<Vec<Option<Var>>> {
    let (vars, _) = model.bind(g);
    let stats = unit_stats();
    let losses = build_losses(
        g, &vars, &model.cfg, &stats, batch, plan, 1.0, /*hard=*/ false,
        /*train_noise=*/ false, 7,
    )?;
    Ok(vec![
        Some(losses.action),
        losses.rank,
        Some(losses.ret),
        losses.reward,
        losses.contrastive,
        losses.entropy,
        Some(losses.total),
    ])
}

fn eval_values<S: Scalar>(
    model: &TadtModel<S>,
    batch: &[BatchSample],
    plan: &BatchPlan<S>,
) -> Result<Vec<f64>> {
    let mut g: Graph<S> = Graph::new();
    let roots = loss_roots(&mut g, model, batch, plan)?;
    Ok(roots
        .iter()
        .map(|r| r.map(|v| g.value(v).scalar_value().to64()).unwrap_or(0.0))
        .collect())
}

/// Analytic gradient of loss `k` for every parameter, via one backward
/// pass on a fresh graph.
fn analytic_grads<S: Scalar>(
    model: &TadtModel<S>,
    batch: &[BatchSample],
    plan: &BatchPlan<S>,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut g: Graph<S> = Graph::new();
    let mut model = model.clone();
    let roots = {
        let (vars, reg) = model.bind(&mut g);
        let stats = unit_stats();
        let losses = build_losses(
            &mut g, &vars, &model.cfg, &stats, batch, plan, 1.0, false, false, 7,
        )?;
        let roots = vec![
            Some(losses.action),
            losses.rank,
            Some(losses.ret),
            losses.reward,
            losses.contrastive,
            losses.entropy,
            Some(losses.total),
        ];
        let Some(root) = roots[k] else {
            return Ok(model
                .params_mut()
                .iter()
                .map(|(_, p)| vec![0.0; p.len()])
                .collect());
        };
        g.backward(root)?;
        let grads: Vec<Vec<f64>> = reg
            .iter()
            .map(|(_, v)| {
                g.grad(*v)
                    .map(|t| t.to_f64_vec())
                    .unwrap_or_else(|| vec![0.0; g.value(*v).len()])
            })
            .collect();
        grads
    };
    Ok(roots)
}

fn cast_model_f64(model: &TadtModel<f32>) -> TadtModel<f64> {
    let mut out = TadtModel::<f64>::new(model.cfg.clone(), 0).expect("same config");
    let mut src = model.clone();
    let src_params = src.params_mut();
    for ((_, dst), (_, s)) in out.params_mut().iter_mut().zip(src_params.iter()) {
        dst.data = s.data.iter().map(|&x| x as f64).collect();
    }
    out
}

fn cast_plan_f64(plan: &BatchPlan<f32>) -> BatchPlan<f64> {
    BatchPlan {
        gumbel: plan
            .gumbel
            .iter()
            .map(|v| {
                v.iter()
                    .map(|t| crate::nn::Tensor::<f64>::from_f64(t.shape[0], t.shape[1], &t.to_f64_vec()).unwrap())
                    .collect()
            })
            .collect(),
        negatives: plan.negatives.clone(),
        groups: plan.groups.clone(),
        code_ids: plan.code_ids.clone(),
    }
}

/// Central finite differences over every parameter of the tiny model,
/// all seven losses at once.
pub fn full_loss_gradcheck(precision: Precision, seed: u64) -> Result<FdReport> {
    let tol = match precision {
        Precision::Single => 1e-4,
        Precision::Double => 1e-6,
    };
    let batch = tiny_check_batch();
    let stats = unit_stats();

    // Reference f64 model: either the model itself (double) or an exact
    // widening of the f32 parameters (single).
    let (analytic, mut ref_model, plan64): (Vec<Vec<Vec<f64>>>, TadtModel<f64>, BatchPlan<f64>) =
        match precision {
            Precision::Single => {
                let model: TadtModel<f32> = TadtModel::new(tiny_check_config(), seed)?;
                let plan = plan_batch(&model, &batch, &stats, 1.0, seed, 0, false)?;
                let analytic = (0..7)
                    .map(|k| analytic_grads(&model, &batch, &plan, k))
                    .collect::<Result<_>>()?;
                (analytic, cast_model_f64(&model), cast_plan_f64(&plan))
            }
            Precision::Double => {
                let model: TadtModel<f64> = TadtModel::new(tiny_check_config(), seed)?;
                let plan = plan_batch(&model, &batch, &stats, 1.0, seed, 0, false)?;
                let analytic = (0..7)
                    .map(|k| analytic_grads(&model, &batch, &plan, k))
                    .collect::<Result<_>>()?;
                (analytic, model, plan)
            }
        };

    let h_scale = 1e-5;
    let n_params = ref_model.params_mut().len();
    let mut max_rel = vec![0.0f64; 7];
    for pi in 0..n_params {
        let n_elems = {
            let params = ref_model.params_mut();
            params[pi].1.len()
        };
        for ei in 0..n_elems {
            let x0 = {
                let params = ref_model.params_mut();
                params[pi].1.data[ei]
            };
            let h = h_scale * x0.abs().max(1.0);
            let set = |m: &mut TadtModel<f64>, v: f64| {
                let mut params = m.params_mut();
                params[pi].1.data[ei] = v;
            };
            set(&mut ref_model, x0 + h);
            let plus = eval_values(&ref_model, &batch, &plan64)?;
            set(&mut ref_model, x0 - h);
            let minus = eval_values(&ref_model, &batch, &plan64)?;
            set(&mut ref_model, x0);
            for k in 0..7 {
                let numeric = (plus[k] - minus[k]) / (2.0 * h);
                let a = analytic[k][pi][ei];
                let denom = a.abs().max(numeric.abs()).max(1.0);
                let rel = (a - numeric).abs() / denom;
                if rel > max_rel[k] {
                    max_rel[k] = rel;
                }
            }
        }
    }

    let checks = LOSS_NAMES
        .iter()
        .zip(&max_rel)
        .map(|(name, &err)| LossCheck {
            name: name.to_string(),
            max_rel_err: err,
            tol,
            pass: err <= tol,
        })
        .collect();
    Ok(FdReport { precision, params_checked: n_params, checks })
}
