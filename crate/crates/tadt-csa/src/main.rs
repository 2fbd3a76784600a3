//! Command-line entry point: dataset generation, training, evaluation,
//! rollouts, bound checking, the stitching experiment, and gradient
//! verification. Every run writes a resolved-config snapshot and its
//! seed under --out-dir, and identical invocations produce identical
//! output files.

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};
use tadt_csa::bound::{theorem_bound_check, LosslessAbstraction, ModelAbstraction};
use tadt_csa::env::{
    collect_trajectories, make_random_mdp, make_stitching_mdp, value_iteration, EnvSim,
    PolicyTable, RewardMode, TabularMdp,
};
use tadt_csa::error::{Error, Result};
use tadt_csa::eval::{eval_rollout_return, offline_eval};
use tadt_csa::experiments::{stitch_points_csv, stitching_experiment, StitchConfig};
use tadt_csa::fdcheck::full_loss_gradcheck;
use tadt_csa::model::{generate, GenMode};
use tadt_csa::plot::{line_chart, Series};
use tadt_csa::train::{load_checkpoint, train, Precision, TrainConfig};
use tadt_csa::trajectory::{load_dataset, save_dataset, DatasetMeta};

#[derive(Parser)]
#[command(name = "tadt-csa", version, about = "Temporal-advantage decision transformer with contrastive state abstraction: synthetic-MDP training and evaluation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an offline trajectory dataset from a synthetic MDP.
    GenData(GenDataArgs),
    /// Train a model on a JSONL trajectory dataset.
    Train(TrainArgs),
    /// Offline ranking metrics on a held-out dataset.
    Eval(EvalArgs),
    /// Autoregressive rollout of a trained model in a saved MDP.
    Rollout(RolloutArgs),
    /// Empirical check of the abstraction value-difference bound.
    BoundCheck(BoundCheckArgs),
    /// Chunk-length stitching experiment with rollout curves.
    StitchExp(StitchArgs),
    /// Finite-difference verification of all loss gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    /// Environment family: "stitching" or "random".
    #[arg(long, default_value = "stitching")]
    env: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total episodes (stitching splits them across both behaviors).
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    /// Episode length; defaults to 200 (stitching) or 40 (random).
    #[arg(long)]
    horizon: Option<usize>,
    /// Exploration noise mixed into the behavior policy.
    #[arg(long, default_value_t = 0.15)]
    epsilon: f64,
    /// Held-out episodes written to eval.jsonl.
    #[arg(long, default_value_t = 0)]
    eval_episodes: usize,
    /// Discount used for the dataset's return signals.
    #[arg(long, default_value_t = 1.0)]
    signal_gamma: f64,
    /// Emit mean rewards instead of Bernoulli draws.
    #[arg(long, default_value_t = false)]
    mean_rewards: bool,
    /// Behavior policy for the random env: "greedy" or "uniform".
    #[arg(long, default_value = "greedy")]
    behavior: String,
    #[arg(long, default_value_t = 12)]
    n_states: usize,
    #[arg(long, default_value_t = 4)]
    n_actions: usize,
    #[arg(long, default_value_t = 8)]
    d_s: usize,
    #[arg(long, default_value_t = 0.5)]
    sparsity: f64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// JSON or flat key=value config file (defaults apply when absent).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repeatable config override, e.g. --set lr=0.01.
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated cutoffs for recall@K / NDCG@K.
    #[arg(long, default_value = "1,5,10")]
    ks: String,
    #[arg(long, default_value_t = false)]
    plot: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct RolloutArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 100)]
    horizon: usize,
    /// Conditioning target; defaults to mean + 2 std of training RTG.
    #[arg(long)]
    target_return: Option<f64>,
    /// "rtg_decrement" or "model_predicted".
    #[arg(long, default_value = "rtg_decrement")]
    mode: String,
    /// Reset the context with a fresh target every N steps instead of
    /// sliding the window.
    #[arg(long)]
    segment: Option<usize>,
    /// Sample actions from the policy instead of greedy argmax.
    #[arg(long, default_value_t = false)]
    sample: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct BoundCheckArgs {
    /// Checkpoint to check; ignored with --lossless.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    mdp: PathBuf,
    /// Use the exact per-state abstraction instead of a trained model.
    #[arg(long, default_value_t = false)]
    lossless: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct StitchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long, default_value = "30,50")]
    chunk_lengths: String,
    #[arg(long, default_value_t = 30)]
    episodes_per_policy: usize,
    #[arg(long, default_value_t = 200)]
    horizon: usize,
    #[arg(long, default_value_t = 0.15)]
    epsilon: f64,
    #[arg(long, default_value_t = 5)]
    eval_episodes: usize,
    #[arg(long, default_value_t = 40)]
    eval_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long, default_value_t = false)]
    plot: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    /// "single", "double", or "both".
    #[arg(long, default_value = "both")]
    precision: String,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn deterministic_mode() -> bool {
    std::env::var("TADT_CSA_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
}

fn write_snapshot<A: Serialize>(out_dir: &Path, command: &str, args: &A, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let snapshot = serde_json::json!({"command": command, "seed": seed, "args": args});
    std::fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(&snapshot)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Rollout(a) => cmd_rollout(a),
        Command::BoundCheck(a) => cmd_bound_check(a),
        Command::StitchExp(a) => cmd_stitch(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let workers = if deterministic_mode() { 1 } else { a.workers };
    let reward_mode = if a.mean_rewards { RewardMode::Mean } else { RewardMode::Bernoulli };
    let (mdp, train_trajs, eval_trajs) = match a.env.as_str() {
        "stitching" => {
            let horizon = a.horizon.unwrap_or(200);
            let (mdp, pol_a, pol_b) = make_stitching_mdp(a.seed);
            let half = a.episodes.div_ceil(2);
            let mut trajs = collect_trajectories(
                &mdp, &pol_a, half, horizon, a.seed, a.epsilon, reward_mode, workers,
            )?;
            trajs.extend(collect_trajectories(
                &mdp,
                &pol_b,
                a.episodes - half,
                horizon,
                a.seed.wrapping_add(1),
                a.epsilon,
                reward_mode,
                workers,
            )?);
            let eval_half = a.eval_episodes.div_ceil(2);
            let mut eval = collect_trajectories(
                &mdp,
                &pol_a,
                eval_half,
                horizon,
                a.seed.wrapping_add(2),
                a.epsilon,
                reward_mode,
                workers,
            )?;
            eval.extend(collect_trajectories(
                &mdp,
                &pol_b,
                a.eval_episodes - eval_half,
                horizon,
                a.seed.wrapping_add(3),
                a.epsilon,
                reward_mode,
                workers,
            )?);
            (mdp, trajs, eval)
        }
        "random" => {
            let horizon = a.horizon.unwrap_or(40);
            let mdp = make_random_mdp(a.seed, a.n_states, a.n_actions, a.d_s, a.sparsity)?;
            let policy = match a.behavior.as_str() {
                "greedy" => value_iteration(&mdp, 1e-10)?.1,
                "uniform" => PolicyTable::uniform(mdp.n_states, mdp.n_actions),
                other => {
                    return Err(Error::InvalidParameter(format!("unknown behavior '{other}'")))
                }
            };
            let trajs = collect_trajectories(
                &mdp, &policy, a.episodes, horizon, a.seed, a.epsilon, reward_mode, workers,
            )?;
            let eval = collect_trajectories(
                &mdp,
                &policy,
                a.eval_episodes,
                horizon,
                a.seed.wrapping_add(2),
                a.epsilon,
                reward_mode,
                workers,
            )?;
            (mdp, trajs, eval)
        }
        other => return Err(Error::InvalidParameter(format!("unknown env '{other}'"))),
    };

    write_snapshot(&a.out_dir, "gen-data", &a, a.seed)?;
    let meta = DatasetMeta {
        gamma: a.signal_gamma,
        d_s: mdp.d_s(),
        m: mdp.n_actions,
        return_stats: None,
    };
    save_dataset(&a.out_dir.join("train.jsonl"), &train_trajs, &meta)?;
    if !eval_trajs.is_empty() {
        save_dataset(&a.out_dir.join("eval.jsonl"), &eval_trajs, &meta)?;
    }
    mdp.save(&a.out_dir.join("mdp.json"))?;
    println!(
        "wrote {} train episodes ({} eval) to {}",
        train_trajs.len(),
        eval_trajs.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn resolve_train_config(
    config: &Option<PathBuf>,
    set: &[String],
    seed: Option<u64>,
    precision: &Option<String>,
    workers: Option<usize>,
) -> Result<TrainConfig> {
    let base = match config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    let mut cfg = base.apply_overrides(set)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = precision {
        cfg.precision = p.parse()?;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if deterministic_mode() {
        cfg.workers = 1;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a.config, &a.set, a.seed, &a.precision, a.workers)?;
    let (trajs, meta) = load_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out_dir)?;
    std::fs::write(
        a.out_dir.join("config.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "command": "train", "seed": cfg.seed, "config": cfg,
        }))?,
    )?;

    let (records, final_losses) = match cfg.precision {
        Precision::Single => {
            let out = train::<f32>(&cfg, &trajs, &meta, Some(&a.out_dir))?;
            out.log.write_csv(&a.out_dir.join("metrics.csv"))?;
            (out.log.records.len(), out.log.records.last().map(|r| r.losses))
        }
        Precision::Double => {
            let out = train::<f64>(&cfg, &trajs, &meta, Some(&a.out_dir))?;
            out.log.write_csv(&a.out_dir.join("metrics.csv"))?;
            (out.log.records.len(), out.log.records.last().map(|r| r.losses))
        }
    };
    match final_losses {
        Some(l) => println!(
            "trained {records} steps; final loss {:.4} (action {:.4})",
            l.total, l.action
        ),
        None => println!("trained 0 steps (epochs = 0); wrote initialized checkpoint"),
    }
    println!("checkpoint: {}", a.out_dir.join("final.ckpt").display());
    Ok(())
}

fn parse_ks(ks: &str) -> Result<Vec<usize>> {
    ks.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidParameter(format!("bad K '{s}'")))
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ks = parse_ks(&a.ks)?;
    let (trajs, meta) = load_dataset(&a.data)?;
    let dtype = tadt_csa::checkpoint::peek_dtype(&a.ckpt)?;
    let table = match dtype.as_str() {
        "f64" => {
            let l = load_checkpoint::<f64>(&a.ckpt)?;
            offline_eval(&l.model, &l.stats, &l.config, &trajs, &meta, &ks)?
        }
        _ => {
            let l = load_checkpoint::<f32>(&a.ckpt)?;
            offline_eval(&l.model, &l.stats, &l.config, &trajs, &meta, &ks)?
        }
    };
    write_snapshot(&a.out_dir, "eval", &a, 0)?;
    std::fs::write(a.out_dir.join("metrics.json"), serde_json::to_string_pretty(&table)?)?;
    std::fs::write(a.out_dir.join("metrics.csv"), table.to_csv())?;
    if a.plot {
        let series = vec![
            Series {
                name: "recall@K".into(),
                points: table.recall.iter().map(|(&k, &v)| (k as f64, v)).collect(),
            },
            Series {
                name: "ndcg@K".into(),
                points: table.ndcg.iter().map(|(&k, &v)| (k as f64, v)).collect(),
            },
        ];
        std::fs::write(
            a.out_dir.join("metrics.svg"),
            line_chart("offline ranking metrics", "K", "value", &series),
        )?;
    }
    println!("{}", table.to_csv().trim_end());
    Ok(())
}

fn cmd_rollout(a: RolloutArgs) -> Result<()> {
    let mdp = TabularMdp::load(&a.mdp)?;
    let mode: GenMode = a.mode.parse()?;
    let dtype = tadt_csa::checkpoint::peek_dtype(&a.ckpt)?;
    let seed = a.seed.unwrap_or(0);

    macro_rules! run_rollout {
        ($ty:ty) => {{
            let l = load_checkpoint::<$ty>(&a.ckpt)?;
            let gamma = l.config.signal_gamma(&l.meta);
            let target = a
                .target_return
                .unwrap_or(l.stats.rtg_mean + 2.0 * l.stats.rtg_std);
            let mean = match a.segment {
                Some(seg) => eval_rollout_return(
                    &l.model,
                    &l.stats,
                    &mdp,
                    gamma,
                    tadt_csa::eval::TargetRule::Fixed(target),
                    seg,
                    a.episodes,
                    a.horizon,
                    seed,
                    RewardMode::Mean,
                )?,
                None => {
                    let mut total = 0.0;
                    for ep in 0..a.episodes {
                        let mut env = EnvSim::new(&mdp, seed, ep as u64, RewardMode::Mean);
                        let steps = generate(
                            &l.model, &l.stats, &mut env, gamma, target, mode, a.horizon,
                            seed.wrapping_add(ep as u64), a.sample,
                        )?;
                        total += steps.iter().map(|s| s.reward).sum::<f64>();
                    }
                    total / a.episodes.max(1) as f64
                }
            };
            // Export the first episode's generated sequence.
            let mut env = EnvSim::new(&mdp, seed, 0, RewardMode::Mean);
            let steps = generate(
                &l.model, &l.stats, &mut env, gamma, target, mode, a.horizon, seed, a.sample,
            )?;
            (mean, target, steps)
        }};
    }
    let (mean_return, target, steps) = match dtype.as_str() {
        "f64" => run_rollout!(f64),
        _ => run_rollout!(f32),
    };

    write_snapshot(&a.out_dir, "rollout", &a, seed)?;
    let mut jsonl = String::new();
    for s in &steps {
        jsonl.push_str(&serde_json::to_string(&serde_json::json!({
            "t": s.t, "action": s.action, "rtg": s.rtg, "ta": s.ta,
        }))?);
        jsonl.push('\n');
    }
    std::fs::write(a.out_dir.join("sequences.jsonl"), jsonl)?;
    std::fs::write(
        a.out_dir.join("rollout.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "mean_return": mean_return,
            "episodes": a.episodes,
            "horizon": a.horizon,
            "target_return": target,
            "mode": a.mode,
        }))?,
    )?;
    println!("mean episode return over {} episodes: {mean_return:.4}", a.episodes);
    Ok(())
}

fn cmd_bound_check(a: BoundCheckArgs) -> Result<()> {
    let mdp = TabularMdp::load(&a.mdp)?;
    let report = if a.lossless {
        theorem_bound_check(&mdp, &LosslessAbstraction::new(&mdp), a.seed)?
    } else {
        let ckpt = a.ckpt.as_ref().ok_or_else(|| {
            Error::InvalidParameter("--ckpt is required unless --lossless is set".into())
        })?;
        let dtype = tadt_csa::checkpoint::peek_dtype(ckpt)?;
        let abstraction = match dtype.as_str() {
            "f64" => ModelAbstraction::from_model(&load_checkpoint::<f64>(ckpt)?.model, &mdp)?,
            _ => ModelAbstraction::from_model(&load_checkpoint::<f32>(ckpt)?.model, &mdp)?,
        };
        theorem_bound_check(&mdp, &abstraction, a.seed)?
    };
    write_snapshot(&a.out_dir, "bound-check", &a, a.seed)?;
    std::fs::write(
        a.out_dir.join("bound_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let mut csv = String::from("field,value\n");
    for (k, v) in [
        ("eps_r", report.eps_r),
        ("eps_p", report.eps_p),
        ("covering_radius", report.covering_radius),
        ("kappa_hat", report.kappa_hat),
        ("i_hat", report.i_hat),
        ("value_gap", report.value_gap),
        ("bound_value", report.bound_value),
        ("kappa_min", report.kappa_min),
    ] {
        csv.push_str(&format!("{k},{v}\n"));
    }
    csv.push_str(&format!("holds_with_kappa_hat,{}\n", report.holds_with_kappa_hat));
    std::fs::write(a.out_dir.join("bound_report.csv"), csv)?;
    println!(
        "value_gap {:.6} vs bound {:.6} (eps_r {:.4}, eps_P {:.4}, holds: {})",
        report.value_gap, report.bound_value, report.eps_r, report.eps_p,
        report.holds_with_kappa_hat
    );
    Ok(())
}

fn cmd_stitch(a: StitchArgs) -> Result<()> {
    let chunk_lengths = parse_ks(&a.chunk_lengths)?;
    let base = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => StitchConfig::default().train,
    };
    let mut train_cfg = base.apply_overrides(&a.set)?;
    if let Some(p) = &a.precision {
        train_cfg.precision = p.parse()?;
    }
    if deterministic_mode() {
        train_cfg.workers = 1;
    }
    let cfg = StitchConfig {
        train: train_cfg.clone(),
        chunk_lengths,
        episodes_per_policy: a.episodes_per_policy,
        horizon: a.horizon,
        epsilon_noise: a.epsilon,
        eval_episodes: a.eval_episodes,
        eval_every: a.eval_every,
        seed: a.seed,
    };
    write_snapshot(&a.out_dir, "stitch-exp", &a, a.seed)?;
    let (points, summary) = match train_cfg.precision {
        Precision::Single => stitching_experiment::<f32>(&cfg, &a.out_dir)?,
        Precision::Double => stitching_experiment::<f64>(&cfg, &a.out_dir)?,
    };
    std::fs::write(a.out_dir.join("stitch_curves.csv"), stitch_points_csv(&points))?;
    std::fs::write(
        a.out_dir.join("stitch_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    if a.plot {
        let mut series: Vec<Series> = Vec::new();
        for &chunk in &cfg.chunk_lengths {
            series.push(Series {
                name: format!("chunk {chunk}"),
                points: points
                    .iter()
                    .filter(|p| p.chunk_length == chunk)
                    .map(|p| (p.step as f64, p.mean_return))
                    .collect(),
            });
        }
        series.push(Series {
            name: "optimal".into(),
            points: points
                .iter()
                .map(|p| (p.step as f64, summary.optimal_return))
                .collect(),
        });
        std::fs::write(
            a.out_dir.join("stitch.svg"),
            line_chart("stitching experiment", "step", "mean return", &series),
        )?;
    }
    println!(
        "optimal {:.2}; behaviors {:.2}/{:.2}; final per chunk: {:?}",
        summary.optimal_return,
        summary.behavior_returns[0],
        summary.behavior_returns[1],
        summary.final_returns
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let precisions: Vec<Precision> = match a.precision.as_str() {
        "single" => vec![Precision::Single],
        "double" => vec![Precision::Double],
        "both" => vec![Precision::Single, Precision::Double],
        other => return Err(Error::InvalidParameter(format!("unknown precision '{other}'"))),
    };
    let mut reports = Vec::new();
    let mut all_pass = true;
    for p in precisions {
        let report = full_loss_gradcheck(p, a.seed)?;
        for c in &report.checks {
            println!(
                "[{:?}] {}: rel err {:.3e} (tol {:.0e}) {}",
                p,
                c.name,
                c.max_rel_err,
                c.tol,
                if c.pass { "ok" } else { "FAIL" }
            );
        }
        all_pass &= report.all_pass();
        reports.push(report);
    }
    if let Some(dir) = &a.out_dir {
        write_snapshot(dir, "gradcheck", &a, a.seed)?;
        std::fs::write(dir.join("gradcheck.json"), serde_json::to_string_pretty(&reports)?)?;
    }
    if !all_pass {
        return Err(Error::NonFinite("gradient verification failed".into()));
    }
    Ok(())
}
