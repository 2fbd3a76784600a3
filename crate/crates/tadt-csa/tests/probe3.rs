use tadt_csa::env::*;
use tadt_csa::eval::{best_target_by_state, eval_rollout_return, lookup_target, TargetRule};
use tadt_csa::experiments::*;
use tadt_csa::model::{predict_action, InferenceContext};
use tadt_csa::train::*;

#[test]
#[ignore]
fn probe_grid() {
    let cfg = StitchConfig {
        episodes_per_policy: 30,
        horizon: 200,
        epsilon_noise: 0.05,
        eval_episodes: 5,
        eval_every: 100000,
        seed: 0,
        ..Default::default()
    };
    let (mdp, _pa, _pb, trajs, meta) = stitching_dataset(&cfg).unwrap();
    let (_, greedy) = value_iteration(&mdp, 1e-10).unwrap();
    let optimal = expected_return(&mdp, &greedy, 200).unwrap();
    let chunks = chunk_trajectories(&trajs, 1.0, 30).unwrap();
    let targets = best_target_by_state(&chunks);
    let adv: Vec<usize> = (0..mdp.n_states)
        .map(|s| {
            (0..2)
                .find(|&a| {
                    let nxt = (s + 1).min(mdp.n_states - 1);
                    nxt != s && mdp.transition[s][a][nxt] > 0.5
                })
                .unwrap_or(0)
        })
        .collect();

    let mut tc = cfg.train.clone();
    tc.t_max = 30;
    tc.epochs = 60;
    tc.lr = 0.01;
    tc.codebook_size = 16;
    tc.seed = 0;
    let out: TrainOutcome<f32> = train(&tc, &trajs, &meta, None).unwrap();
    for r in out.log.records.iter().step_by(300) {
        println!(
            "step {:4} action {:.3} rank {:.3} ret {:.3}",
            r.step, r.losses.action, r.losses.rank, r.losses.ret
        );
    }
    let last = out.log.records.last().unwrap();
    println!("final: action {:.3}", last.losses.action);

    // P(advance | state, target) for fresh single-step contexts.
    for s in 0..mdp.n_states {
        let mut line = format!("state {s} (adv={}, best={:4.1}): ", adv[s], lookup_target(&targets, &mdp.state_features[s]));
        for target in [2.0, 6.0, 10.0, 14.0, 18.0] {
            let ctx = InferenceContext {
                rtg: vec![target],
                ta: vec![0.0],
                states: vec![mdp.state_features[s].clone()],
                actions: vec![],
            };
            let p = predict_action(&out.model, &out.stats, &ctx).unwrap();
            line.push_str(&format!("{:4.2} ", p[adv[s]]));
        }
        println!("{line}");
    }
    let tf = |obs: &[f64]| lookup_target(&targets, obs);
    let ret = eval_rollout_return(
        &out.model, &out.stats, &mdp, 1.0, TargetRule::PerState(&tf), 30, 5, 200, 99,
        RewardMode::Mean,
    )
    .unwrap();
    println!("rollout {ret:.1} / {optimal:.1} = {:.0}%", 100.0 * ret / optimal);
}
