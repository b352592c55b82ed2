// Scratch diagnostic: rebuild one experiment seed's pieces and dump the
// per-trajectory score table by label/mode, plus per-step detail for the
// boundary trajectories.

use qoq_core::experiment::ExperimentConfig;
use qoq_core::grad::{build_grad_cache, OporpConfig};
use qoq_core::score::{aggregate_trajectories, step_scores, ScoreMode};
use qoq_core::sim::{generate_dataset, mix_seed, trim_to_contact};
use qoq_core::train::train_bc;

fn main() {
    let seed: u64 = std::env::var("SEED")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);
    let cfg = ExperimentConfig::new(vec![seed]);
    let arch = cfg.arch();
    let tcfg = cfg.train_config(seed);

    let train_ds = generate_dataset(cfg.n_success, cfg.n_fail, &cfg.fail_modes, seed).unwrap();
    let val_raw = generate_dataset(cfg.n_val, 0, &[], mix_seed(seed, 1)).unwrap();
    let val_ds = trim_to_contact(&val_raw).unwrap();
    let (policy, _) = train_bc(&train_ds, &arch, &tcfg).unwrap();

    let input_dim = cfg.mask.param_count(&arch).unwrap();
    let oporp = OporpConfig {
        input_dim,
        sketch_dim: cfg.sketch_dim,
        seed: cfg.oporp_seed,
    };
    let train_cache = build_grad_cache(&policy, &train_ds, cfg.mask, &oporp, true).unwrap();
    let val_cache = build_grad_cache(&policy, &val_ds, cfg.mask, &oporp, true).unwrap();

    let steps = step_scores(&train_cache, &val_cache, ScoreMode::Max).unwrap();
    let trajs = aggregate_trajectories(&steps, &train_ds).unwrap();

    let mut rows: Vec<(f64, u64, String, usize)> = trajs
        .iter()
        .map(|t| {
            let traj = train_ds
                .trajectories
                .iter()
                .find(|x| x.id == t.traj_id)
                .unwrap();
            let mode = traj.meta.get("mode").cloned().unwrap_or_default();
            (t.score, t.traj_id, mode, traj.steps.len())
        })
        .collect();
    rows.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    println!("rank  score      id   mode        len");
    for (i, (score, id, mode, len)) in rows.iter().enumerate() {
        let marker = if i == 59 { " <-- budget cut" } else { "" };
        println!(
            "{:>4}  {:+.5}  {:>3}  {:<10}  {:>3}{}",
            i + 1,
            score,
            id,
            mode,
            len,
            marker
        );
    }

    // Step-mode coverage at matched step budget: how many distinct
    // trajectories the step selection touches vs fully contains.
    {
        let budget: usize = rows
            .iter()
            .take(60)
            .map(|(_, id, _, _)| {
                train_ds
                    .trajectories
                    .iter()
                    .find(|t| t.id == *id)
                    .unwrap()
                    .steps
                    .len()
            })
            .sum();
        let mut by_score: Vec<&qoq_core::score::StepScore> = steps.iter().collect();
        by_score.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut picked: std::collections::BTreeMap<u64, usize> = Default::default();
        for s in by_score.iter().take(budget) {
            *picked.entry(s.traj_id).or_default() += 1;
        }
        let touched = picked.len();
        let contained = picked
            .iter()
            .filter(|(id, n)| {
                train_ds
                    .trajectories
                    .iter()
                    .find(|t| t.id == **id)
                    .unwrap()
                    .steps
                    .len()
                    == **n
            })
            .count();
        println!(
            "\nstep budget {budget}: touched {touched} trajectories, fully contained {contained} (trajectory mode selects 60)"
        );
    }

    // Rollout-as-validation diagnostics: what each side of the weighted
    // formula contributes.
    {
        use qoq_core::data::{Dataset, Label};
        use qoq_core::score::{rollout_weighted_scores, TrajScore, Weighting};
        use qoq_core::sim::rollout_dataset;

        let rollouts = rollout_dataset(&policy, 20, mix_seed(seed, 2), true, true).unwrap();
        let mut pos = Dataset::new(7, 3);
        let mut neg = Dataset::new(7, 3);
        for t in &rollouts.trajectories {
            match t.label {
                Label::Success if pos.trajectories.len() < 5 => {
                    pos.trajectories.push(t.clone())
                }
                Label::Failure => neg.trajectories.push(t.clone()),
                _ => {}
            }
        }
        let pos_steps: usize = pos.trajectories.iter().map(|t| t.steps.len()).sum();
        let neg_steps: usize = neg.trajectories.iter().map(|t| t.steps.len()).sum();
        println!(
            "\nrollouts: {} success kept ({} steps), {} failure ({} steps)",
            pos.trajectories.len(),
            pos_steps,
            neg.trajectories.len(),
            neg_steps
        );
        let pos_cache = build_grad_cache(&policy, &pos, cfg.mask, &oporp, true).unwrap();
        let neg_cache = build_grad_cache(&policy, &neg, cfg.mask, &oporp, true).unwrap();
        let empty = Dataset::new(7, 3);
        let empty_cache = build_grad_cache(&policy, &empty, cfg.mask, &oporp, true).unwrap();

        let acc_of = |scores: &[TrajScore], desc: bool| -> f64 {
            let mut v: Vec<(f64, u64)> = scores.iter().map(|t| (t.score, t.traj_id)).collect();
            v.sort_by(|a, b| {
                if desc {
                    b.0.partial_cmp(&a.0).unwrap()
                } else {
                    a.0.partial_cmp(&b.0).unwrap()
                }
            });
            let experts = v
                .iter()
                .take(60)
                .filter(|(_, id)| {
                    train_ds
                        .trajectories
                        .iter()
                        .find(|t| t.id == *id)
                        .map(|t| t.meta.get("mode").map(String::as_str) == Some("expert"))
                        .unwrap_or(false)
                })
                .count();
            experts as f64 / 60.0
        };

        if !pos.trajectories.is_empty() {
            let s_pos =
                rollout_weighted_scores(&train_cache, &pos_cache, &empty_cache, Weighting::Steps)
                    .unwrap();
            println!("success-only accuracy: {:.4}", acc_of(&s_pos, true));
        }
        let s_neg =
            rollout_weighted_scores(&train_cache, &empty_cache, &neg_cache, Weighting::Steps)
                .unwrap();
        println!(
            "failure-only: picking LEAST failure-like {:.4}, MOST failure-like {:.4}",
            acc_of(&s_neg, true),
            acc_of(&s_neg, false)
        );
        let comb =
            rollout_weighted_scores(&train_cache, &pos_cache, &neg_cache, Weighting::Steps)
                .unwrap();
        println!("weighted accuracy: {:.4}", acc_of(&comb, true));

        for (name, cap) in [("cap5", 5usize), ("cap=n_pos", pos.trajectories.len())] {
            let mut capped = Dataset::new(7, 3);
            for t in neg.trajectories.iter().take(cap) {
                capped.trajectories.push(t.clone());
            }
            let cache = build_grad_cache(&policy, &capped, cfg.mask, &oporp, true).unwrap();
            for (wname, w) in [
                ("steps", Weighting::Steps),
                ("trajs", Weighting::Trajectories),
            ] {
                let c = rollout_weighted_scores(&train_cache, &pos_cache, &cache, w).unwrap();
                println!("weighted[fail {} / {}]: {:.4}", name, wname, acc_of(&c, true));
            }
        }
    }

    // Step-score profile for the best failure and the worst experts.
    let best_fail = rows.iter().find(|r| r.2 != "expert").unwrap();
    let worst_exp = rows.iter().rev().find(|r| r.2 == "expert").unwrap();
    for (tag, id) in [("best-failure", best_fail.1), ("worst-expert", worst_exp.1)] {
        let mut per: Vec<(u32, f64)> = steps
            .iter()
            .filter(|s| s.traj_id == id)
            .map(|s| (s.step_idx, s.score))
            .collect();
        per.sort_by_key(|(i, _)| *i);
        let line: Vec<String> = per.iter().map(|(_, v)| format!("{:+.2}", v)).collect();
        println!("\n{} id={} step scores:\n{}", tag, id, line.join(" "));
    }
}
