use qoq_core::data::load_dataset;
use qoq_core::policy::MlpPolicy;
use qoq_core::sim::{env_step, is_success, mix_seed, sample_start, PointBinAction, MAX_STEPS};

fn main() {
    let ckpt = std::env::var("CKPT").unwrap_or("/tmp/calib/long.ckpt".into());
    let (policy, _) = MlpPolicy::load(&ckpt).unwrap();
    let ds = load_dataset("/tmp/calib/clean.jsonl").unwrap();
    println!("log_std: {:?}", policy.log_std());

    let mut acc: std::collections::BTreeMap<&str, ([f64; 3], usize)> = Default::default();
    for traj in &ds.trajectories {
        for step in &traj.steps {
            let s = &step.state;
            let d_go = ((s[0] - s[3]).powi(2) + (s[1] - s[4]).powi(2)).sqrt();
            let d_og = ((s[3] - s[5]).powi(2) + (s[4] - s[6]).powi(2)).sqrt();
            let holding = s[2] >= 0.5;
            let phase = if holding {
                "transport"
            } else if d_og <= 0.05 {
                "epilogue"
            } else if d_go <= 0.3 {
                "closing"
            } else {
                "approach"
            };
            let mu = policy.mean(s).unwrap();
            let e = acc.entry(phase).or_insert(([0.0; 3], 0));
            for d in 0..3 {
                e.0[d] += (mu[d] - step.action[d]).abs();
            }
            e.1 += 1;
        }
    }
    for (phase, (sums, n)) in acc {
        println!(
            "{phase:10} n={n:5}  |dx|={:.4} |dy|={:.4} |grip|={:.4}",
            sums[0] / n as f64,
            sums[1] / n as f64,
            sums[2] / n as f64
        );
    }

    let mut n_success = 0;
    let mut n_never_grasp = 0;
    let mut n_held_at_end = 0;
    let mut n_dropped_off = 0;
    let mut first_fail = None;
    for e in 0..50u64 {
        let mut state = sample_start(mix_seed(123, e));
        let mut held_ever = false;
        let mut succ = false;
        for _ in 0..MAX_STEPS {
            if is_success(&state) {
                succ = true;
                break;
            }
            let a = policy.mean(&state.to_vec()).unwrap();
            state = env_step(&state, &PointBinAction::from_vec(&a).unwrap()).unwrap();
            held_ever |= state.holding;
        }
        if succ {
            n_success += 1;
        } else {
            if first_fail.is_none() {
                first_fail = Some(e);
            }
            if !held_ever {
                n_never_grasp += 1;
            } else if state.holding {
                n_held_at_end += 1;
            } else {
                n_dropped_off += 1;
            }
        }
    }
    println!(
        "success {n_success}/50  never_grasp {n_never_grasp}  stuck_holding {n_held_at_end}  dropped_off {n_dropped_off}"
    );

    if let Some(e) = first_fail {
        let mut state = sample_start(mix_seed(123, e));
        println!("--- trace of failing episode {e} ---");
        for t in 0..MAX_STEPS {
            if is_success(&state) {
                break;
            }
            let a = policy.mean(&state.to_vec()).unwrap();
            if t % 5 == 0 || t < 6 {
                let d_go = ((state.gripper[0] - state.object[0]).powi(2)
                    + (state.gripper[1] - state.object[1]).powi(2))
                .sqrt();
                println!(
                    "t={t:3} d(g,o)={d_go:.3} hold={} obj=({:.2},{:.2}) goal=({:.2},{:.2}) a=[{:+.3},{:+.3},{:.2}]",
                    state.holding as u8, state.object[0], state.object[1],
                    state.goal[0], state.goal[1], a[0], a[1], a[2]
                );
            }
            state = env_step(&state, &PointBinAction::from_vec(&a).unwrap()).unwrap();
            if t > 60 {
                break;
            }
        }
    }

    // Learned vector field around a fixed object/goal pair.
    let obj = [0.81f64, 0.19];
    let goal = [0.14f64, 0.38];
    for r in [0.05f64, 0.1, 0.15, 0.2, 0.3] {
        let mut line = format!("r={r:.2}:");
        for k in 0..8 {
            let th = std::f64::consts::TAU * k as f64 / 8.0;
            let g = [obj[0] + r * th.cos(), obj[1] + r * th.sin()];
            if !(0.0..=1.0).contains(&g[0]) || !(0.0..=1.0).contains(&g[1]) {
                line.push_str("    .    ");
                continue;
            }
            let s = vec![g[0], g[1], 0.0, obj[0], obj[1], goal[0], goal[1]];
            let mu = policy.mean(&s).unwrap();
            let to_obj = [obj[0] - g[0], obj[1] - g[1]];
            let dot = mu[0] * to_obj[0] + mu[1] * to_obj[1];
            let nm = (mu[0] * mu[0] + mu[1] * mu[1]).sqrt();
            let nt = (to_obj[0] * to_obj[0] + to_obj[1] * to_obj[1]).sqrt();
            let cos = if nm > 1e-9 { dot / (nm * nt) } else { 0.0 };
            line.push_str(&format!(" |d|={nm:.3},c={cos:+.1},g={:.1}", mu[2]));
        }
        println!("{line}");
    }
}
