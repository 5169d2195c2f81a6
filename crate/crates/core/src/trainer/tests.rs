use super::*;
use crate::envs::EnvKind;
use crate::truncation::TruncationMode;

pub(crate) fn tiny(seed: u64) -> Experiment {
    let mut e = Experiment {
        seed,
        ..Default::default()
    };
    e.env.max_episode_steps = 40;
    e.model = ModelConfig {
        embed_dim: 8,
        hidden: 12,
        deter: 10,
        stoch: 4,
        ..e.model
    };
    e.agent.hidden = 12;
    e.agent.horizon = 4;
    e.trainer = TrainConfig {
        batch_size: 3,
        seq_len: 8,
        total_steps: 6,
        eval_every: 3,
        eval_episodes: 2,
        warmup_episodes: 2,
        buffer_capacity: 1000,
        ..Default::default()
    };
    e.truncation.window = 2;
    e.truncation.tau_back = 1;
    e.truncation.warmup = 0;
    e
}

#[test]
fn episodes_respect_length_and_determinism() {
    let tr = Trainer::new(tiny(1)).unwrap();
    let mut env = Env::new(tr.exp.env.clone()).unwrap();
    let a = run_episode(&mut env, &tr.model, &tr.policy, ActMode::Greedy, 7, &mut seeded(0)).unwrap();
    let b = run_episode(&mut env, &tr.model, &tr.policy, ActMode::Greedy, 7, &mut seeded(5)).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= tr.exp.env.max_episode_steps / tr.exp.env.action_repeat);
    assert!(a.actions.iter().flatten().all(|v| v.abs() < 1.0));
}

#[test]
fn warmup_fills_buffer() {
    let mut tr = Trainer::new(tiny(1)).unwrap();
    assert!(matches!(tr.train_step(), Err(Error::NotReady(_))));
    tr.warmup().unwrap();
    assert!(tr.episodes >= 2);
    assert!(tr.buffer.steps() >= 3 * 8);
}

#[test]
fn identical_seeds_give_identical_reports() {
    let run = |seed| {
        let mut tr = Trainer::new(tiny(seed)).unwrap();
        let mut rows = Vec::new();
        tr.run(&mut |row, _| {
            rows.push(*row);
            Ok(())
        })
        .unwrap();
        rows
    };
    let a = run(3);
    assert_eq!(a.len(), 6);
    assert!(a.windows(2).all(|w| w[0].step < w[1].step));
    assert!(a[2].eval.is_some() && a[1].eval.is_none());
    let b = run(3);
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    assert_ne!(format!("{a:?}"), format!("{:?}", run(4)));
}

#[test]
fn degenerate_config_trains_elbo_only() {
    let mut e = tiny(2);
    e.losses.lambda = 0.0;
    e.truncation.mode = TruncationMode::Off;
    let mut tr = Trainer::new(e).unwrap();
    tr.warmup().unwrap();
    let before = tr.model.store.value(tr.model.reverse.keys()[0]).clone();
    let state = *tr.env.state();
    let r = tr.train_step().unwrap();
    assert_eq!(r.loss.retrace_term, 0.0);
    assert!((r.loss.total - r.loss.elbo_term).abs() < 1e-12);
    assert_eq!(r.loss.masked_fraction, 0.0);
    // Zero retrace weight leaves the reverse-action network untouched.
    assert_eq!(tr.model.store.value(tr.model.reverse.keys()[0]), &before);
    assert_eq!(*tr.env.state(), state);
}

#[test]
fn sub_window_path_runs() {
    let mut e = tiny(2);
    e.trainer.window_len = 5;
    e.truncation.mode = TruncationMode::Both;
    e.truncation.fixed_proportion = 0.3;
    let mut tr = Trainer::new(e).unwrap();
    tr.warmup().unwrap();
    let r = tr.train_step().unwrap();
    assert!(r.loss.total.is_finite());
    assert!(tr.mask_stats.reversible > 0);
}

#[test]
fn running_mean_equals_arithmetic_mean() {
    let g = Graph::new();
    let values = [3.0, -1.0, 4.5, 10.0, 0.25];
    let mut avg = None;
    for (c, v) in values.iter().enumerate() {
        avg = Some(running_mean(&g, avg, g.scalar(*v), c));
    }
    let want = values.iter().sum::<f64>() / values.len() as f64;
    assert!((g.item(avg.unwrap()) - want).abs() < 1e-12);
}

#[test]
fn evaluation_contracts() {
    let tr = Trainer::new(tiny(1)).unwrap();
    let one = tr.evaluate(1, 0).unwrap();
    assert_eq!(one.sd, 0.0);
    assert_eq!(tr.evaluate(3, 9).unwrap(), tr.evaluate(3, 9).unwrap());

    // A fallen cliff walker with zero offset earns nothing, and the episode
    // still runs its full length.
    let mut spec = EnvSpec::cliff_walker();
    spec.max_episode_steps = 60;
    let mut env = Env::new(spec).unwrap();
    env.reset(0);
    assert_eq!(env.spec().kind, EnvKind::CliffWalker1d);
    let mut steps = 0;
    let mut fallen_rewards = Vec::new();
    while !env.is_terminal() {
        let r = env.step(&[1.0]).unwrap();
        steps += 1;
        if r.irreversible_flag {
            fallen_rewards.push(r.reward);
        }
    }
    assert_eq!(steps, 60);
    assert!(!fallen_rewards.is_empty());
    assert!(fallen_rewards.iter().all(|&r| r == 0.0));
}

#[test]
fn welch_matches_hand_formula() {
    // a = [1,2,3], b = [4,5,6]: t = -3 / sqrt(2/3), df = 4.
    let w = welch_one_sided(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    let t = -3.0 / (2.0f64 / 3.0).sqrt();
    assert!((w.t - t).abs() < 1e-12);
    assert!((w.df - 4.0).abs() < 1e-12);
    // Student-t CDF with 4 degrees of freedom in closed form.
    let x = t / (t * t + 4.0).sqrt();
    let cdf = 0.5 + 0.75 * x * (1.0 - x * x / 3.0);
    assert!((w.p - (1.0 - cdf)).abs() < 1e-6);
    let same = welch_one_sided(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
    assert_eq!(same.p, 0.5);
    let flat = welch_one_sided(&[2.0, 2.0], &[2.0, 2.0]).unwrap();
    assert_eq!(flat.p, 0.5);
    assert!(welch_one_sided(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn reward_offset_shifts_returns_exactly() {
    let tr = Trainer::new(tiny(1)).unwrap();
    let offset = 0.5;
    let rows = transfer_eval(
        &tr.model,
        &tr.policy,
        &tr.exp.env,
        &[
            Perturbation::default(),
            Perturbation {
                reward_offset: Some(offset),
                ..Default::default()
            },
        ],
        3,
        11,
        Some((&tr.model, &tr.policy)),
    )
    .unwrap();
    let shift = rows[1].mean - rows[0].mean;
    let want = offset * tr.exp.env.max_episode_steps as f64;
    assert!((shift - want).abs() < 1e-9, "{shift} vs {want}");
    assert!((rows[1].sd - rows[0].sd).abs() < 1e-9);
    assert_eq!(rows[1].p_value, Some(0.5));
}

#[test]
fn rollout_and_latents() {
    let tr = Trainer::new(tiny(1)).unwrap();
    let mse = rollout_error_eval(&tr.model, &tr.policy, &tr.exp.env, 5, 7, 2, 3).unwrap();
    assert_eq!(mse.len(), 7);
    assert_eq!(mse, rollout_error_eval(&tr.model, &tr.policy, &tr.exp.env, 5, 7, 2, 3).unwrap());
    let cos = reverse_action_cosine(&tr.model, &tr.policy, &tr.exp.env, 30, 5).unwrap();
    assert!((-1.0..=1.0).contains(&cos));
    let mut env = Env::new(tr.exp.env.clone()).unwrap();
    let ep = run_episode(&mut env, &tr.model, &tr.policy, ActMode::Random, 1, &mut seeded(1)).unwrap();
    let rows = export_latents(&tr.model, &ep, 2).unwrap();
    assert_eq!(rows.len(), ep.len() - 1);
    assert_eq!(rows[0].posterior.len(), 4);
}

#[test]
fn checkpoint_round_trip() {
    let mut tr = Trainer::new(tiny(5)).unwrap();
    tr.warmup().unwrap();
    tr.train_step().unwrap();
    let bytes = checkpoint::to_bytes(&tr).unwrap();
    let back = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.exp, tr.exp);
    assert_eq!(back.global_step, 1);
    assert_eq!(back.model.store.values(), tr.model.store.values());
    assert_eq!(back.policy.store.values(), tr.policy.store.values());
    assert_eq!(back.model_opt.moments().0, tr.model_opt.moments().0);
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes);
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(checkpoint::from_bytes(b"garbage!").is_err());
}

#[test]
fn invalid_experiments_rejected() {
    let mut e = tiny(0);
    e.truncation.window = 8;
    assert!(matches!(Trainer::new(e), Err(Error::Config { .. })));
    let mut e = tiny(0);
    e.trainer.window_len = 9;
    assert!(Trainer::new(e).is_err());
}
