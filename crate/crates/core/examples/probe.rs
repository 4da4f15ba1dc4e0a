use prefpoe::trainer::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let env = args.get(1).cloned().unwrap_or("cartpole".into());
    let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30_000);
    let mode = match args.get(3).map(|s| s.as_str()) {
        Some("ppo") => Mode::PpoBaseline,
        Some("linear") => Mode::LinearFusionAblation,
        _ => Mode::Prefpoe,
    };
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = TrainConfig {
        env: env.clone(),
        total_steps: steps,
        rollout_horizon: if args.get(6).map(|s| s.as_str()) == Some("wide") { 2048 } else { 512 },
        num_envs: if args.get(6).map(|s| s.as_str()) == Some("wide") { 1 } else { 4 },
        mode,
        seed,
        ..TrainConfig::default()
    };
    if args.get(6).map(|s| s.as_str()) == Some("entfused") {
        cfg.entropy_bonus = EntropyBonus::Fused;
    }
    let t0 = Instant::now();
    let mut trainer = Trainer::new(cfg).unwrap();
    let records = trainer.run(|_| Ok(())).unwrap();
    let train_time = t0.elapsed();
    let last = records.last().unwrap();
    let policy = if args.get(5).map(|s| s.as_str()) == Some("main") { EvalPolicy::Main } else { EvalPolicy::Fused };
    let opts = EvalOptions { episodes: 100, deterministic: true, seed: 10_000 + seed, policy };
    let stats = evaluate(&trainer.net, &env, mode, 0.5, &opts).unwrap();
    let stoch = EvalOptions { episodes: 100, deterministic: false, seed: 10_000 + seed, policy };
    let stoch_stats = evaluate(&trainer.net, &env, mode, 0.5, &stoch).unwrap();
    println!(
        "env={env} mode={mode:?} seed={seed} steps={steps} train_time={train_time:?} last_train_ret={:?} eval_mean={:.2} eval_std={:.2} stoch_mean={:.2} H_main={:.3} H_fused={:.3}",
        last.episodic_return.mean, stats.mean, stats.std, stoch_stats.mean, last.entropies.main, last.entropies.fused
    );
}
