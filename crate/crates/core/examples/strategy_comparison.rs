//! Final expected oracle reward of reward-ranked selection, random
//! selection (both ρ = 0.5) and full regeneration on the 64 × 32 scenario.
//!
//! `cargo run --release --example strategy_comparison -- [seeds] [lr]`

use regen_core::eval::{expected_reward, sign_test_p_value};
use regen_core::*;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(10, |s| s.parse().expect("seed count"));
    let lr: Option<f64> = args.next().map(|s| s.parse().expect("learning rate"));
    let space = PromptSpace::new(64, 32)?;
    let (mut wins, mut losses) = (0, 0);
    println!("seed,initial,optune,random,full");
    for seed in 0..seeds {
        let config = |strategy, rho| {
            let mut c = ExperimentConfig::new(space, seed);
            c.strategy = strategy;
            c.rho = rho;
            if let Some(lr) = lr {
                c.lr = lr;
            }
            c
        };
        let last = |c: &ExperimentConfig| -> Result<f64> {
            Ok(run_experiment(c)?
                .last()
                .expect("at least one iteration")
                .expected_reward)
        };
        let optune = last(&config(SelectionStrategy::LowestReward, 0.5))?;
        let random = last(&config(SelectionStrategy::Random, 0.5))?;
        let full = last(&config(SelectionStrategy::LowestReward, 1.0))?;
        let env = Environment::build(
            space,
            &ScenarioConfig::default(),
            RewardSourceKind::Oracle,
            seed,
        )?;
        let initial = expected_reward(&env.initial_policy, &env.oracle)?;
        wins += usize::from(optune > random);
        losses += usize::from(optune < random);
        println!("{seed},{initial:.6},{optune:.6},{random:.6},{full:.6}");
    }
    eprintln!(
        "optune beats random in {wins} of {} seeds, sign test p = {:.3e}",
        wins + losses,
        sign_test_p_value(wins, losses)
    );
    Ok(())
}
