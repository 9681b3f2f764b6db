//! Evaluation: win score against a baseline under an oracle judge,
//! attribution of reward gains to low- and high-ranked prompts, and the
//! exact KL-regularized objective.

use serde::{Deserialize, Serialize};

use crate::error::{domain, numeric, Result};
use crate::online::IterationRecord;
use crate::policy::{sample_response, GenerationConfig, PolicyParams, PromptId};
use crate::reward::{OracleReward, RewardScorer};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Win,
    Lose,
    Tie,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub verdicts: Vec<Verdict>,
    pub n_win: usize,
    pub n_lose: usize,
    pub n: usize,
}

impl JudgeOutcome {
    pub fn from_verdicts(verdicts: Vec<Verdict>) -> Self {
        let count = |v| verdicts.iter().filter(|&&x| x == v).count();
        let (n_win, n_lose) = (count(Verdict::Win), count(Verdict::Lose));
        let n = verdicts.len();
        Self {
            verdicts,
            n_win,
            n_lose,
            n,
        }
    }

    /// Outcome known only by its counts.
    pub fn from_counts(n_win: usize, n_lose: usize, n: usize) -> Result<Self> {
        if n_win + n_lose > n {
            return Err(domain("n_win + n_lose exceeds n"));
        }
        Ok(Self {
            verdicts: Vec::new(),
            n_win,
            n_lose,
            n,
        })
    }
}

/// `50 + 100·(n_win − n_lose)/n`; 50 is parity with the baseline.
pub fn win_score(outcome: &JudgeOutcome) -> Result<f64> {
    if outcome.n == 0 {
        return Err(domain("win score needs at least one evaluated prompt"));
    }
    if outcome.n_win + outcome.n_lose > outcome.n {
        return Err(domain("n_win + n_lose exceeds n"));
    }
    let diff = outcome.n_win as f64 - outcome.n_lose as f64;
    Ok(50.0 + 100.0 * diff / outcome.n as f64)
}

/// Compares one sampled response from each policy per prompt under the
/// oracle. Each policy's stream is keyed by `(seed, prompt, fingerprint)`,
/// so identical policies draw identical responses and always tie, swapping
/// `a` and `b` swaps wins and losses exactly, and distinct policies sample
/// independently.
pub fn judge_pairwise(
    policy_a: &PolicyParams,
    policy_b: &PolicyParams,
    oracle: &OracleReward,
    prompts: &[PromptId],
    tie_epsilon: f64,
    generation: &GenerationConfig,
    seed: u64,
) -> Result<JudgeOutcome> {
    if policy_a.space() != policy_b.space() || policy_a.space() != oracle.space() {
        return Err(domain(
            "judged policies and oracle must share a prompt space",
        ));
    }
    if !(tie_epsilon >= 0.0) {
        return Err(domain("tie epsilon must be nonnegative"));
    }
    let verdicts = prompts
        .iter()
        .map(|&x| {
            let draw = |policy: &PolicyParams| {
                let mut stream =
                    rng::stream(seed, &[rng::tag::JUDGE, x as u64, policy.fingerprint()]);
                sample_response(policy, x, generation, &mut stream)
            };
            let (ya, yb) = (draw(policy_a)?, draw(policy_b)?);
            let (ra, rb) = (oracle.score(x, ya)?, oracle.score(x, yb)?);
            Ok(if ra > rb + tie_epsilon {
                Verdict::Win
            } else if rb > ra + tie_epsilon {
                Verdict::Lose
            } else {
                Verdict::Tie
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(JudgeOutcome::from_verdicts(verdicts))
}

/// Split of one iteration's reward gain between the prompts that ranked in
/// the bottom and top halves on the previous iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub total_gain: f64,
    pub bottom_half_gain: f64,
    pub top_half_gain: f64,
    /// `None` when the total gain is zero.
    pub bottom_half_share: Option<f64>,
    pub top_half_share: Option<f64>,
}

impl AttributionReport {
    pub fn is_defined(&self) -> bool {
        self.bottom_half_share.is_some()
    }
}

/// Attribution over raw per-prompt chosen rewards. `prev_ranking` lists
/// prompt ids lowest reward first; its first `n/2` entries form the bottom
/// half.
pub fn reward_gain_split(
    prev: &[f64],
    curr: &[f64],
    prev_ranking: &[PromptId],
) -> Result<AttributionReport> {
    let n = prev.len();
    if curr.len() != n || prev_ranking.len() != n {
        return Err(domain("records and ranking must cover the same prompts"));
    }
    let mut seen = vec![false; n];
    for &x in prev_ranking {
        if x >= n || std::mem::replace(&mut seen[x], true) {
            return Err(domain("ranking is not a permutation of the prompt set"));
        }
    }
    let gain = |ids: &[PromptId]| ids.iter().map(|&x| curr[x] - prev[x]).sum::<f64>();
    let (bottom, top) = prev_ranking.split_at(n / 2);
    let (bottom_half_gain, top_half_gain) = (gain(bottom), gain(top));
    let total_gain = bottom_half_gain + top_half_gain;
    let (bottom_half_share, top_half_share) = if total_gain == 0.0 {
        (None, None)
    } else {
        (
            Some(bottom_half_gain / total_gain),
            Some(top_half_gain / total_gain),
        )
    };
    Ok(AttributionReport {
        total_gain,
        bottom_half_gain,
        top_half_gain,
        bottom_half_share,
        top_half_share,
    })
}

pub fn reward_gain_attribution(
    prev: &IterationRecord,
    curr: &IterationRecord,
    prev_ranking: &[PromptId],
) -> Result<AttributionReport> {
    reward_gain_split(
        &prev.per_prompt_chosen_reward,
        &curr.per_prompt_chosen_reward,
        prev_ranking,
    )
}

/// `E_y~π[r*(x, y)]` averaged over prompts, computed exactly.
pub fn expected_reward(policy: &PolicyParams, oracle: &OracleReward) -> Result<f64> {
    if policy.space() != oracle.space() {
        return Err(domain("policy and oracle must share a prompt space"));
    }
    let probs = policy.probabilities();
    let total: f64 = probs
        .rows()
        .into_iter()
        .zip(oracle.table().rows())
        .map(|(p, r)| p.dot(&r))
        .sum();
    Ok(total / policy.space().num_prompts() as f64)
}

/// `E_x[E_y~π[r] − α·KL(π(·|x) ‖ π_ref(·|x))]`, by exact enumeration.
pub fn rl_objective(
    policy: &PolicyParams,
    reference: &PolicyParams,
    oracle: &OracleReward,
    alpha: f64,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(domain("alpha must be positive"));
    }
    let space = policy.space();
    if reference.space() != space || oracle.space() != space {
        return Err(domain(
            "policy, reference and oracle must share a prompt space",
        ));
    }
    let mut total = 0.0;
    for x in 0..space.num_prompts() {
        let lp = policy.log_probs(x)?;
        let lr = reference.log_probs(x)?;
        let mut reward = 0.0;
        let mut kl = 0.0;
        for y in 0..space.responses_per_prompt() {
            let p = lp[y].exp();
            if p == 0.0 {
                continue;
            }
            if lr[y] == f64::NEG_INFINITY {
                return Err(numeric(format!(
                    "policy puts mass on ({x}, {y}) outside the reference support"
                )));
            }
            reward += p * oracle.table()[[x, y]];
            kl += p * (lp[y] - lr[y]);
        }
        total += reward - alpha * kl;
    }
    Ok(total / space.num_prompts() as f64)
}

/// One-sided exact sign test: `P(X ≥ successes)` for `X ~ Bin(n, 1/2)`
/// with `n = successes + failures` (ties excluded by the caller).
pub fn sign_test_p_value(successes: usize, failures: usize) -> f64 {
    let n = successes + failures;
    // log-space binomial coefficients keep this exact enough for n in the thousands
    let ln_choose = |k: usize| -> f64 {
        (1..=k)
            .map(|i| ((n - k + i) as f64).ln() - (i as f64).ln())
            .sum()
    };
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    (successes..=n)
        .map(|k| (ln_choose(k) + ln_half_n).exp())
        .sum::<f64>()
        .min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{optimal_policy, sampling_distribution, PromptSpace};
    use ndarray::{array, Array2};
    use rand::Rng;

    #[test]
    fn win_score_examples() {
        let s = |w, l, n| win_score(&JudgeOutcome::from_counts(w, l, n).unwrap()).unwrap();
        assert_eq!(s(7, 7, 20), 50.0);
        assert_eq!(s(12, 0, 12), 150.0);
        assert_eq!(s(0, 12, 12), -50.0);
        assert!((s(100, 50, 300) - 200.0 / 3.0).abs() < 1e-12);
        assert!(JudgeOutcome::from_counts(3, 3, 5).is_err());
        assert!(win_score(&JudgeOutcome::from_verdicts(vec![])).is_err());
    }

    #[test]
    fn win_score_ignores_prompt_order() {
        let mut v = vec![
            Verdict::Win,
            Verdict::Tie,
            Verdict::Lose,
            Verdict::Win,
            Verdict::Win,
        ];
        let a = win_score(&JudgeOutcome::from_verdicts(v.clone())).unwrap();
        v.reverse();
        assert_eq!(a, win_score(&JudgeOutcome::from_verdicts(v)).unwrap());
    }

    fn random_policy(r: &mut impl Rng, n: usize, k: usize, scale: f64) -> PolicyParams {
        PolicyParams::new(Array2::from_shape_fn((n, k), |_| {
            r.random_range(-scale..scale)
        }))
        .unwrap()
    }

    #[test]
    fn self_comparison_is_parity() {
        let mut r = rng::stream(4, &[]);
        let oracle =
            OracleReward::new(Array2::from_shape_fn((6, 5), |_| r.random_range(0.0..1.0))).unwrap();
        let p = random_policy(&mut r, 6, 5, 2.0);
        let prompts: Vec<_> = (0..6).collect();
        let out = judge_pairwise(
            &p,
            &p,
            &oracle,
            &prompts,
            0.0,
            &GenerationConfig::default(),
            9,
        )
        .unwrap();
        assert_eq!(out.n_win + out.n_lose, 0);
        assert_eq!(win_score(&out).unwrap(), 50.0);
    }

    #[test]
    fn argmax_beats_argmin() {
        let oracle = OracleReward::new(array![[0.1, 0.9, 0.5], [2.0, -1.0, 0.0]]).unwrap();
        let best = PolicyParams::new(array![[-50.0, 50.0, -50.0], [50.0, -50.0, -50.0]]).unwrap();
        let worst = PolicyParams::new(array![[50.0, -50.0, -50.0], [-50.0, 50.0, -50.0]]).unwrap();
        let out = judge_pairwise(
            &best,
            &worst,
            &oracle,
            &[0, 1],
            0.0,
            &GenerationConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(win_score(&out).unwrap(), 150.0);
    }

    #[test]
    fn judge_is_antisymmetric() {
        let mut r = rng::stream(5, &[]);
        let oracle =
            OracleReward::new(Array2::from_shape_fn((20, 4), |_| r.random_range(0.0..1.0)))
                .unwrap();
        let a = random_policy(&mut r, 20, 4, 1.5);
        let b = random_policy(&mut r, 20, 4, 1.5);
        let prompts: Vec<_> = (0..20).collect();
        let g = GenerationConfig::default();
        for seed in 0..10 {
            let ab = judge_pairwise(&a, &b, &oracle, &prompts, 0.05, &g, seed).unwrap();
            let ba = judge_pairwise(&b, &a, &oracle, &prompts, 0.05, &g, seed).unwrap();
            assert_eq!((ab.n_win, ab.n_lose), (ba.n_lose, ba.n_win));
        }
    }

    #[test]
    fn judged_win_rate_matches_enumeration() {
        let mut r = rng::stream(6, &[]);
        let oracle =
            OracleReward::new(Array2::from_shape_fn((3, 4), |_| r.random_range(0.0..1.0))).unwrap();
        let a = random_policy(&mut r, 3, 4, 1.0);
        let b = random_policy(&mut r, 3, 4, 1.0);
        let g = GenerationConfig::default();
        let eps = 0.05;
        // exhaustive: Σ pa(ya)·pb(yb)·1[win] over the grid, averaged over prompts
        let mut exact = 0.0;
        for x in 0..3 {
            let (pa, pb) = (
                sampling_distribution(&a, x, &g).unwrap(),
                sampling_distribution(&b, x, &g).unwrap(),
            );
            for ya in 0..4 {
                for yb in 0..4 {
                    if oracle.table()[[x, ya]] > oracle.table()[[x, yb]] + eps {
                        exact += pa[ya] * pb[yb] / 3.0;
                    }
                }
            }
        }
        let trials = 10_000u64;
        let wins: usize = (0..trials)
            .map(|s| {
                judge_pairwise(&a, &b, &oracle, &[0, 1, 2], eps, &g, 1000 + s)
                    .unwrap()
                    .n_win
            })
            .sum();
        let rate = wins as f64 / (3 * trials) as f64;
        assert!((rate - exact).abs() < 0.01, "mc {rate} exact {exact}");
    }

    #[test]
    fn attribution_examples() {
        let prev = [0.1, 0.5, 0.9, 0.3];
        let ranking = [0, 3, 1, 2];
        let flat = reward_gain_split(&prev, &prev, &ranking).unwrap();
        assert!(!flat.is_defined());
        assert_eq!(flat.total_gain, 0.0);
        let curr = [0.6, 0.5, 0.9, 0.4];
        let rep = reward_gain_split(&prev, &curr, &ranking).unwrap();
        assert_eq!(rep.bottom_half_share, Some(1.0));
        assert_eq!(rep.top_half_share, Some(0.0));
        assert!(reward_gain_split(&prev, &curr, &[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn attribution_shares_sum_to_one() {
        let mut r = rng::stream(8, &[]);
        for _ in 0..1000 {
            let n = r.random_range(1..30);
            let prev: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let curr: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let mut ranking: Vec<usize> = (0..n).collect();
            ranking.sort_by(|&a, &b| prev[a].total_cmp(&prev[b]));
            let rep = reward_gain_split(&prev, &curr, &ranking).unwrap();
            // independent recomputation of the split
            let bottom: f64 = ranking[..n / 2].iter().map(|&x| curr[x] - prev[x]).sum();
            let total: f64 = (0..n).map(|x| curr[x] - prev[x]).sum();
            assert!((rep.bottom_half_gain - bottom).abs() < 1e-12);
            assert!((rep.total_gain - total).abs() < 1e-12);
            if let (Some(b), Some(t)) = (rep.bottom_half_share, rep.top_half_share) {
                assert!((b + t - 1.0).abs() < 1e-9 || rep.total_gain.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn objective_examples() {
        let oracle =
            OracleReward::new(array![[1.0, 0.0, 0.5, 2.0], [0.2, 0.4, -1.0, 0.0]]).unwrap();
        let reference =
            PolicyParams::new(array![[0.3, -0.1, 0.0, 0.5], [1.0, 0.0, 0.2, -0.3]]).unwrap();
        let at_ref = rl_objective(&reference, &reference, &oracle, 0.7).unwrap();
        assert!((at_ref - expected_reward(&reference, &oracle).unwrap()).abs() < 1e-15);

        let uniform = PolicyParams::uniform(PromptSpace::new(2, 4).unwrap());
        let point = PolicyParams::new(array![
            [0.0, -800.0, -800.0, -800.0],
            [-800.0, -800.0, 0.0, -800.0]
        ])
        .unwrap();
        let alpha = 0.3;
        let expected = (1.0 + -1.0) / 2.0 - alpha * 4f64.ln();
        assert!((rl_objective(&point, &uniform, &oracle, alpha).unwrap() - expected).abs() < 1e-12);
        assert!(rl_objective(&point, &uniform, &oracle, 0.0).is_err());
    }

    #[test]
    fn closed_form_beats_random_policies() {
        let mut r = rng::stream(10, &[]);
        let oracle =
            OracleReward::new(Array2::from_shape_fn((4, 4), |_| r.random_range(-1.0..1.0)))
                .unwrap();
        let reference = random_policy(&mut r, 4, 4, 1.0);
        let alpha = 0.5;
        let best = optimal_policy(&reference, oracle.table(), alpha).unwrap();
        let top = rl_objective(&best, &reference, &oracle, alpha).unwrap();
        for _ in 0..2000 {
            let p = random_policy(&mut r, 4, 4, 4.0);
            assert!(top - rl_objective(&p, &reference, &oracle, alpha).unwrap() >= -1e-9);
        }
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p_value(9, 1) - 11.0 / 1024.0).abs() < 1e-12);
        assert!((sign_test_p_value(8, 2) - 56.0 / 1024.0).abs() < 1e-12);
        assert!((sign_test_p_value(0, 5) - 1.0).abs() < 1e-12);
        assert!((sign_test_p_value(10, 0) - 1.0 / 1024.0).abs() < 1e-15);
    }
}
