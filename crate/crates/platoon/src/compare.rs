//! Policy comparison on platoon rate with percentile-bootstrap intervals.

use platoon_core::episode::Policy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::ResultsTable;

pub const DEFAULT_RESAMPLES: usize = 10_000;

/// Percentile bootstrap interval of the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

/// Resamples `xs` with replacement and returns the central `level` interval
/// of the resampled means.
pub fn bootstrap_mean(xs: &[f64], resamples: usize, level: f64, rng: &mut impl Rng) -> Interval {
    assert!(!xs.is_empty() && resamples > 0);
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| xs[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Interval { mean, low: at(alpha), high: at(1.0 - alpha) }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Better,
    Worse,
    /// Intervals overlap.
    Tie,
}

impl Verdict {
    pub fn of(a: &Interval, b: &Interval) -> Self {
        if a.low > b.high {
            Verdict::Better
        } else if a.high < b.low {
            Verdict::Worse
        } else {
            Verdict::Tie
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyInterval {
    pub policy: Policy,
    pub interval: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pairwise {
    pub a: Policy,
    pub b: Policy,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MprComparison {
    pub mpr: f64,
    pub intervals: Vec<PolicyInterval>,
    pub pairs: Vec<Pairwise>,
    /// Whether the reference ordering cnn_qmix > greedy_rlc >= greedy > mobil
    /// holds among the policies present; `None` with fewer than two of them.
    pub reference_order: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub resamples: usize,
    pub level: f64,
    pub seeds: usize,
    pub mprs: Vec<MprComparison>,
}

impl Comparison {
    pub fn interval(&self, policy: Policy, mpr: f64) -> Option<Interval> {
        self.mprs.iter().find(|m| m.mpr == mpr)?.intervals.iter().find(|i| i.policy == policy).map(|i| i.interval)
    }

    pub fn verdict(&self, a: Policy, b: Policy, mpr: f64) -> Option<Verdict> {
        let m = self.mprs.iter().find(|m| m.mpr == mpr)?;
        Some(Verdict::of(
            &m.intervals.iter().find(|i| i.policy == a)?.interval,
            &m.intervals.iter().find(|i| i.policy == b)?.interval,
        ))
    }
}

/// Best to worst, with `true` marking a strict step to the next entry.
const REFERENCE: [(Policy, bool); 4] =
    [(Policy::CnnQmix, true), (Policy::GreedyRlc, false), (Policy::Greedy, true), (Policy::Mobil, false)];

fn reference_order(intervals: &[PolicyInterval]) -> Option<bool> {
    let find = |p: Policy| intervals.iter().find(|i| i.policy == p).map(|i| i.interval);
    let mut present: Vec<(Interval, bool)> = Vec::new();
    let mut strict_since = false;
    for &(p, strict) in &REFERENCE {
        if let Some(iv) = find(p) {
            present.push((iv, strict_since));
            strict_since = false;
        }
        strict_since |= strict;
    }
    if present.len() < 2 {
        return None;
    }
    Some(present.windows(2).all(|w| {
        let v = Verdict::of(&w[0].0, &w[1].0);
        if w[1].1 {
            v == Verdict::Better
        } else {
            v != Verdict::Worse
        }
    }))
}

/// Compares platoon rates of every policy in `tables` at each penetration
/// rate. All policies must cover the same rates with the same number of seeds.
pub fn compare_policies(tables: &[ResultsTable], resamples: usize, seed: u64) -> Result<Comparison> {
    let mut groups: Vec<(Policy, f64, Vec<f64>)> = Vec::new();
    for t in tables {
        for r in &t.episodes {
            match groups.iter_mut().find(|g| g.0 == r.policy && g.1 == r.mpr) {
                Some(g) => g.2.push(r.platoon_rate),
                None => groups.push((r.policy, r.mpr, vec![r.platoon_rate])),
            }
        }
    }
    let mut policies: Vec<Policy> = Vec::new();
    let mut mprs: Vec<f64> = Vec::new();
    for g in &groups {
        if !policies.contains(&g.0) {
            policies.push(g.0);
        }
        if !mprs.contains(&g.1) {
            mprs.push(g.1);
        }
    }
    if policies.len() < 2 {
        return Err(Error::Spec("comparison needs at least two policies".into()));
    }
    mprs.sort_by(f64::total_cmp);
    let seeds = groups[0].2.len();
    for p in &policies {
        for m in &mprs {
            match groups.iter().find(|g| g.0 == *p && g.1 == *m) {
                None => return Err(Error::Spec(format!("{p} has no results at penetration rate {m}"))),
                Some(g) if g.2.len() != seeds => {
                    return Err(Error::Spec(format!("{p} at {m} has {} seeds, expected {seeds}", g.2.len())))
                }
                _ => {}
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level = 0.95;
    let mprs = mprs
        .iter()
        .map(|&mpr| {
            let intervals: Vec<PolicyInterval> = policies
                .iter()
                .map(|&policy| {
                    let xs = &groups.iter().find(|g| g.0 == policy && g.1 == mpr).unwrap().2;
                    PolicyInterval { policy, interval: bootstrap_mean(xs, resamples, level, &mut rng) }
                })
                .collect();
            let mut pairs = Vec::new();
            for (i, a) in intervals.iter().enumerate() {
                for b in &intervals[i + 1..] {
                    pairs.push(Pairwise { a: a.policy, b: b.policy, verdict: Verdict::of(&a.interval, &b.interval) });
                }
            }
            MprComparison { mpr, reference_order: reference_order(&intervals), intervals, pairs }
        })
        .collect();
    Ok(Comparison { resamples, level, seeds, mprs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(mean: f64, low: f64, high: f64) -> Interval {
        Interval { mean, low, high }
    }

    #[test]
    fn constant_sample_has_degenerate_interval() {
        let i = bootstrap_mean(&[0.5; 20], 500, 0.95, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((i.low, i.mean, i.high), (0.5, 0.5, 0.5));
    }

    #[test]
    fn interval_brackets_mean() {
        let xs: Vec<f64> = (0..50).map(|k| (k % 7) as f64 / 7.0).collect();
        let i = bootstrap_mean(&xs, 2000, 0.95, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(i.low < i.mean && i.mean < i.high);
        // Normal-theory half width is about 1.96 * sd / sqrt(n).
        let sd = (xs.iter().map(|x| (x - i.mean).powi(2)).sum::<f64>() / 49.0).sqrt();
        let half = 1.96 * sd / 50f64.sqrt();
        assert!(((i.high - i.low) / 2.0 - half).abs() < 0.2 * half);
    }

    #[test]
    fn verdicts() {
        assert_eq!(Verdict::of(&iv(0.5, 0.4, 0.6), &iv(0.2, 0.1, 0.3)), Verdict::Better);
        assert_eq!(Verdict::of(&iv(0.2, 0.1, 0.3), &iv(0.5, 0.4, 0.6)), Verdict::Worse);
        assert_eq!(Verdict::of(&iv(0.5, 0.3, 0.6), &iv(0.2, 0.1, 0.3)), Verdict::Tie);
    }

    #[test]
    fn reference_chain_uses_strictness_of_skipped_links() {
        let pi = |policy, interval| PolicyInterval { policy, interval };
        // greedy_rlc tied with greedy is allowed.
        let ok = [
            pi(Policy::GreedyRlc, iv(0.6, 0.5, 0.7)),
            pi(Policy::Greedy, iv(0.55, 0.45, 0.65)),
            pi(Policy::Mobil, iv(0.2, 0.1, 0.3)),
        ];
        assert_eq!(reference_order(&ok), Some(true));
        // greedy_rlc over mobil skips the strict greedy > mobil link.
        let tie = [pi(Policy::GreedyRlc, iv(0.3, 0.2, 0.4)), pi(Policy::Mobil, iv(0.25, 0.15, 0.35))];
        assert_eq!(reference_order(&tie), Some(false));
        assert_eq!(reference_order(&tie[..1]), None);
    }
}
