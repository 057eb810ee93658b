//! Group-level reward calculus.
//!
//! The group success rate `s_q` is the policy's own difficulty signal. It is
//! mapped to two non-negative gates: `w_easy` switches on a length penalty
//! once `s_q > tau_easy`, `w_hard` switches on a correctness-gated length
//! bonus once `s_q < tau_hard`. Lengths enter through a group-normalized
//! z-score squashed by a sigmoid, so the shaping is scale-free across prompts.
//!
//! The uniform length penalty (`vlp`), the success-gated truncation penalty
//! (`asrr`) and the target-length penalty (`l1`) are provided as baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::sig9;
use crate::scalar::{mean, sigmoid, Scalar};

/// `G` sampled outputs for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub lengths: Vec<u64>,
    #[serde(rename = "base")]
    pub base_rewards: Vec<u8>,
}

impl RolloutGroup {
    pub fn new(lengths: Vec<u64>, base_rewards: Vec<u8>) -> Result<Self> {
        let group = Self {
            lengths,
            base_rewards,
        };
        group.validate()?;
        Ok(group)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths.len() != self.base_rewards.len() {
            return Err(Error::InvalidGroup(format!(
                "{} lengths but {} base rewards",
                self.lengths.len(),
                self.base_rewards.len()
            )));
        }
        if self.lengths.len() < 2 {
            return Err(Error::InvalidGroup(format!(
                "group size must be at least 2, got {}",
                self.lengths.len()
            )));
        }
        if self.lengths.iter().any(|&n| n == 0) {
            return Err(Error::InvalidGroup("every length must be >= 1".into()));
        }
        if self.base_rewards.iter().any(|&r| r > 1) {
            return Err(Error::InvalidGroup("base rewards must be 0 or 1".into()));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.lengths.len()
    }

    fn base<T: Scalar>(&self, i: usize) -> T {
        if self.base_rewards[i] == 1 {
            T::one()
        } else {
            T::zero()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Coda,
    Grpo,
    Vlp,
    Asrr,
    L1,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::Coda,
        SchemeKind::Grpo,
        SchemeKind::Vlp,
        SchemeKind::Asrr,
        SchemeKind::L1,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::Coda => "coda",
            SchemeKind::Grpo => "grpo",
            SchemeKind::Vlp => "vlp",
            SchemeKind::Asrr => "asrr",
            SchemeKind::L1 => "l1",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("scheme.kind", format!("unknown scheme `{s}`")))
    }
}

/// Which reward rule applies, with the hyperparameters of every rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapingScheme<T> {
    pub kind: SchemeKind,
    /// Easy-side penalty strength.
    pub alpha: T,
    /// Hard-side bonus strength.
    pub beta: T,
    pub tau_easy: T,
    pub tau_hard: T,
    pub gamma_vlp: T,
    pub asrr_tau: T,
    pub asrr_zeta: T,
    pub asrr_window: u64,
    pub asrr_epsilon: T,
    pub l1_eta: T,
    /// Fixed target length; when absent, training draws one per group from
    /// `l1_min..=l1_max`.
    pub l1_target: Option<u64>,
    pub l1_min: u64,
    pub l1_max: u64,
    pub norm_epsilon: T,
    /// Ablation: pay the hard-side length bonus to incorrect rollouts too.
    pub bonus_on_incorrect: bool,
}

impl<T: Scalar> Default for ShapingScheme<T> {
    fn default() -> Self {
        Self {
            kind: SchemeKind::Coda,
            alpha: T::lit(0.2),
            beta: T::lit(0.2),
            tau_easy: T::lit(0.75),
            tau_hard: T::lit(0.25),
            gamma_vlp: T::lit(0.1),
            asrr_tau: T::lit(0.75),
            asrr_zeta: T::lit(0.5),
            asrr_window: 2000,
            asrr_epsilon: T::lit(1e-6),
            l1_eta: T::lit(0.0003),
            l1_target: None,
            l1_min: 128,
            l1_max: 10_000,
            norm_epsilon: T::lit(1e-6),
            bonus_on_incorrect: false,
        }
    }
}

impl<T: Scalar> ShapingScheme<T> {
    pub fn new(kind: SchemeKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Checks every field; the error path is relative to the scheme block.
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma_vlp", self.gamma_vlp),
            ("asrr_zeta", self.asrr_zeta),
            ("l1_eta", self.l1_eta),
        ];
        for (name, v) in non_negative {
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(Error::config(name, format!("must be >= 0, got {v}")));
            }
        }
        if !(self.tau_easy > T::zero() && self.tau_easy <= T::one()) {
            return Err(Error::config("tau_easy", "must lie in (0, 1]"));
        }
        if !(self.tau_hard >= T::zero() && self.tau_hard < T::one()) {
            return Err(Error::config("tau_hard", "must lie in [0, 1)"));
        }
        if self.tau_easy <= self.tau_hard {
            return Err(Error::config(
                "tau_easy",
                format!(
                    "thresholds must satisfy tau_easy > tau_hard, got tau_easy={} tau_hard={}",
                    self.tau_easy, self.tau_hard
                ),
            ));
        }
        if !(self.asrr_tau > T::zero() && self.asrr_tau <= T::one()) {
            return Err(Error::config("asrr_tau", "must lie in (0, 1]"));
        }
        if self.asrr_window == 0 {
            return Err(Error::config("asrr_window", "must be >= 1"));
        }
        for (name, v) in [
            ("asrr_epsilon", self.asrr_epsilon),
            ("norm_epsilon", self.norm_epsilon),
        ] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::config(name, "must be a small positive number"));
            }
        }
        if self.l1_min > self.l1_max {
            return Err(Error::config("l1_min", "must not exceed l1_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateWeights<T> {
    pub success_rate: T,
    pub w_easy: T,
    pub w_hard: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapedRewards<T> {
    pub rewards: Vec<T>,
    pub advantages: Vec<T>,
    pub gates: GateWeights<T>,
}

impl<T: Scalar> ShapedRewards<T> {
    /// One JSON object with every float at nine significant digits:
    /// `{"rewards":[..],"advantages":[..],"s_q":s,"w_easy":e,"w_hard":h}`.
    pub fn to_json_line(&self) -> String {
        let num = |x: T| sig9(x.to_f64().expect("finite scalar"));
        let list = |xs: &[T]| xs.iter().map(|&x| num(x)).collect::<Vec<_>>().join(",");
        format!(
            "{{\"rewards\":[{}],\"advantages\":[{}],\"s_q\":{},\"w_easy\":{},\"w_hard\":{}}}",
            list(&self.rewards),
            list(&self.advantages),
            num(self.gates.success_rate),
            num(self.gates.w_easy),
            num(self.gates.w_hard),
        )
    }

    fn from_rewards(rewards: Vec<T>, gates: GateWeights<T>) -> Self {
        let advantages = advantages(&rewards);
        Self {
            rewards,
            advantages,
            gates,
        }
    }
}

/// Fraction of correct rollouts in the group.
pub fn success_rate<T: Scalar>(group: &RolloutGroup) -> T {
    let correct = group.base_rewards.iter().filter(|&&r| r == 1).count();
    T::from_usize(correct).expect("count fits") / T::from_usize(group.group_size()).expect("size fits")
}

pub fn gates<T: Scalar>(success_rate: T, scheme: &ShapingScheme<T>) -> GateWeights<T> {
    let w_easy = ((success_rate - scheme.tau_easy) / (T::one() - scheme.tau_easy)).max(T::zero());
    let w_hard = ((scheme.tau_hard - success_rate) / scheme.tau_hard).max(T::zero());
    GateWeights {
        success_rate,
        w_easy,
        // tau_hard = 0 gives 0/0 at s_q = 0; the hard regime is empty then.
        w_hard: if w_hard.is_nan() { T::zero() } else { w_hard },
    }
}

/// Within-group z-score of each length, using the population standard deviation.
pub fn normalized_lengths<T: Scalar>(group: &RolloutGroup, norm_epsilon: T) -> Vec<T> {
    let lengths: Vec<T> = group.lengths.iter().map(|&n| T::from_tokens(n)).collect();
    let mu = mean(&lengths);
    let var = lengths.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>()
        / T::from_usize(lengths.len()).expect("size fits");
    let denom = var.sqrt() + norm_epsilon;
    lengths.iter().map(|&x| (x - mu) / denom).collect()
}

pub fn normalized_length<T: Scalar>(group: &RolloutGroup, index: usize, norm_epsilon: T) -> T {
    normalized_lengths(group, norm_epsilon)[index]
}

/// Group-relative advantages: each reward minus the group mean.
pub fn advantages<T: Scalar>(rewards: &[T]) -> Vec<T> {
    let mu = mean(rewards);
    rewards.iter().map(|&r| r - mu).collect()
}

/// Applies whichever rule `scheme.kind` selects.
///
/// `l1` needs `scheme.l1_target`; use [`shape_l1`] to pass a per-group target.
pub fn shape<T: Scalar>(group: &RolloutGroup, scheme: &ShapingScheme<T>) -> Result<ShapedRewards<T>> {
    Ok(match scheme.kind {
        SchemeKind::Coda => shape_coda(group, scheme),
        SchemeKind::Grpo => shape_grpo(group, scheme),
        SchemeKind::Vlp => shape_vlp(group, scheme),
        SchemeKind::Asrr => shape_asrr(group, scheme),
        SchemeKind::L1 => {
            let target = scheme.l1_target.ok_or_else(|| {
                Error::config("scheme.l1_target", "the l1 scheme needs a target length")
            })?;
            shape_l1(group, scheme, target)
        }
    })
}

fn group_gates<T: Scalar>(group: &RolloutGroup, scheme: &ShapingScheme<T>) -> GateWeights<T> {
    gates(success_rate(group), scheme)
}

/// Plain binary reward.
pub fn shape_grpo<T: Scalar>(group: &RolloutGroup, scheme: &ShapingScheme<T>) -> ShapedRewards<T> {
    let rewards = (0..group.group_size()).map(|i| group.base(i)).collect();
    ShapedRewards::from_rewards(rewards, group_gates(group, scheme))
}

/// Dual-gated shaping: `r = base * (1 + (beta*w_hard - alpha*w_easy) * sigmoid(z))`.
///
/// With `bonus_on_incorrect`, incorrect rollouts additionally earn
/// `beta * w_hard * sigmoid(z)`.
pub fn shape_coda<T: Scalar>(group: &RolloutGroup, scheme: &ShapingScheme<T>) -> ShapedRewards<T> {
    let g = group_gates(group, scheme);
    let gate = scheme.beta * g.w_hard - scheme.alpha * g.w_easy;
    let bonus = scheme.beta * g.w_hard;
    let z = normalized_lengths(group, scheme.norm_epsilon);
    let rewards = z
        .iter()
        .enumerate()
        .map(|(i, &zi)| {
            let s = sigmoid(zi);
            let base = group.base::<T>(i);
            let shaped = base * (T::one() + gate * s);
            if scheme.bonus_on_incorrect && group.base_rewards[i] == 0 {
                shaped + bonus * s
            } else {
                shaped
            }
        })
        .collect();
    ShapedRewards::from_rewards(rewards, g)
}

/// Uniform length penalty `r = base * (1 - gamma * sigmoid(z))`.
pub fn shape_vlp<T: Scalar>(group: &RolloutGroup, scheme: &ShapingScheme<T>) -> ShapedRewards<T> {
    let z = normalized_lengths(group, scheme.norm_epsilon);
    let rewards = z
        .iter()
        .enumerate()
        .map(|(i, &zi)| group.base::<T>(i) * (T::one() - scheme.gamma_vlp * sigmoid(zi)))
        .collect();
    ShapedRewards::from_rewards(rewards, group_gates(group, scheme))
}

/// Success-gated penalty on the excess over the shortest correct rollout.
///
/// Groups without a correct rollout get no penalty.
pub fn shape_asrr<T: Scalar>(group: &RolloutGroup, scheme: &ShapingScheme<T>) -> ShapedRewards<T> {
    let g = group_gates(group, scheme);
    let eps = scheme.asrr_epsilon;
    let gate = (g.success_rate - scheme.asrr_tau + eps).max(T::zero())
        / (T::one() - scheme.asrr_tau + eps);
    let shortest_correct = group
        .lengths
        .iter()
        .zip(&group.base_rewards)
        .filter(|(_, &r)| r == 1)
        .map(|(&n, _)| n)
        .min();
    let window = T::from_tokens(scheme.asrr_window);
    let rewards = (0..group.group_size())
        .map(|i| {
            let base = group.base::<T>(i);
            match shortest_correct {
                Some(short) => {
                    let excess = (T::from_tokens(group.lengths[i]) - T::from_tokens(short)) / window;
                    let excess = excess.max(T::zero()).min(T::one());
                    base - scheme.asrr_zeta * gate * excess
                }
                None => base,
            }
        })
        .collect();
    ShapedRewards::from_rewards(rewards, g)
}

/// Target-length penalty `r = base - eta * |target - n|`.
pub fn shape_l1<T: Scalar>(
    group: &RolloutGroup,
    scheme: &ShapingScheme<T>,
    target: u64,
) -> ShapedRewards<T> {
    let rewards = group
        .lengths
        .iter()
        .enumerate()
        .map(|(i, &n)| group.base::<T>(i) - scheme.l1_eta * T::from_tokens(target.abs_diff(n)))
        .collect();
    ShapedRewards::from_rewards(rewards, group_gates(group, scheme))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn group(lengths: &[u64], base: &[u8]) -> RolloutGroup {
        RolloutGroup::new(lengths.to_vec(), base.to_vec()).unwrap()
    }

    fn scheme(kind: SchemeKind) -> ShapingScheme<f64> {
        ShapingScheme::new(kind)
    }

    #[test]
    fn group_validation() {
        assert!(RolloutGroup::new(vec![10], vec![1]).is_err());
        assert!(RolloutGroup::new(vec![10, 0], vec![1, 1]).is_err());
        assert!(RolloutGroup::new(vec![10, 20], vec![1, 2]).is_err());
        assert!(RolloutGroup::new(vec![10, 20, 30], vec![1, 1]).is_err());
    }

    #[test]
    fn success_rate_examples() {
        assert_eq!(success_rate::<f64>(&group(&[1; 4], &[1, 0, 1, 1])), 0.75);
        assert_eq!(success_rate::<f64>(&group(&[1; 4], &[0; 4])), 0.0);
        assert_eq!(success_rate::<f64>(&group(&[1; 8], &[1, 1, 1, 1, 1, 1, 1, 0])), 0.875);
    }

    #[test]
    fn gate_examples() {
        let s = scheme(SchemeKind::Coda);
        let g = gates(1.0, &s);
        assert_eq!((g.w_easy, g.w_hard), (1.0, 0.0));
        let g = gates(0.5, &s);
        assert_eq!((g.w_easy, g.w_hard), (0.0, 0.0));
        let g = gates(0.875, &s);
        assert_abs_diff_eq!(g.w_easy, 0.5, epsilon = 1e-12);
        assert_eq!(g.w_hard, 0.0);
        let g = gates(0.125, &s);
        assert_eq!(g.w_easy, 0.0);
        assert_abs_diff_eq!(g.w_hard, 0.5, epsilon = 1e-12);
        assert_eq!(gates(0.0, &s).w_hard, 1.0);
    }

    #[test]
    fn normalized_length_examples() {
        let z = normalized_lengths::<f64>(&group(&[500; 4], &[1; 4]), 1e-6);
        assert!(z.iter().all(|&v| v == 0.0));
        let z = normalized_lengths::<f64>(&group(&[100, 300], &[1, 1]), 1e-6);
        assert_abs_diff_eq!(z[0], -1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(z[1], 1.0, epsilon = 1e-5);
        let z = normalized_length::<f64>(&group(&[100, 200, 300, 400], &[1; 4]), 3, 1e-6);
        assert_abs_diff_eq!(z, 150.0 / (12_500_f64.sqrt() + 1e-6), epsilon = 1e-12);
        assert_abs_diff_eq!(z, 1.341_640_786, epsilon = 1e-6);
    }

    #[test]
    fn coda_zero_base_gets_zero() {
        let s = scheme(SchemeKind::Coda);
        let out = shape_coda(&group(&[10, 900, 50, 70], &[0, 0, 0, 1]), &s);
        assert_eq!(&out.rewards[..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn coda_easy_side_example() {
        // 7 of 8 correct, rollout 0 at the group mean length so z = 0.
        let g = group(&[400, 100, 700, 300, 500, 200, 600, 400], &[1, 1, 1, 1, 1, 1, 1, 0]);
        let out = shape_coda(&g, &scheme(SchemeKind::Coda));
        assert_abs_diff_eq!(out.gates.w_easy, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.rewards[0], 0.95, epsilon = 1e-12);
    }

    #[test]
    fn coda_hard_side_example() {
        let g = group(&[400, 100, 700, 300, 500, 200, 600, 400], &[1, 0, 0, 0, 0, 0, 0, 0]);
        let out = shape_coda(&g, &scheme(SchemeKind::Coda));
        assert_abs_diff_eq!(out.gates.w_hard, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.rewards[0], 1.05, epsilon = 1e-12);

        // Correct rollout far above the rest of the group.
        let mut lengths = vec![10; 1000];
        lengths[0] = 1_000_000;
        let mut base = vec![0u8; 1000];
        base[0] = 1;
        let out = shape_coda(&RolloutGroup::new(lengths, base).unwrap(), &scheme(SchemeKind::Coda));
        // w_hard = (0.25 - 0.001) / 0.25 and sigmoid(z) is 1 to within 1e-13.
        assert_abs_diff_eq!(out.rewards[0], 1.0 + 0.2 * 0.996, epsilon = 1e-9);
    }

    #[test]
    fn coda_incorrect_bonus_ablation() {
        let mut s = scheme(SchemeKind::Coda);
        s.bonus_on_incorrect = true;
        let g = group(&[400, 100, 700, 300, 500, 200, 600, 400], &[1, 0, 0, 0, 0, 0, 0, 0]);
        let out = shape_coda(&g, &s);
        // Incorrect rollout at the mean length earns beta * w_hard * 0.5.
        assert_abs_diff_eq!(out.rewards[7], 0.05, epsilon = 1e-12);
        assert!(out.rewards[2] > out.rewards[1]);
        assert_abs_diff_eq!(out.rewards[0], 1.05, epsilon = 1e-12);
    }

    #[test]
    fn vlp_examples() {
        let s = scheme(SchemeKind::Vlp);
        let out = shape_vlp(&group(&[100, 300], &[0, 1]), &s);
        assert_eq!(out.rewards[0], 0.0);
        let out = shape_vlp(&group(&[250; 4], &[1; 4]), &s);
        for (&r, &a) in out.rewards.iter().zip(&out.advantages) {
            assert_abs_diff_eq!(r, 0.95, epsilon = 1e-12);
            assert_eq!(a, 0.0);
        }
    }

    #[test]
    fn asrr_examples() {
        let s = scheme(SchemeKind::Asrr);
        let inactive = group(&[500, 1500, 900, 100], &[1, 1, 0, 0]);
        let out = shape_asrr(&inactive, &s);
        assert_eq!(out.rewards, vec![1.0, 1.0, 0.0, 0.0]);

        let easy = group(&[500, 1500, 800, 900, 1000, 1100, 1200, 700], &[1, 1, 1, 1, 1, 1, 1, 0]);
        let out = shape_asrr(&easy, &s);
        let gate = (0.875 - 0.75 + 1e-6) / (1.0 - 0.75 + 1e-6);
        assert_abs_diff_eq!(out.rewards[1], 1.0 - 0.5 * gate * 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.rewards[1], 0.875, epsilon = 1e-6);
        assert_eq!(out.rewards[0], 1.0);
    }

    #[test]
    fn asrr_without_correct_rollouts_is_plain() {
        let mut s = scheme(SchemeKind::Asrr);
        s.asrr_tau = 0.01;
        let out = shape_asrr(&group(&[500, 9000], &[0, 0]), &s);
        assert_eq!(out.rewards, vec![0.0, 0.0]);
    }

    #[test]
    fn l1_examples() {
        let s = scheme(SchemeKind::L1);
        let out = shape_l1(&group(&[1000, 1300], &[1, 1]), &s, 1000);
        assert_eq!(out.rewards[0], 1.0);
        assert_abs_diff_eq!(out.rewards[1], 0.91, epsilon = 1e-12);
        let out = shape_l1(&group(&[6000, 1000], &[0, 0]), &s, 1000);
        assert_abs_diff_eq!(out.rewards[0], -1.5, epsilon = 1e-12);
        assert!(matches!(shape(&group(&[1, 2], &[1, 0]), &s), Err(Error::Config { .. })));
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(advantages(&[1.0, 1.0, 0.0, 0.0]), vec![0.5, 0.5, -0.5, -0.5]);
        assert_eq!(advantages(&[0.3; 5]), vec![0.0; 5]);
        let a = advantages(&[0.95, 0.93, 0.0, 0.0]);
        for (x, e) in a.iter().zip([0.48, 0.46, -0.47, -0.47]) {
            assert_abs_diff_eq!(*x, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn scheme_validation_names_the_field() {
        let mut s = scheme(SchemeKind::Coda);
        s.tau_easy = 0.2;
        s.tau_hard = 0.3;
        match s.validate() {
            Err(Error::Config { path, message }) => {
                assert_eq!(path, "tau_easy");
                assert!(message.contains("tau_easy > tau_hard"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!("bogus".parse::<SchemeKind>().is_err());
        assert_eq!("asrr".parse::<SchemeKind>().unwrap(), SchemeKind::Asrr);
    }

    #[test]
    fn single_precision_matches_double() {
        let g = group(&[400, 100, 700, 300], &[1, 1, 1, 1]);
        let a = shape_coda(&g, &ShapingScheme::<f32>::default());
        let b = shape_coda(&g, &ShapingScheme::<f64>::default());
        for (x, y) in a.rewards.iter().zip(&b.rewards) {
            assert_abs_diff_eq!(*x as f64, *y, epsilon = 1e-6);
        }
    }
}
