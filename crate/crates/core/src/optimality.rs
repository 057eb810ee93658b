//! Utility view of token budgets.
//!
//! A question's accuracy-vs-tokens profile is a [`SuccessCurve`]; tokens are
//! priced by a linear [`CostModel`]. The utility of a budget `n` is
//! `evaluate(n) - price * per_token_cost * n`, and the best budget is the
//! point where the marginal accuracy gain stops paying for the next token.
//! Harder questions keep a sizable marginal gain for longer, which is the
//! same thing as facing a lower effective token price.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Marginal gains at or below this are treated as a saturated plateau.
pub const PLATEAU_GAIN: f64 = 1e-12;

/// Saturating success profile `p_floor + (p_ceiling - p_floor) * (1 - exp(-n / scale))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessCurve<T> {
    pub p_floor: T,
    pub p_ceiling: T,
    pub scale: T,
}

impl<T: Scalar> SuccessCurve<T> {
    pub fn new(p_floor: T, p_ceiling: T, scale: T) -> Result<Self> {
        let curve = Self {
            p_floor,
            p_ceiling,
            scale,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        let ok_range = T::zero() <= self.p_floor
            && self.p_floor <= self.p_ceiling
            && self.p_ceiling <= T::one();
        if !ok_range {
            return Err(Error::Degenerate(format!(
                "success curve needs 0 <= p_floor <= p_ceiling <= 1, got {} / {}",
                self.p_floor, self.p_ceiling
            )));
        }
        if !(self.scale > T::zero()) || !self.scale.is_finite() {
            return Err(Error::Degenerate(format!(
                "success curve scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Success probability at a budget of `n` tokens.
    pub fn evaluate(&self, n: u64) -> T {
        let x = T::from_tokens(n) / self.scale;
        // exp_m1 keeps precision for budgets much smaller than the scale.
        self.p_floor + (self.p_ceiling - self.p_floor) * (-(-x).exp_m1())
    }

    /// Finite-difference slope of [`evaluate`](Self::evaluate) at `n` with step `h`.
    ///
    /// Central difference, falling back to a forward difference when `n < h`.
    pub fn marginal_gain(&self, n: u64, h: u64) -> T {
        let h = h.max(1);
        let width = T::from_tokens(h);
        if n < h {
            (self.evaluate(n + h) - self.evaluate(n)) / width
        } else {
            (self.evaluate(n + h) - self.evaluate(n - h)) / (width + width)
        }
    }
}

/// Linear compute cost `C(n) = per_token_cost * n`, weighted by a price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel<T> {
    pub per_token_cost: T,
    pub price: T,
}

impl<T: Scalar> CostModel<T> {
    pub fn new(per_token_cost: T, price: T) -> Result<Self> {
        if !(per_token_cost > T::zero()) || !per_token_cost.is_finite() {
            return Err(Error::Degenerate(format!(
                "per_token_cost must be positive, got {per_token_cost}"
            )));
        }
        if !(price >= T::zero()) || !price.is_finite() {
            return Err(Error::Degenerate(format!(
                "price must be non-negative, got {price}"
            )));
        }
        Ok(Self {
            per_token_cost,
            price,
        })
    }

    pub fn cost(&self, n: u64) -> T {
        self.per_token_cost * T::from_tokens(n)
    }

    pub fn with_price(self, price: T) -> Self {
        Self { price, ..self }
    }
}

/// Utility over the integer budget grid `0..=grid_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityProfile<T> {
    pub budgets: Vec<u64>,
    pub success: Vec<T>,
    pub utilities: Vec<T>,
    pub argmax_budget: u64,
}

impl<T: Scalar> UtilityProfile<T> {
    pub fn max_utility(&self) -> T {
        self.utilities[self.argmax_budget as usize]
    }
}

pub fn utility<T: Scalar>(curve: &SuccessCurve<T>, cost: &CostModel<T>, n: u64) -> T {
    curve.evaluate(n) - cost.price * cost.cost(n)
}

/// Scans every integer budget in `0..=grid_max` and returns the full profile.
///
/// Ties resolve to the smallest budget. Candidates are compared through the
/// closed-form utility difference rather than the rounded utilities, so an
/// improvement below the resolution of `p` near the ceiling still counts.
pub fn optimal_budget<T: Scalar>(
    curve: &SuccessCurve<T>,
    cost: &CostModel<T>,
    grid_max: u64,
) -> UtilityProfile<T> {
    let len = grid_max as usize + 1;
    let mut budgets = Vec::with_capacity(len);
    let mut success = Vec::with_capacity(len);
    let mut utilities = Vec::with_capacity(len);
    let mut argmax_budget = 0;
    for n in 0..=grid_max {
        let p = curve.evaluate(n);
        let u = p - cost.price * cost.cost(n);
        if n > 0 && utility_gain(curve, cost, argmax_budget, n) > T::zero() {
            argmax_budget = n;
        }
        budgets.push(n);
        success.push(p);
        utilities.push(u);
    }
    UtilityProfile {
        budgets,
        success,
        utilities,
        argmax_budget,
    }
}

/// `U(to) - U(from)` for `to > from`, without cancellation against `p_ceiling`.
fn utility_gain<T: Scalar>(curve: &SuccessCurve<T>, cost: &CostModel<T>, from: u64, to: u64) -> T {
    let span = T::from_tokens(to - from);
    let head = (-T::from_tokens(from) / curve.scale).exp();
    let success_gain = (curve.p_ceiling - curve.p_floor) * head * -(-span / curve.scale).exp_m1();
    success_gain - cost.price * cost.per_token_cost * span
}

/// Price at which `target_budget` is the marginal stopping point, i.e.
/// `marginal_gain(target) / per_token_cost`.
pub fn equivalent_price<T: Scalar>(
    curve: &SuccessCurve<T>,
    cost: &CostModel<T>,
    target_budget: u64,
) -> Result<T> {
    let gain = curve.marginal_gain(target_budget, 1);
    if gain <= T::lit(PLATEAU_GAIN) {
        return Err(Error::Degenerate(format!(
            "marginal gain {gain} at budget {target_budget} is on the saturated plateau; price undefined"
        )));
    }
    Ok(gain / cost.per_token_cost)
}

/// Maps latent difficulty `d` in `[0, 1]` to a success curve.
///
/// `p_ceiling(d) = ceiling_at_zero - ceiling_slope * d` and
/// `scale(d) = scale_at_zero + scale_quadratic * d^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifficultyWiring<T> {
    pub p_floor: T,
    pub ceiling_at_zero: T,
    pub ceiling_slope: T,
    pub scale_at_zero: T,
    pub scale_quadratic: T,
}

impl<T: Scalar> Default for DifficultyWiring<T> {
    fn default() -> Self {
        Self {
            p_floor: T::zero(),
            ceiling_at_zero: T::lit(0.98),
            ceiling_slope: T::lit(0.68),
            scale_at_zero: T::lit(100.0),
            scale_quadratic: T::lit(4900.0),
        }
    }
}

impl<T: Scalar> DifficultyWiring<T> {
    pub fn validate(&self) -> Result<()> {
        let lo = self.ceiling_at_zero - self.ceiling_slope;
        for (name, v) in [
            ("p_floor", self.p_floor),
            ("ceiling_at_zero", self.ceiling_at_zero),
            ("ceiling_slope", self.ceiling_slope),
            ("scale_at_zero", self.scale_at_zero),
            ("scale_quadratic", self.scale_quadratic),
        ] {
            if !v.is_finite() {
                return Err(Error::config(name, "must be finite"));
            }
        }
        if self.ceiling_slope < T::zero() || self.scale_quadratic < T::zero() {
            return Err(Error::config(
                "ceiling_slope",
                "ceiling_slope and scale_quadratic must be non-negative",
            ));
        }
        if self.p_floor < T::zero() || self.ceiling_at_zero > T::one() || lo < self.p_floor {
            return Err(Error::config(
                "ceiling_at_zero",
                "need 0 <= p_floor <= p_ceiling(d) <= 1 for every d in [0, 1]",
            ));
        }
        if !(self.scale_at_zero > T::zero()) {
            return Err(Error::config("scale_at_zero", "must be positive"));
        }
        Ok(())
    }

    pub fn curve(&self, difficulty: T) -> SuccessCurve<T> {
        let d = difficulty.max(T::zero()).min(T::one());
        SuccessCurve {
            p_floor: self.p_floor,
            p_ceiling: self.ceiling_at_zero - self.ceiling_slope * d,
            scale: self.scale_at_zero + self.scale_quadratic * d * d,
        }
    }
}
