//! Difficulty-gated length shaping for group-relative policy optimization,
//! plus a synthetic budget-allocation sandbox to exercise it.
//!
//! The reward calculus (`optimality`, `rewards`) is generic over the float
//! type; the sandbox, trainer and analysis layers run in `f64`.

pub mod analysis;
pub mod config;
pub mod error;
pub mod format;
pub mod optimality;
pub mod pipeline;
pub mod rewards;
pub mod rng;
pub mod sandbox;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use optimality::{
    equivalent_price, optimal_budget, utility, CostModel, DifficultyWiring, SuccessCurve,
    UtilityProfile,
};
pub use rewards::{shape, GateWeights, RolloutGroup, SchemeKind, ShapedRewards, ShapingScheme};
pub use scalar::Scalar;

pub type SuccessCurve64 = SuccessCurve<f64>;
pub type CostModel64 = CostModel<f64>;
pub type UtilityProfile64 = UtilityProfile<f64>;
pub type DifficultyWiring64 = DifficultyWiring<f64>;
pub type ShapingScheme64 = ShapingScheme<f64>;
pub type ShapedRewards64 = ShapedRewards<f64>;

pub type SuccessCurve32 = SuccessCurve<f32>;
pub type CostModel32 = CostModel<f32>;
pub type ShapingScheme32 = ShapingScheme<f32>;
pub type ShapedRewards32 = ShapedRewards<f32>;

/// Version string written into run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
