//! Scenario-based nodal Cournot electricity market with wind, storage
//! and transmission players, plus storage sizing against a
//! price-volatility target.
//!
//! Layering, bottom to top:
//! - [`model`]: immutable domain types and validation.
//! - [`market`]: pure evaluation (prices, payoffs, volatility).
//! - [`scenario`]: wind-scenario construction and demand calibration.
//! - [`equilibrium`]: the lower-level Nash solver and its KKT audit.
//! - [`sizing`]: the upper-level capacity sweep.

pub mod equilibrium;
pub mod market;
pub mod model;
pub mod scenario;
pub mod sizing;

pub use equilibrium::{
    brute_force_nash, kkt_breakdown, kkt_residual, solve_equilibrium,
    solve_equilibrium_multistart, EquilibriumResult, FirmClass, KktBreakdown, SolveError,
    SolverConfig,
};
pub use market::{
    all_prices, canonicalize_storage, firm_payoff, nodal_injection, price, price_variance,
    state_of_charge, storage_net_flow, summary_metrics, variance_table, NodeMetrics,
};
pub use model::{
    ClassicalGenerator, DemandCurve, FirmRef, Horizon, ModelError, MultiplierSet, Network,
    NodeId, ScenarioSet, StorageFirm, StrategyProfile, TransmissionLine, TwGrid, WindFirm,
};
pub use scenario::{build_wind_scenarios, calibrate_demand, FluctuationSpec, WindProfile, WindScenarios};
pub use sizing::{
    minimal_storage_capacity, set_storage_mode, volatility_at_capacity, volatility_curve,
    AllocationRule, CurvePoint, SizingError, SizingResult, StorageMode, SweepPlan, SweepPoint,
    VolatilityTarget,
};
