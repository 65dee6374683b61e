//! Ground-truth oracles and distribution metrics: the linear-quadratic
//! Riccati solver, a brute-force open-loop trajectory optimizer,
//! Wasserstein-2 and KL estimators, diversity, and bound checks.

mod bounds;
mod lq;
mod transport;

pub use bounds::{
    estimate_lipschitz, kl_between_flows, w2_bound_check, KlReport, W2BoundReport,
};
pub use lq::{
    brute_force_control, bundled_instance, riccati_solve, BruteForceResult, LQProblem,
    LqGradField, LqOptimalVelocity, RiccatiSolution,
};
pub use transport::{
    diversity, min_cost_assignment, w2_distance, W2Estimate, W2Method, EXACT_ASSIGNMENT_LIMIT,
};

/// Evaluation summary comparing a finetuned flow against its base.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub mean_reward: f64,
    pub diversity: f64,
    /// Squared Wasserstein-2 distance to the base samples.
    pub w2_to_base: f64,
    pub w2_method: W2Method,
    /// Monte Carlo KL(finetuned ‖ base) over terminal samples.
    pub kl_to_base: f64,
    pub kl_identity_rhs: f64,
    pub kl_term_control: f64,
    pub kl_term_path: f64,
    pub kl_term_divergence: f64,
    pub w2_bound_lhs: f64,
    pub w2_bound_rhs: f64,
    pub bound_holds: bool,
}
