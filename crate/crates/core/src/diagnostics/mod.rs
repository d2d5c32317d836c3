//! Executable checks of the value function's guarantees: the one-step
//! descent bound, the first-order surrogate, unbiasedness under independent
//! batches, the probe correlation and the overhead of value updates.

pub mod ablation;
pub mod overhead;
pub mod probe;
pub mod quadratic;
pub mod suite;
pub mod surrogate;
pub mod unbiased;

use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationArm, AblationReport, EffectSize};
pub use overhead::{check_cadence, compare_overhead, measure_overhead, overhead_from_records, CadenceReport, OverheadComparison, OverheadReport};
pub use probe::{check_probe, pearson, ProbeReport};
pub use quadratic::{check_descent_bound, check_descent_equality, quadratic_probes, DescentReport, QuadraticTestbed};
pub use suite::{run_check, run_suite, CheckOutcome, CHECKS};
pub use surrogate::{check_first_order_surrogate, eta_grid, QuadraticInstance, SurrogateInstance, SurrogateReport, TransformerInstance};
pub use unbiased::{check_unbiasedness, dependence_demo, toy_example_gradients, DependenceDemo, UnbiasednessReport};

/// Deliberate defects injected into the checks, to confirm they can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Faults {
    /// Negate every Hessian-vector product.
    pub hvp_sign_flip: bool,
}

impl Faults {
    pub fn none() -> Self {
        Faults::default()
    }

    pub(crate) fn apply_hvp(&self, x: f64) -> f64 {
        if self.hvp_sign_flip {
            -x
        } else {
            x
        }
    }
}
