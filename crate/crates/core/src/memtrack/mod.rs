//! Memory accounting: a runtime ledger of logical tensor bytes and an analytic
//! mixed-precision estimator.

mod estimate;
mod ledger;
mod report;

pub use estimate::{
    analytic_estimate, factored_state_elements, llama7b_shapes, shape_param_count,
    square_matrix_shapes, AnalyticEstimate, EstimateError, EstimateMethod, PrecisionPolicy,
};
pub use ledger::{AllocId, Category, CategoryStats, Event, EventKind, LedgerError, MemoryLedger};
pub use report::{BaselineComparison, CategoryLine, MemoryReport};
