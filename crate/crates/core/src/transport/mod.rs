//! Transport network on a metric graph with velocity-dependent absorption
//! and scattering at the vertices.

mod closed_loop;
mod field;
mod ops;
mod signal;
mod system;

pub use closed_loop::{closed_loop_resolvent, closed_loop_solve, generation_count, ClosedLoopSolution, SolverOptions, TraceLedger};
pub use field::{BoundaryVector, Profile, StateField};
pub use ops::{
    boundary_traces, dirichlet_apply, input_map, io_map, outflow_traces, resolvent_apply, scatter_to_vertices, semigroup_apply,
    transfer_operator,
};
pub use signal::{BoundaryHistory, BoundarySignal, FnHistory, Routed, Side, StepHistory, LEFT_EPS};
pub use system::{Absorption, Kernel, TransportSystem};
