//! Smooth nonlinear programming: problem representation, KKT checks, an SQP
//! solver and tree transcription.

pub mod kkt;
pub mod problem;
pub mod qp;
pub mod sqp;
pub mod transcribe;

pub use kkt::{check_kkt, KktReport, Multipliers};
pub use problem::{DerivativeMode, Element, Evaluation, NlpProblem, SparseRows, FD_STEP};
pub use qp::{solve_qp, QpResult, QpStatus, SparseQp};
pub use sqp::{solve, NlpSolution, SolveStatus, SqpSettings, SqpSolver};
pub use transcribe::{simulate_guess, transcribe, LeafCostFn, NodeCostFn, TreeOcp, VariableLayout};
