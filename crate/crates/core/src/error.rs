use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("invalid layer specification: {0}")]
    InvalidSpec(&'static str),
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch { what: &'static str, expected: usize, found: usize },
    #[error("invalid microkernel descriptor: {0}")]
    InvalidDescriptor(&'static str),
    #[error("int16 accumulation may overflow: worst case {worst_case} exceeds {budget}")]
    OverflowRisk { worst_case: u64, budget: u64 },
    #[error("thread {thread} has no work in the partition")]
    PlanInfeasible { thread: usize },
    #[error("cannot encode an empty call trace")]
    EmptyTrace,
    #[error("tensor does not match the execution plan: {0}")]
    PlanTensorMismatch(&'static str),
    #[error("execution plan is inconsistent: {0}")]
    InvalidPlan(&'static str),
    #[error("weight update strategy is not usable: {0}")]
    InfeasibleStrategy(&'static str),
}
