use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("self-loop on vertex {0}")]
    SelfLoop(u32),
    #[error("vertex {0} out of range")]
    VertexRange(u32),
    #[error("edge ({0},{1}) already present")]
    DuplicateEdge(u32, u32),
    #[error("edge ({0},{1}) absent")]
    AbsentEdge(u32, u32),
    #[error("edge ({0},{1}) is matched; delete it through the deletion handler")]
    MatchedEdge(u32, u32),
    #[error("malformed update sequence at index {index}: {reason}")]
    Sequence { index: usize, reason: String },
    #[error("budget overrun: {scheduler} thread at level {level} used {used} of {slot} steps (update {t})")]
    BudgetOverrun {
        scheduler: &'static str,
        level: usize,
        used: u64,
        slot: u64,
        t: u64,
    },
    #[error("unit of {cost} steps exceeds the unit ceiling {cap}")]
    UnitOverrun { cost: u64, cap: u64 },
    #[error("active list holds {size} vertices, cap is {cap}")]
    ActiveCap { size: usize, cap: usize },
    #[error("internal corruption: {0}")]
    Corruption(String),
    #[error("vertex count {0} too large for exact matching (limit 64)")]
    TooLarge(usize),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("epoch boundary mismatch at update {0}")]
    EpochMismatch(u64),
}
