use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not representable: {0}")]
    NotRepresentable(String),
    #[error("non-unit: {0}")]
    NonUnit(String),
    #[error("policy mismatch: {0}")]
    PolicyMismatch(String),
    #[error("divergent exponential: {0}")]
    DivergentExponential(String),
    #[error("unstable substitution: {0}")]
    UnstableSubstitution(String),
    #[error("ring mismatch: {0}")]
    RingMismatch(String),
    #[error("codimension < 2")]
    CodimensionTooSmall,
    #[error("inconsistent map data: {0}")]
    InconsistentMapData(String),
    #[error("underdetermined: {0}")]
    Underdetermined(String),
    #[error("inconsistent seeds: {0}")]
    InconsistentSeeds(String),
    #[error("bound exceeded: {0}")]
    BoundExceeded(String),
    #[error("z-window too shallow: {0}")]
    ZWindowTooShallow(String),
    #[error("u-window too small: {0}")]
    UWindowTooSmall(String),
    #[error("j out of range: {0}")]
    JOutOfRange(String),
    #[error("pole pattern unsupported: {0}")]
    PolePattern(String),
    #[error("factorization obstruction: {0}")]
    FactorizationObstruction(String),
    #[error("singular leading block: {0}")]
    SingularLeadingBlock(String),
    #[error("inconsistent ODE system: {0}")]
    InconsistentOde(String),
    #[error("non-effective exponent: {0}")]
    NonEffectiveExponent(String),
    #[error("verification failure: {0}")]
    Verification(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("internal inconsistency: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;
