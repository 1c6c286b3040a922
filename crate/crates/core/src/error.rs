use num_complex::Complex64;
use thiserror::Error;

/// Errors shared across the library.
///
/// Arithmetic never returns silently-wrong digits: anything that cannot
/// guarantee at least one correct mantissa digit, or that is asked to act
/// outside its domain, comes back through here.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("p = {0} must be an odd prime")]
    InvalidPrime(u64),

    #[error("operands live over different primes ({0} and {1})")]
    PrimeMismatch(u64, u64),

    #[error("extension degree n = {n} must be >= 1 and coprime to p = {p}")]
    BadDegree { p: u64, n: u32 },

    #[error("division by zero")]
    DivisionByZero,

    #[error("zero input where a nonzero element is required")]
    ZeroInput,

    #[error("result would carry fewer than one correct digit")]
    PrecisionExhausted,

    #[error("need {needed} known digits but only {have} are available")]
    InsufficientPrecision { needed: u32, have: u32 },

    #[error("input is not a principal unit (valuation 0 and residue 1 required)")]
    NotPrincipalUnit,

    #[error("input is not a unit (valuation 0 required)")]
    NotUnit,

    #[error("element has a negative coefficient valuation; not integral")]
    NotIntegral,

    #[error("mantissa {0} is not a canonical representative (divisible by p or out of range)")]
    BadMantissa(String),

    #[error("enumeration of q^{level} residues exceeds the budget of {budget}")]
    BudgetExceeded { level: u32, budget: u64 },

    #[error(
        "quasicharacter is exceptional at s = {s}: the pairing has a simple pole with residue {residue}"
    )]
    ExceptionalPole { s: Complex64, residue: Complex64 },

    #[error("statistical diagnostic cannot run: {0}")]
    DiagnosticPrecondition(String),

    #[error("invalid serialized record: {0}")]
    BadRecord(String),

    #[error("invalid modulus: {0}")]
    BadModulus(String),
}

pub type Result<T> = std::result::Result<T, Error>;
