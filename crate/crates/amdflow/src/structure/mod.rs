//! Crystal-structure core: elements, lattices, periodic structures,
//! compositions, and the POSCAR interchange format.

pub mod composition;
pub mod crystal;
pub mod element;
pub mod lattice;
pub mod poscar;

pub use composition::Composition;
pub use crystal::{wrap_frac, Crystal, Site};
pub use element::Element;
pub use lattice::{Lattice, MIN_VOLUME};
pub use poscar::{parse_poscar, write_poscar};

/// Errors from constructing or querying structures.
#[derive(Debug, thiserror::Error)]
pub enum StructureError {
    #[error("cell volume must be positive and right-handed (determinant {det})")]
    NonPositiveVolume { det: f64 },
    #[error("a structure must contain at least one site")]
    NoSites,
    #[error("site coordinates must be finite")]
    NonFiniteCoordinate,
    #[error("site index {index} out of range for {len} sites")]
    SiteIndexOutOfRange { index: usize, len: usize },
}

/// Errors from parsing a POSCAR document. Every variant carries the
/// 1-based line number where the problem was detected.
#[derive(Debug, thiserror::Error)]
pub enum PoscarError {
    #[error("line {line}: input ends before the document is complete")]
    Truncated { line: usize },
    #[error("line {line}: expected {expected}")]
    MalformedLine { line: usize, expected: &'static str },
    #[error("line {line}: unknown element symbol {symbol:?}")]
    UnknownElement { line: usize, symbol: String },
    #[error("line {line}: {symbols} element symbols but {counts} counts")]
    CountMismatch {
        line: usize,
        symbols: usize,
        counts: usize,
    },
    #[error("line {line}: coordinate block has {found} usable lines, expected {expected}")]
    CoordinateMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: cell volume must be positive")]
    NonPositiveVolume { line: usize },
}
