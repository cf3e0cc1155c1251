//! Tail sigma-algebra decomposition for fiber-surjective and fiber-bijective
//! extensions of finite Markov systems, with a periodic Lorentz gas engine for
//! the billiard application.
//!
//! The symbolic side ([`symbolic_base`], [`fiber_extension`], [`decomposition`],
//! [`k_quotient`]) works in exact rational arithmetic on finite graphs. The
//! billiard side ([`lorentz_gas`]) is a double-precision event-driven simulator
//! with exact integer lattice bookkeeping. [`cli_io`] ties both to a JSON
//! run-config and report format.

pub mod check;
pub mod cli_io;
pub mod decomposition;
pub mod error;
pub mod fiber_extension;
pub mod graph;
pub mod k_quotient;
pub mod lattice;
pub mod lorentz_gas;
pub mod rational;
pub mod symbolic_base;

pub use check::{CheckReport, Finding, ValidationReport};
pub use decomposition::{
    certify_exactness, decompose, project_atoms, relabel_levels, verify_theorem_invariants,
    Atom, Component, ComponentKind, Count, DecompositionReport, Measure,
};
pub use error::{Error, Result};
pub use fiber_extension::{
    build_product, check_measure_preservation, check_projection_identity, validate_action,
    ActionMode, FiberAction, FiberSet, ProductSystem,
};
pub use symbolic_base::{step_base, validate_base, PiecewiseLinearRealization, SymbolicBaseSystem};
