//! Splice-aware package resolution: spec model and parser, package
//! repositories, a content-addressed build cache, an optimizing concretizer
//! that can synthesize splices, and a mock installer that rewires binaries.

pub mod bench;
pub mod cache;
pub mod concretize;
pub mod fixtures;
pub mod hash;
pub mod install;
pub mod parser;
pub mod repo;
pub mod spec;
pub mod splice;
pub mod version;

pub use hash::DagHash;
pub use spec::{
    merge_constraints, satisfies, AbstractSpec, ConcreteNode, ConcreteSpec, DepKind, Dependency,
    EdgeKind, NodeAttrs, NodeConstraints, SpecBuilder, SpecError, SpecStore, VariantValue,
};
pub use parser::{format_concrete, format_spec, parse_spec, ParseError};
pub use version::{Version, VersionConstraint};
