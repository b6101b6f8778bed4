//! Numerical workbench for isothermic hypersurfaces and Guichard coordinate
//! systems via the `U/K`-system and its loop-group dressing.
//!
//! The pipeline is: a [`system::SolutionSource`] (vacuum, dressed or
//! tabulated) → an extended frame sheet ([`frames::integrate_frame`]) →
//! Combescure sequences of immersions ([`geometry::synthesize_sequence`]) →
//! transforms ([`geometry::christoffel_transform`],
//! [`dressing::ribaucour_apply`], [`dressing::lie_transform`]) and the
//! verifiers in [`geometry`].

pub mod algebra;
pub mod dressing;
pub mod error;
pub mod export;
pub mod frames;
pub mod geometry;
pub mod grid;
pub mod report;
pub mod scalar;
pub mod system;

pub use algebra::{AmbientForm, SystemShape, TangentDatum, Variant};
pub use dressing::{dress, ribaucour_apply, Alpha, DressingRecord, RibaucourData, SimpleElement};
pub use error::{Error, Result};
pub use frames::{integrate_frame, FrameSheet, IntegrationOptions};
pub use geometry::{synthesize_sequence, CombescureSequence, ImmersionSheet, NullBasis};
pub use grid::GridSpec;
pub use report::Report;
pub use system::{vacuum, SolutionSource};
