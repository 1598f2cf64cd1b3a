//! Input contracts, label handling and synthetic patches.

pub mod container;
pub mod exclusion;
pub mod footprint;
pub mod gedi;
pub mod input;
pub mod synth;

pub use container::{Container, PatchFile};
pub use gedi::{GediShot, GridGeometry, LabelGrid};
pub use input::{assemble_input, NormalizationSpec, Sources};
pub use synth::{synth_generate, SyntheticPatch, SyntheticWorldConfig};
