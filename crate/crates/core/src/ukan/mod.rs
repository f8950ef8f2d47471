//! The U-shaped conditional denoiser and its conditioning inputs.

mod arch;
mod denoiser;
mod encoder;
mod geometry;

pub use arch::{parse_arch, ArchString, BlockKind};
pub use denoiser::{
    timestep_embedding, Condition, ConditionValue, ConvBlock, Denoiser, StageBlock, UkanConfig, UkanDenoiser,
};
pub use encoder::{ImageEncoder, ResBlock};
pub use geometry::{tumor_geometry, TumorGeometry, GEOMETRY_FEATURES};
