//! B-spline Kolmogorov-Arnold layers and the conv/KAN/attention block.

mod block;
mod layer;
mod spline;

pub use block::KanBlock;
pub use layer::{KanLayer, SplineConfig};
pub use spline::{bspline_basis, bspline_basis_var, SplineGrid};
