pub mod data;
pub mod diffusion;
pub mod error;
pub mod kan;
pub mod metrics;
pub mod numerics;
pub mod repaint;
pub mod ukan;

pub use error::{Error, Result};
