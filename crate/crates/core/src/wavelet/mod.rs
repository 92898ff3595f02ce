//! Orthonormal wavelet bases, periodic 2-D DWT/SWT and wavelet-domain losses.

pub mod basis;
pub mod loss;
mod taps;
pub mod transform;

pub use basis::{load_basis, BasisName, WaveletBasis};
pub use loss::{dwt_loss, dwt_loss_graph, swt_loss, swt_loss_graph, SubbandWeights};
pub use transform::{dwt2, idwt2, iswt2, swt2, SubbandLevel, Subbands, TransformKind};
