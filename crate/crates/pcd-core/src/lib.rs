//! Pose-conditioned dendritic heatmap localization of facial landmarks.
//!
//! The crate is a from-scratch stack: a small reverse-mode autodiff engine
//! (`tensor`), tree descriptions of landmark layouts (`tree`), the
//! two-network conditioned model with tree message passing and network
//! surgery (`net`), its losses (`loss`), a synthetic face-like data
//! generator with annotations and augmentation (`data`), an SGD trainer with
//! offline hard-sample mining (`train`), and the evaluation suite (`eval`).

pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod net;
pub mod check;
pub mod tensor;
pub mod train;
pub mod tree;

pub use error::{Error, Result};
