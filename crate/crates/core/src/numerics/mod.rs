//! Dense tensors and reverse-mode differentiation for small MLP and
//! convolutional graphs.

mod conv;
mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use conv::ConvGeometry;
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{
    BinaryKind, Gradients, Graph, NormMode, RunningStats, UnaryKind, Var, BATCHNORM_EPS,
    BATCHNORM_MOMENTUM,
};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::{s, Scalar};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

#[cfg(test)]
mod tests;
