//! Small dense kernel with explicit reverse-mode gradients for the
//! primitives the fusion heads are built from, plus a central-difference
//! gradient verifier.

mod attention;
mod gradcheck;
mod loss;
mod ops;
mod params;
mod tensor;

pub use attention::{
    multi_head_attention, multi_head_attention_backward, AttentionCache, AttentionGrads,
    AttentionMaps, AttentionWeights,
};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck};
pub use loss::cross_entropy;
pub use ops::{
    dense_affine, dense_affine_backward, dropout, dropout_backward, gelu, gelu_backward,
    layer_norm, layer_norm_backward, mean_rows, mean_rows_backward, softmax_rows,
    softmax_rows_backward, AffineGrads, LayerNormCache, LayerNormGrads,
};
pub use params::{
    checkpoint_manifest, read_checkpoint, write_checkpoint, xavier_uniform, CheckpointManifest,
    Param, ParamStore, TensorShape,
};
pub use tensor::{Real, Tensor2D};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("tensor {rows}x{cols} cannot hold {len} values")]
    DataLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("tensor shape {rows}x{cols} has no elements")]
    EmptyShape { rows: usize, cols: usize },
    #[error("{heads} heads do not divide model dim {dim}")]
    HeadsDoNotDivide { dim: usize, heads: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{labels} labels for {rows} logit rows")]
    LabelCount { rows: usize, labels: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("closure is not deterministic: repeated evaluation differs")]
    NonDeterministic,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Self::Shape { op, lhs, rhs }
    }
}
