//! Meta-in-context learning for sequence-to-sequence tasks: a small f32
//! tensor library with reverse-mode differentiation, dataset pipelines,
//! trajectory construction, a decoder-only Transformer, training, and
//! few-shot prompting evaluation.

pub mod data;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;
pub mod trajectory;
pub mod vocab;
