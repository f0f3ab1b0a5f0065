//! Minimal neural-network toolkit: a gradient tape, transformer blocks, the
//! Adam optimizer and a checkpoint container. All models in this crate are
//! built from these pieces.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod params;
pub mod stacks;
pub mod tape;

pub type Mat = ndarray::Array2<f64>;

pub use checkpoint::{content_hash, Checkpoint};
pub use layers::{
    positional_encoding, Attention, CrossKv, DecoderLayer, Dropout, EncoderLayer, FeedForward,
    LayerCache, LayerNorm, Linear,
};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, ParamBuilder, ParamId, ParamStore};
pub use stacks::{fit, CausalLm, EncoderHead, HeadExample, LmExample, Parameterized};
pub use tape::{log_softmax, softmax_rows, Tape, Var};
