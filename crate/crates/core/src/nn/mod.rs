//! From-scratch transformer core: taped matrix ops with exact gradients,
//! attention, encoder blocks, Adam and the transducer training loop.

pub mod adam;
pub mod attention;
pub mod config;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod transducer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use attention::{attention_weights, relpos_bias, scaled_dot_product_attention};
pub use config::TransformerConfig;
pub use layers::Ctx;
pub use params::{Grads, ParamSet, TensorRecord};
pub use tape::{Mat, Tape, Var};
pub use transducer::{
    corpus_loss, train_transducer, transduction_loss, LossKind, Standardizer, TrainConfig, TrainItem, Transducer,
};
