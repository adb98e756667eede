//! BERT-like encoder: configuration, parameters, forward pass, student
//! construction and checkpoints.

pub mod checkpoint;
mod config;
mod encoder;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub use config::{count_parameters, reference_params_millions, EncoderConfig, LAYER_NORM_EPS, REFERENCE_PARAMS};
pub use encoder::{
    init_student_from_teacher, parameter_shapes, student_layer_map, EmbeddingParams, EncoderModel, EncoderOutput,
    EncoderParams, HeadParams, LayerParams, TokenBatch, INIT_STD,
};
