//! Prediction heads over frozen embeddings.

pub mod batch;
pub mod boxes;
pub mod checkpoint;
pub mod layers;
pub mod mlp;
pub mod model;
pub mod params;
pub mod single;
pub mod spec;
pub mod tf;
pub mod verb_mlp;
pub mod xtf;

pub use batch::{NounBatch, NounExample};
pub use boxes::BoxDecoder;
pub use checkpoint::{header_value, Checkpoint, CHECKPOINT_MAGIC};
pub use layers::LN_EPS;
pub use mlp::MlpHead;
pub use model::{frame_attention, Arch, HeadOutput, Model};
pub use params::{ParamId, ParamStore};
pub use single::{localize, mlp_forward, tf_forward, verb_forward, xtf_forward};
pub use spec::{ModelKind, ModelSpec, RoleTokens};
pub use tf::TfHead;
pub use verb_mlp::VerbMlp;
pub use xtf::XtfHead;
