//! Vocabularies, frames, the embedding store and synthetic data.

pub mod frames;
pub mod store;
pub mod synth;
pub mod vocab;

pub use frames::{load_frames, parse_frames, save_frames, BBox, Frame, FrameRecord, RoleRecord, VocabMode};
pub use store::{load_embedding_store, EmbeddingStore, EmbeddingTable, EncoderTag, StoreParts, STORE_MAGIC};
pub use synth::{synth_dataset, SynthConfig, SynthDataset};
pub use vocab::{Vocab, BLANK_NOUN};
