//! Persistence and ingestion: synthetic scenes, the RLE mask codec, the
//! checkpoint format, config parsing and the dataset directory layout.

mod checkpoint;
mod config;
mod dataset_io;
mod rle;
mod synth;

pub use checkpoint::{
    load_checkpoint_into, load_model, read_checkpoint, save_checkpoint, CheckpointMeta, VERSION,
};
pub use config::{format_model_config, parse_config, parse_config_text, Configs};
pub use dataset_io::{load_dataset, write_dataset};
pub use rle::{rle_decode, rle_encode};
pub use synth::{gen_dataset, Instance, ShapeKind, SyntheticScene};
