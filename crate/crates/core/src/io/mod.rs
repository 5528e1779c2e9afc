//! On-disk formats and configuration parsing.

pub(crate) mod bin;
mod config;
mod image;
mod sequence;

pub use config::{RunConfig, KEYS};
pub use image::{convert_frames, decode_image, encode_image, export_frames, from_byte, to_byte};
pub use sequence::{
    decode_mask, decode_sequence, encode_mask, encode_sequence, read_mask, read_sequence,
    write_mask, write_sequence,
};
