//! Procedural captioned-shapes data, tokenisation, patches and masks.

pub mod io;
mod mask;
mod patch;
mod synth;
mod vocab;

pub use mask::{apply_mask, center_mask, object_mask, BoundingBox, Mask, FILL_VALUE};
pub use patch::{patch_index, patchify, unpatchify};
pub use synth::{
    sample_seed, synth_dataset, synth_sample, Sample, ShapeKind, ShapeSpec, SynthConfig,
};
pub use vocab::{Vocab, CLS, COLORS, COLUMNS, PAD, ROWS, SHAPES, UNK};
