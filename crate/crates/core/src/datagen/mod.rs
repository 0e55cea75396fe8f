//! Synthetic fine-grained dataset generation, manifest-driven loading and
//! view augmentation.

mod augment;
mod dataset;
mod render;

pub use augment::{augment, make_views, AugmentConfig, ViewPair};
pub use dataset::{
    generate_dataset, load_dataset, read_glyphs, save_png, Dataset, DatasetSpec, GlyphRecord, Manifest, ManifestRow,
    Split, GLYPH_FILE, MANIFEST_FILE,
};
pub use render::{class_params, levels_per_feature, render, GlyphParams, Placement};
