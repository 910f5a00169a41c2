//! Patch extraction, dataset manifests, splits, bags and synthetic scenes.

mod dataset;
mod ingest;
mod patches;
pub mod synth;

pub use dataset::{apportion, make_bags, read_manifest, split_dataset, write_manifest, Bag, ManifestRow, Subset};
pub use ingest::ingest;
pub use patches::{
    box_downsample, extract_patches, image_to_tensor, load_rgb, save_rgb, tensor_to_image, tissue_occupancy, window_positions, Patch,
    PatchConfig,
};
pub use synth::{generate_synthetic_dataset, load_case_patches, read_ground_truth, single_ellipse_scenes, GtEllipse, Scene, SynthConfig};
