//! Volumes, manifests, preprocessing, augmentation, sampling and phantoms.

pub mod augment;
pub mod batch;
pub mod manifest;
pub mod phantom;
pub mod preprocess;
pub mod rng;
pub mod sampling;
pub mod volume;

pub use augment::{augment_sample, balanced_augment_policy, flip_axis, shift_replicate, AugPolicy};
pub use batch::stack_batch;
pub use manifest::{class_stats, ClassStats, Manifest, SampleRecord, Split, DEFAULT_CLASS_NAMES};
pub use phantom::{generate_phantoms, largest_remainder, plan_phantoms, render_phantom, Phantom, PhantomConfig};
pub use preprocess::{
    crop_box, mask_crop, preprocess, resample, window_intensity, Interp, PreprocessConfig, DEFAULT_WINDOW_LEVEL,
    DEFAULT_WINDOW_WIDTH,
};
pub use rng::{keyed_rng, Purpose};
pub use sampling::oversample_indices;
pub use volume::{load_volume, save_volume, Volume};
