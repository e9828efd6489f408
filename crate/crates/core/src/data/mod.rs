//! Synthetic day/night sequences, cropping and dataset files.

pub mod crop;
pub mod darken;
pub mod dataset;
pub mod image;
pub mod synth;

pub use crop::{crop_search, crop_template, sample_pair, CropConfig, SearchWindow, TrainingPair};
pub use darken::{darken, DarkenParams};
pub use dataset::{read_dataset, write_dataset, Dataset, DatasetManifest};
pub use image::{Frame, Image};
pub use synth::{generate_dataset, synth_scene, DatasetSpec, ObjectShape, SceneConfig, Sequence};
