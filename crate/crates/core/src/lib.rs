//! Body-composition analysis from CT volumes: volume I/O, preprocessing, a
//! small 3D CNN engine, U-Net style segmentation models, training, sliding
//! window inference, tissue quantification and agreement metrics.

pub mod checkpoint;
pub mod error;
pub mod inference;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod preproc;
pub mod quantify;
pub mod report;
pub mod rng;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use nn::{Real, Tensor5};
pub use volume::{
    BodyRegionLabel, Dims, HuVolume, LabelVolume, ProbabilityVolume, Spacing, Volume, NUM_CLASSES,
};
