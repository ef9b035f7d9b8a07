//! Style transfer as a data augmentation toolkit.
pub mod augmentor;
pub mod classify;
pub mod cli;
pub mod container;
pub mod descriptive;
pub mod experiments;
pub mod image_tensor;
pub mod losses;
pub mod lossnet;
pub mod nn;
pub mod objective;
pub mod toy;
pub mod trainer;
pub mod transformnet;
pub mod vgg;
