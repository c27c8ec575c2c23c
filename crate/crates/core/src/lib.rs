//! Enhancement of cold-atom absorption images.
//!
//! The crate covers the whole chain from raw camera frames to cloud metrics:
//!
//! * [`image`]: the [`ImageGrid`] carrier, file I/O, region statistics and
//!   optical density from an (atoms, light, dark) frame triplet.
//! * [`sensorsim`]: a shot/read/quantization noise camera model and a
//!   synthetic cloud renderer used as ground truth throughout the tests.
//! * [`filter`]: cloud segmentation, MDL selection of the local Gaussian
//!   width, the radial sigma field and the spatially varying convolution.
//! * [`gray`]: the gamma / circular-arc / identity gray-level transform.
//! * [`metrics`]: Gaussian fitting, FWHM, time-of-flight temperature and
//!   atom number.
//! * [`pipeline`] and [`campaign`]: end-to-end enhancement of one shot and
//!   multi-shot synthetic experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod campaign;
pub mod error;
pub mod filter;
pub mod gray;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod sensorsim;

pub use error::{Error, Result, StageTimings};
pub use filter::{
    adaptive_filter, AdaptiveOutput, BackgroundThresholds, GaussianKernel, MdlConfig, Segmentation, SigmaField,
};
pub use gray::GrayParams;
pub use image::{ImageGrid, RawTriplet, RegionStats};
pub use metrics::{GaussFit1D, PhysicalContext, ShotMetrics};
pub use pipeline::{EnhanceConfig, Enhancement};
pub use sensorsim::{CloudModel, Seed, SensorModel};
