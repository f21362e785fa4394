//! Iterative refinement of membrane detection probability maps.
//!
//! A small patch-classifying convolutional network produces a per-pixel
//! membrane probability map from an electron-microscopy plane. A second
//! network of the same family is trained to recover the masked center pixel
//! of patches cut from such maps; applying it to a map round after round
//! closes gaps in membranes and removes isolated clutter, which shows up as
//! a drop in the foreground-restricted Rand error of the thresholded
//! segmentation.
//!
//! Module map:
//!
//! * [`tensor`] and [`net`]: dense tensors, layered networks, backprop, SGD.
//! * [`imaging`]: planes, file formats, the dihedral group, mirror padding,
//!   and a synthetic EM-like stack generator.
//! * [`sampling`]: patch extraction, class-balanced sampling, fold plans.
//! * [`training`]: early-stopped training and the bias-correction curve.
//! * [`inference`]: patchwise, test-time-averaged and dense map inference.
//! * [`icnn`]: the center-masked refinement network and the round loop.
//! * [`metrics`]: thresholding, connected components, Rand and pixel error.
//! * [`config`] and [`pipeline`]: the file-driven end-to-end pipeline.

pub mod config;
pub mod error;
pub mod icnn;
pub mod imaging;
pub mod inference;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod sampling;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
