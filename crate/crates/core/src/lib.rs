//! Multi-view texture classification for presentation attack detection.
//!
//! Grayscale images are expanded into 61 views (the raw crop plus 60 BSIF
//! code maps), a lightweight CNN is trained per view, and the per-view
//! predictors are combined by voting, random forests, or an SVM over a
//! selected subset of complementary views.
//!
//! Module map:
//! - [`imaging`]: decoding, cropping, manifests and partitions
//! - [`bsif`]: filter banks, code images and the view universe
//! - [`ica`]: learning BSIF-compatible filter banks from patches
//! - [`cnn`]: the two-conv/two-FC network, training and checkpoints
//! - [`fusion`]: ensemble matrices, random forest, majority and weighted voting
//! - [`selection`]: Cohen's kappa, importance/complementarity selection, meta SVM
//! - [`metrics`]: APCER / BPCER / HTER reports
//! - [`synth`]: deterministic synthetic two-class texture corpus

pub mod bsif;
pub mod cnn;
pub mod error;
pub mod fusion;
pub mod ica;
pub mod imaging;
pub mod metrics;
pub mod rng;
pub mod selection;
pub mod synth;

pub use bsif::{BsifImage, FilterBank, ViewId};
pub use error::{Error, Result};
pub use fusion::EnsembleMatrix;

pub use imaging::{Dataset, GrayImage, Label, Partition, SampleRecord};
pub use metrics::EvalReport;
