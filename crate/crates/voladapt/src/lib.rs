//! Two-stage pseudo-label domain adaptation for 3D CT volume classification.
//!
//! The pipeline composes 2D slice series into 3D volumes, preprocesses them to
//! a canonical shape, trains an inflated-3D residual classifier with mixup and
//! supervised contrastive learning on annotated data from two domains
//! (stage 1), pseudo-labels the unlabeled target-domain pool with the stage-1
//! model, retrains on the merged set (stage 2), and scores macro F1.
//!
//! Every stage reads and writes the manifest / volume-store formats defined in
//! [`data`], so stages can be driven individually from the `voladapt` CLI or
//! composed programmatically.

pub mod cli;
pub mod config;
pub mod data;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod preprocess;
pub mod pseudo;
pub mod synth;
pub mod train;
