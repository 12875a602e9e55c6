//! Desk-scale panoptic segmentation of LiDAR-like point clouds with learned
//! instance clustering.
//!
//! The pipeline: a per-point model emits a semantic class distribution and an
//! N-way cluster distribution for every point. Training drives the cluster
//! head with two losses read off a percentage-normalized soft confusion
//! matrix — impurity (mass landing outside the column maxima) and
//! fragmentation (objects claimed by several clusters) — alongside weighted
//! cross-entropy and Lovász-softmax on the semantic head. At inference the
//! argmax cluster ids are fused with the semantic mask into panoptic labels,
//! optionally repaired by DBSCAN-based plausibility heuristics, and scored
//! with the PQ/SQ/RQ/PQ†/mIoU stack.

pub mod config;
pub mod dataio;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod mat;
pub mod metrics;
pub mod postproc;
pub mod softmat;
pub mod synth;
pub mod toytrain;
pub mod types;

pub use error::{Error, Result};
pub use types::{hard_labels, ClassTaxonomy, PanopticLabel, Point3, Prediction, RiderRule, Scene};
