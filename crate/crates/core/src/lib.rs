//! Camera-free vehicle-flow prediction from geolocated cellular traffic.
//!
//! Two stages: frozen spatio-temporal graph networks extract multi-channel
//! feature maps from cellular-traffic (GCT) flows and from the sparse camera
//! vehicle flows; a channel-wise graph attention fuses every GCT node with
//! the vehicle features and a third network predicts vehicle flow at all
//! nodes, trained with a learnable two-term MAE loss.
//!
//! Module map:
//! - [`flowdata`]: raw records, interval flow matrices, stats, windows
//! - [`graphspec`]: the road-segment adjacency graph
//! - [`numcore`]: dense tensors, reverse-mode autodiff, Adam, RNG, checkpoints
//! - [`stgnn`]: the Graph-WaveNet-style network used as extractor and predictor
//! - [`fusion`]: multi-channel graph attention and the dynamic loss
//! - [`harness`]: metrics, leave-one-camera-out protocol, reports
//! - [`synthgen`]: synthetic flows with a planted GCT/vehicle relation

pub mod config;
pub mod error;
pub mod flowdata;
pub mod fusion;
pub mod graphspec;
pub mod harness;
pub mod numcore;
pub mod stgnn;
pub mod synthgen;

pub use error::{Error, Result};
