//! Capability ratings, weight sizing and layer splitting.
//!
//! A worker's rating estimates how many KB of layer output it produces per
//! second once its link overhead is included. Every splittable layer is cut
//! into contiguous output-neuron ranges proportional to the ratings, and each
//! worker stores only the kernels or columns its range needs.

mod profile;
mod sizing;
mod split;
mod strategy;

pub use profile::{
    calibrate_k1, compute_rating, rating_with_kc, read_calibration_csv, CalibrationRecord, Fleet, K1Entry, K1Table, Rating, WorkerProfile,
    PACKET_BYTES,
};
pub use sizing::{allocate_weight_sizes, redistribute_overflow, redistribute_overflow_counted};
pub use split::{
    partition_ranges, split_conv, split_layer, split_linear, LayerPartition, Ownership, PartitionPlan, WorkerShare,
};
pub use strategy::{estimate_kc, rate_fleet, RatedFleet, Strategy, DEFAULT_KC_ROUNDS};
