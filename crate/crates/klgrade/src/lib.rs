//! Two-stage KL grading of knee radiographs at desk scale.
//!
//! The crate bundles everything the pipeline needs, end to end:
//!
//! - [`tensor`] — a small f64 reverse-mode autodiff engine (conv, dense,
//!   dense blocks, losses, SGD) with bit-reproducible training.
//! - [`synth`] — a deterministic procedural generator of bilateral "knee
//!   radiograph" images with controllable severity, plus intensity-domain
//!   transforms for domain-shift experiments.
//! - [`ingest`] — DICOM-lite and binary PGM parsing, min-max normalization,
//!   cropping and area-average resizing.
//! - [`locator`] — stage 1: finds the left and right knee (box, coarse
//!   mask, side label) in a bilateral image.
//! - [`grader`] — stage 2: maps a knee crop to a KL grade, with both a
//!   5-way classification head and a scalar regression head.
//! - [`metrics`] — confusion-matrix metrics, Cohen's kappa, MAE with
//!   bootstrap confidence intervals, DICE, box MSE.
//! - [`pipeline`] — dataset splits, two-stage inference, and reproducible
//!   experiment orchestration.

pub mod rng;
pub mod tensor;
