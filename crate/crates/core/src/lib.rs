//! Core services of a single-node imaging research platform.

pub mod dicom;
pub mod dimse;
pub mod archive;
pub mod auth;
pub mod clock;
pub mod extension;
pub mod federation;
pub mod fixtures;
pub mod par;
pub mod semver;
pub mod workflow;
