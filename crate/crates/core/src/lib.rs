//! Oriented bounding-box pseudo labels from single-point annotations.
//!
//! A point label spawns a bag of horizontal proposals. A dual-stream MIL head
//! learns which proposal explains the point, a scale-consistency loss ties the
//! original view to a resized view, and a dense angle model trained by
//! rotation/flip self-supervision gives the proposals their orientation. The
//! best rotated proposals become the pseudo labels.

pub mod angle;
pub mod autodiff;
pub mod data;
pub mod geometry;
pub mod image;
pub mod mil;
pub mod optim;
pub mod pipeline;
pub mod proposals;
pub mod scheduler;
pub mod ssc;
pub mod views;
