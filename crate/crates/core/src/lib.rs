//! Ground-glass-opacity detection in 3D CT volumes.
//!
//! The crate is organised bottom-up:
//!
//! * [`engine`] — dense 3D tensor ops with analytic backward passes, Xavier
//!   initialization, momentum SGD and a finite-difference gradient checker.
//! * [`model`] — the pyramid-input contracting/expanding detector with
//!   multiscale anchor heads, and the patch classifier used for pretraining.
//! * [`boxes`] — anchor grids, cube IoU, matching, offset coding and NMS.
//! * [`loss`] — the confidence + localization multi-task objective.
//! * [`data`] — volume I/O, preprocessing, tiling, augmentation and phantoms.
//! * [`train`] — two-stage training, hard negative mining and checkpoints.
//! * [`eval`] — FROC analysis and CPM scoring.
//! * [`detect`] — end-to-end inference on a scan.

pub mod boxes;
pub mod data;
pub mod detect;
pub mod engine;
pub mod eval;
pub mod error;
pub mod loss;
pub mod model;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
