//! 2D-to-3D human pose lifting, desk scale and fully self-contained.
//!
//! The crate builds a trainable lifting network out of three ingredients:
//! a pair representation seeded from kinematic-tree priors ([`structural`]),
//! a stack of coupled sequence/pair attention blocks ([`blocks`]), and a
//! recursive refinement head that turns per-joint features into 3D
//! coordinates over several shared-weight rounds ([`refine`]).
//!
//! Everything runs on a small reverse-mode autodiff tape over `f64`
//! ([`tensor`]), so every block is gradient-checkable against central
//! differences. [`kinematics`] provides the skeleton, a synthetic motion
//! generator and dataset I/O; [`train`] ties the pieces into training,
//! evaluation and inference loops driven by the `evolift` binary.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod kinematics;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod refine;
pub mod structural;
pub mod tensor;
pub mod train;
