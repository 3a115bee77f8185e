//! Core algorithms for IMU-based facial motion capture.
//!
//! The crate is `no_std`-compatible (with `alloc`): everything here is pure
//! computation. Sockets, files, and the command-line front end live in the
//! companion `faceimu` crate.
//!
//! Pipeline overview:
//!
//! 1. [`facesim`] evaluates a blendshape rig and synthesizes raw IMU signals
//!    (orientation + acceleration) for sensors anchored on the mesh.
//! 2. [`stream`] carries those signals over a bit-exact packet codec, fits
//!    per-sensor clock models, detects the tap marker, and assembles frames.
//! 3. [`calib`] turns raw per-sensor signals into head-motion-free calibrated
//!    signals via neutral-relative rotations and auxiliary-IMU compensation.
//! 4. [`diffusion`] decodes calibrated windows into blendshape weights with a
//!    conditional denoising model built on [`autodiff`].
//! 5. [`metrics`] scores predictions (PVE, landmark PVE, weight MSE) and ranks
//!    sensor placements by acceleration-magnitude variance.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod autodiff;
pub mod calib;
pub mod diffusion;
pub mod facesim;
pub mod geom;
pub mod metrics;
pub mod rng;
pub mod stream;
