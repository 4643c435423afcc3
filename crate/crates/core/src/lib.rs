//! Conditioned image cropping: text- or image-query driven selection of
//! encoder tokens and boxes, a transformer decoder regressing aesthetic crop
//! offsets from a union box, set-prediction training, and evaluation.

pub mod autograd;
pub mod boxgeom;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod evalsuite;
pub mod querying;
pub mod training;
pub mod util;
