pub mod certify;
pub mod cli;
pub mod config;
pub mod mc;
pub mod model;
pub mod poly;
pub mod sampling;
pub mod sdp;
pub mod sos;
pub mod synth;
