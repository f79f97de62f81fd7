pub mod autograd;
pub mod model;
pub mod dataio;
pub mod eval;
pub mod learn;
pub mod nn;
pub mod optim;
pub mod physics;
pub mod server;
pub mod shift;
pub mod synth;
pub mod twin;
