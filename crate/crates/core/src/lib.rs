pub mod mesh;
pub mod remesh;
pub mod synth;
pub mod patchify;
pub mod autodiff;
pub mod transformer;
pub mod optim;
pub mod pretrain;
pub mod downstream;
pub mod dataset;
pub mod augment;
pub mod config;
pub mod cli;
