pub mod autodiff_optim;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod contrast;
pub mod dataio;
pub mod dp_kernels;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod layers;
pub mod localization;
pub mod pipeline;
pub mod tensor;
