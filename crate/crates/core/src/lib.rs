pub mod architectures;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod relmatrix;
pub mod tensor;
pub mod training;
