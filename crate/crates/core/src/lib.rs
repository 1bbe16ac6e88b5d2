pub mod autodiff;
pub mod convkit;
pub mod data_io;
pub mod error;
pub mod extractors;
pub mod kernel_matrix;
pub mod metrics;
pub mod network;
pub mod noise;
pub mod tensor;
