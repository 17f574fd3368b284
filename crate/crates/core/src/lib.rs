pub mod gradcheck;
pub mod tensor;
pub mod attention;
pub mod metrics;
pub mod data;
pub mod model;
pub mod checkpoint;
pub mod trainer;
pub mod export;
pub mod cli;
