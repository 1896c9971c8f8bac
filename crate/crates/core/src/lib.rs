#![forbid(unsafe_code)]
pub mod data;
pub mod estimate;
pub mod gradcheck;
pub mod ir;
pub mod models;
pub mod nodes;
pub mod optim;
pub mod runtime;
pub mod tensor;
