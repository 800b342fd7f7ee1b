pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod meta;
pub mod metrics;
pub mod psl;
pub mod tensor;
pub mod train;
