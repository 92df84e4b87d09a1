pub mod calc;
pub mod cli;
pub mod config;
pub mod engine;
pub mod hashing;
pub mod hull;
pub mod pipeline;
pub mod screening;
pub mod similarity;
pub mod structure;
pub mod substitute;
pub mod util;
