pub mod cli;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod signal_io;
pub mod tokenizer;
pub mod training;
