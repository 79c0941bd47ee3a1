pub mod nn;
pub mod packet;
pub mod par;
pub mod config;
pub mod extractor;
pub mod train;
pub mod flow;
pub mod synthesis;
pub mod classifier;
pub mod harness;
