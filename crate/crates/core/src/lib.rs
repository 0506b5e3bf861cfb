pub mod analysis;
pub mod bench;
pub mod client;
pub mod control;
pub mod coordinator;
pub mod elastic;
pub mod error;
pub mod exchange;
pub mod executor;
pub mod grid;
pub mod ir;
pub mod launcher;
pub mod oracle;
pub mod programs;
pub mod proto;
pub mod wire;
pub mod worker;

pub use error::{Error, Result};
