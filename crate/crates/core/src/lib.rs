//! In-process streaming stack: a partitioned log broker, pilot-managed worker
//! pools, a micro-batch engine, synthetic producers and analysis operators.

pub mod broker;
pub mod clock;
pub mod engine;
pub mod masa;
pub mod metrics;
pub mod pilot;
pub mod mass;
pub mod experiment;
