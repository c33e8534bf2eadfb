//! Discrete-event model of a production grid running a CMS-style Monte Carlo
//! campaign: workload chunking, DAG wrapping, MOP-style execution, FTSH
//! retries, site and transfer simulation, VO gridmaps, and monitoring.

pub mod campaign;
pub mod dagwrap;
pub mod error;
pub mod executor;
pub mod ftsh;
pub mod monitor;
pub mod gridsim;
pub mod rng;
pub mod scenario;
pub mod vo;
pub mod workload;

pub use error::{DagError, DagViolation, ExecutorError, FtshError, GridError, MonitorError, VoError, WorkloadError};
