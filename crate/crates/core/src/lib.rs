//! Deterministic simulation of LLM serving on a single GPU whose SMs can be
//! split between prefill and decode.
//!
//! The crate is layered bottom-up:
//!
//! * [`hwmodel`]: model shapes, device profiles, and how compute and memory
//!   bandwidth scale with the number of active TPCs.
//! * [`roofline`]: per-operator FLOP/byte counts and batch latency prediction.
//! * [`scheduler`]: chunked-prefill batch formation and the temporal/spatial
//!   mode decision with its partition search.
//! * [`simulator`]: the virtual-clock engine plus static-split, replicated
//!   and disaggregated baselines.
//! * [`workload`] and [`metrics`]: traces in, reports out.

pub mod cli;
pub mod error;
pub mod hwmodel;
pub mod kv;
pub mod metrics;
pub mod request;
pub mod roofline;
pub mod scheduler;
pub mod simulator;
pub mod workload;

pub use error::{Error, Result};
pub use hwmodel::{HardwareProfile, ModelSpec, PartitionConfig};
pub use metrics::MetricsReport;
pub use roofline::{BatchEntry, CostModel, Phase, RooflineOptions};
pub use scheduler::{BatchPlan, ExecMode, ModeDecision, SchedulerConfig};
pub use simulator::{DispatchOverheads, Policy, SimConfig, SimOutcome};
pub use workload::TraceRecord;
