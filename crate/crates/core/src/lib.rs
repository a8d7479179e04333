//! Cycle-stepped simulator of a multi-tenant on-path SmartNIC.
//!
//! Tenants install execution contexts (a match rule, an SLO policy, a
//! kernel cost model and an L2 segment). Matched packets queue in per-flow
//! FMQs, a PU scheduler hands free processing units to FMQs, kernels run to
//! completion and issue DMA or egress transfers that compete for a shared
//! interconnect.
//!
//! ```
//! use osmosim::{preset, run, SimConfig};
//!
//! let scenario = &preset("standalone-reduce").unwrap()[0];
//! let report = run(&SimConfig::default(), scenario).unwrap();
//! assert_eq!(report.flows[0].processed, 500);
//! ```

pub mod config;
pub mod error;
pub mod flows;
pub mod io;
pub mod kernels;
pub mod matching;
pub mod metrics;
pub mod scheduler;
pub mod sim;
pub mod traffic;

pub use config::{FragmentSize, FragmentationMode, IoArbiterKind, PuLimitScale, PuSchedulerKind, SimConfig};
pub use error::{ConfigError, EctxError, ScenarioError, SimError};
pub use metrics::{jain, ppb, priority_adjusted_jain, SimReport};
pub use sim::{run, Simulator};
pub use traffic::{preset, preset_names, Scenario};
