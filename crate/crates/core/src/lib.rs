//! Building blocks for streaming a map computation over volunteer devices:
//! the stream lender, the wire protocol, the transport-independent scheduler,
//! the benchmark processors and a deterministic churn simulator.

pub mod coordinator;
pub mod lender;
pub mod processors;
pub mod protocol;
pub mod simnet;
pub mod splitmix;

pub use coordinator::{
    make_report, Action, ConnId, JobConfig, Outcome, Pull, Scheduler, ThroughputReport, WorkerState,
};
pub use lender::{HolderId, Item, Lease, LeaseId, LeaseState, LenderError, Mutant, Settlement, StreamLender};
pub use protocol::{decode_message, encode_message, Message, ProtocolError, TaskSpec};
