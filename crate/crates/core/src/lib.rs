//! Zone services for a three-zone eyes-off data airlock.
//!
//! Externally submitted jobs cross from the public zone into a secure
//! execution zone only through one-way persistent queues, after a human
//! vetter has signed the job's canonical code hash offline. The secure zone
//! obtains single-use credentials from the restricted-zone data vault,
//! runs the job in a transient airlock, and sends the outputs back for a
//! second round of vetting before anything is released.

pub mod archive;
pub mod attestation;
pub mod audit;
pub mod codec;
pub mod deploy;
pub mod executor;
pub mod fsutil;
pub mod gateway;
pub mod messages;
pub mod model;
pub mod testkit;
pub mod vault;
pub mod wal;

pub use codec::{Clock, Digest, ManualClock, Random256, SystemClock, Timestamp};
pub use model::{JobBundle, JobRecord, JobResultSet, JobState, LifecycleEvent, Zone};
