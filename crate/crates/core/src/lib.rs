//! Control-center model for remote operation of automated vehicle fleets.
//!
//! The [`fsm`] module holds the state diagram that every other module
//! executes: simulated vehicles ([`agent`]) apply it locally, the
//! [`center`] re-checks legal profiles before forwarding commands, and
//! [`eventlog`] replays it to audit a run.

pub mod agent;
pub mod center;
pub mod eventlog;
pub mod fsm;
pub mod maneuver;
pub mod policy;
pub mod protocol;
pub mod scenario;
pub mod sim;
