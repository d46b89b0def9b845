//! Navigation workflow: the seven-step state machine, session persistence,
//! the HTTP/WebSocket service for the clinician console and a scripted
//! end-to-end run against the phantom simulator.

pub mod demo;
pub mod files;
pub mod navigator;
pub mod service;
pub mod session;
pub mod slice;
pub mod steps;

pub use navigator::{NavError, Navigator};
pub use session::{SessionConfig, WorkflowSession};
pub use steps::{Op, StepStatus, Workflow, WorkflowStep};
