//! Deterministic multi-core cache hierarchy and coherence simulator with
//! timing-obfuscation and speculative-coherence defenses, a small
//! out-of-order core, and attack/experiment drivers.

pub mod cli;
pub mod cpu;
pub mod defense;
pub mod error;
pub mod harness;
pub mod hierarchy;
pub mod plru;
pub mod protocol;
pub mod report;
pub mod system;

pub use cpu::{Core, CoreConfig, ExecutionTrace, Program, SpdmKind};
pub use defense::{DefenseConfig, DefenseId};
pub use error::{Result, SimError};
pub use hierarchy::{Hierarchy, HierarchyConfig, TimingModel};
pub use system::{System, SystemConfig};
