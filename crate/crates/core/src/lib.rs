//! blendsched — a scheduling engine and trace-driven simulator for offline
//! batch LLM inference.
//!
//! Offline workloads mix compute-intensive requests (long prompts, short
//! outputs) with memory-intensive ones (long auto-regressive generations).
//! This crate reorders a fixed request set so both resources stay busy
//! while keeping near-optimal prefix sharing:
//!
//! 1. [`workload`] ingests or synthesizes request traces;
//! 2. [`prefix_tree`] builds a compute-density-annotated radix trie over
//!    the prompts and sorts/splits/merges it;
//! 3. [`scheduler`] walks the sorted tree with a dual scanner, partitions
//!    KV memory between the compute- and memory-heavy sides, and emits a
//!    step-level batch schedule (chunked prefill + continuous batching);
//! 4. [`engine_sim`] replays the schedule against an analytical GPU cost
//!    model and reports makespan, throughput and sharing metrics;
//! 5. [`cli`] ties the stages together over JSONL/CSV files.

pub mod cli;
pub mod config;
pub mod cost_model;
pub mod engine_sim;
pub mod prefix_tree;
pub mod runtime_cache;
pub mod scheduler;
pub mod workload;

pub use config::{default_hardware_config, default_model_config};
pub use cost_model::{AggregateCost, HardwareConfig, ModelConfig, RequestCost};
pub use prefix_tree::{CacheModel, PrefixTree, Request, RequestId, SortedTree, TokenId};
