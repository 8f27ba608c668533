//! A desk-scale, end-to-end network-measurement data pipeline.
//!
//! Measurement records flow from collectors (poll-based and push-based)
//! through an in-process, topic-routed, token-secured message bus into
//! normalization and enrichment ingesters, an idempotent document store,
//! and a rotating raw archive that supports full replay.
//!
//! The crate is organized around the stages of that flow:
//!
//! - [`bus`] — exchanges, queues, topic bindings, acknowledged delivery
//! - [`auth`] — JWT issuance and scope-checked publish authorization
//! - [`collect`] — the polling collector, push detection, and the
//!   HTCondor/XRootD receivers
//! - [`ingest`] — normalization, dedup IDs, site/ASN/geo enrichment
//! - [`store`] — upsert-by-id document store with query and stats
//! - [`archive`] — daily tar rotation, upload, and replay
//! - [`synth`] — deterministic seeded measurement sources for testing and
//!   demos
//! - [`pipeline`] — wiring it all together, plus the config file format
//!
//! The `examples/` directory has one runnable example per capability; the
//! `sandpipe` binary exposes the operational surface (`pipeline run`,
//! `token issue`, `replay`, `report`).

pub mod archive;
pub mod auth;
pub mod bus;
pub mod clock;
pub mod collect;
pub mod config;
pub mod httpd;
pub mod ingest;
pub mod pipeline;
pub mod records;
pub mod report;
pub mod store;
pub mod synth;

pub use clock::Clock;
