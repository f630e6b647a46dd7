//! Activity-travel pattern mining from categorized time series.
//!
//! Each person's stay/trip record becomes a fixed-granularity code sequence
//! ([`series`], built by [`ingest`]). Two views of every sequence are then
//! compared: a topological one, from the persistence landscape of its
//! sequency-ordered Walsh spectrum ([`walsh`], [`topology`], [`features`]),
//! and a geometric one, from alignment edit distance plus agenda
//! dissimilarity ([`geometry`]). [`cluster`] runs affinity propagation on the
//! mixed distance and refines its exemplars; [`eval`] scores the result and
//! [`report`] describes the clusters. [`pipeline`] chains the stages under a
//! [`config::RunConfig`], and [`synth`] produces labeled test populations.

pub mod cluster;
pub mod config;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod ingest;
pub mod matrix;
pub mod pipeline;
pub mod report;
pub mod series;
pub mod synth;
pub mod topology;
pub mod walsh;
