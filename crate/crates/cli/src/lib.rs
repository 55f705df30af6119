//! Batch pipeline driver and synthetic-cohort generator for cardiotraj.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod synth;
pub mod validate;
