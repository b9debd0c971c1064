//! File formats, KITTI ingestion, dataset generation, overlays and the
//! command line around [`calica_core`].

pub mod cli;
pub mod dataset;
pub mod formats;
pub mod kitti;
pub mod overlay;
pub mod report;

pub use calica_core;
