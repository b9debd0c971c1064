#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod calicanet;
pub mod cloud;
pub mod gate;
pub mod geometry;
pub mod image;
pub mod labelgen;
pub mod nn;
pub mod pipeline;
pub mod synth;
