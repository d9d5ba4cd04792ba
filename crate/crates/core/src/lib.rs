#![no_std]

extern crate alloc;

pub mod codec;
pub mod config;
pub mod datagen;
pub mod federation;
pub mod gradcheck;
pub mod losses;
pub mod graph;
pub mod model;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;
