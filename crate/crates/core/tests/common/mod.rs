#![allow(dead_code)]

pub mod froc;
pub mod frst;
pub mod geometry;
pub mod pipeline;
pub mod prep;
pub mod synth;
