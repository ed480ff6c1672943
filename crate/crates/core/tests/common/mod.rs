#![allow(dead_code)]

pub mod convergence;
pub mod oracles;
