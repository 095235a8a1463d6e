//! Independent oracles shared by the unit tests and the acceptance suite.
#![allow(dead_code)]

pub mod conv;
pub mod gradients;
pub mod hd95;
