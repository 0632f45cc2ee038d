#![allow(dead_code)]

pub mod fd;
pub mod hand;
pub mod ops;
pub mod stn_checks;
