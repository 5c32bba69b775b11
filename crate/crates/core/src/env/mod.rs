//! Shipped environments.

pub mod frozen_lake;
pub mod lander;
