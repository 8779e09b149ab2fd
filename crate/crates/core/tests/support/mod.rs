//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod insitu;
pub mod latent;
pub mod sat;
