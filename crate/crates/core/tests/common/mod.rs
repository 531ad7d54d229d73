//! Reference solutions shared by the integration and acceptance suites.

pub mod eady;
