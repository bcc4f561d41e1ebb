//! Persistent formats: PSAR array containers, PGM images, and run configs.

pub mod config;
pub mod pgm;
pub mod psar;
