//! Curriculum-scheduled student/teacher self-training for a toy
//! set-prediction detector on synthetic scenes.

pub mod augment;
pub mod datagen;
pub mod detector;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod records;
pub mod schedules;

pub use error::{Error, Result};
