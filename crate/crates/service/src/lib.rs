//! HTTP service and compositing around a trained generator.

pub mod api;
pub mod compose;
pub mod error;
pub mod http;
