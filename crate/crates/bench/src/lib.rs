//! Shared fixtures for the criterion benchmarks.

use cxr_core::datagen::{generate_phantom, PhantomSpec};
use cxr_core::{ClassLabel, GrayImage};

/// A deterministic 64x64-style phantom for kernel benchmarks.
pub fn phantom(size: usize) -> GrayImage {
    generate_phantom(&PhantomSpec::new(7, size, ClassLabel::Covid19)).image
}
