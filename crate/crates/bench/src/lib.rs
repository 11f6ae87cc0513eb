//! Shared fixtures for the benchmarks.

use uoiskit_core::synthgen::generate_dataset;
use uoiskit_core::{ImageSize, Scene, SceneConfig};

/// Deterministic scenes at the given resolution.
pub fn scenes(h: usize, w: usize, count: usize) -> Vec<Scene> {
    let cfg = SceneConfig {
        size: ImageSize::new(h, w).expect("valid size"),
        ..SceneConfig::default()
    };
    generate_dataset(&cfg, 42, count).expect("fixture scenes")
}
