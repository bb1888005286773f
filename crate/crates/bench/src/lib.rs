//! Shared fixtures for the criterion benches.

use genhints::{RasterImage, SyntheticTaskSpec};

/// `n` images from the default task, fixed seed.
pub fn task_images(n: usize) -> Vec<RasterImage> {
    let (train, _) = SyntheticTaskSpec::default()
        .synth_dataset(n.max(4), 4, 7)
        .expect("default task renders");
    train.images.into_iter().take(n).collect()
}
