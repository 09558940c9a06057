#![allow(dead_code)]

use kps_core::data_io::synthetic::partition;
use kps_core::data_io::{generate_synthetic, SyntheticConfig};
use kps_core::datamodel::Dataset;

/// Small 64×64 synthetic set with three keypoints.
pub fn tiny(n: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        n_images: n,
        num_keypoints: 3,
        image_size: (64, 64),
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

pub fn tiny_parts(n_train: usize, n_val: usize, n_test: usize) -> (Dataset, Dataset, Dataset) {
    partition(&tiny(n_train + n_val + n_test, 7), n_train, n_val).unwrap()
}

/// Copy of `ds` where the samples at `unlabeled` indices lose their labels.
pub fn strip_labels(ds: &Dataset, unlabeled: &[usize]) -> Dataset {
    let mut out = ds.clone();
    for &i in unlabeled {
        out.samples[i].labeled = false;
        out.samples[i].keypoints = None;
    }
    out
}
