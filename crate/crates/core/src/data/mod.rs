//! Feature files, manifests, batching and the synthetic captioning task.

mod batch;
pub mod features;
mod manifest;
pub mod synthetic;

pub use batch::{make_batch, video_inputs, Batch};
pub use features::{read_features, write_features};
pub use manifest::{
    load_manifest, Manifest, ManifestDoc, ModalitySpec, Split, VideoEntry, VideoRecord,
};

use crate::tensor::Tensor;

/// Longest feature sequence kept per modality.
pub const MAX_FRAMES: usize = 200;

/// Keeps at most `max_rows` rows of `[m, dim]` at a uniform stride
/// (`row i ← floor(i·m / max_rows)`).
pub fn subsample(features: &Tensor, max_rows: usize) -> Tensor {
    let (m, dim) = (features.shape()[0], features.shape()[1]);
    if m <= max_rows {
        return features.clone();
    }
    let mut data = Vec::with_capacity(max_rows * dim);
    for i in 0..max_rows {
        data.extend_from_slice(features.row(i * m / max_rows));
    }
    Tensor::new([max_rows, dim], data).expect("row count matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_uniform_stride() {
        let t = Tensor::from_fn([10, 1], |i| i as f64);
        assert_eq!(subsample(&t, 4).data(), &[0.0, 2.0, 5.0, 7.0]);
        assert_eq!(subsample(&t, 10), t);
        assert_eq!(
            subsample(&Tensor::zeros([450, 3]), MAX_FRAMES).shape(),
            &[200, 3]
        );
    }
}
