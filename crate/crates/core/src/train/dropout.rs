use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;
use crate::model::EmbeddingView;

/// Per-coordinate scale factors applied to an [`EmbeddingView`]'s rows:
/// `0` for dropped coordinates, `1 / (1 − ratio)` for survivors.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    scale: Matrix,
}

impl DropoutMask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        DropoutMask {
            scale: Matrix::from_vec(rows, cols, vec![1.0; rows * cols]),
        }
    }

    pub fn scale(&self) -> &Matrix {
        &self.scale
    }

    /// Multiplies `values` (same shape as the masked rows) in place.
    pub fn apply(&self, values: &mut Matrix) {
        assert_eq!(
            (values.rows(), values.cols()),
            (self.scale.rows(), self.scale.cols()),
            "dropout mask shape mismatch"
        );
        for (v, s) in values.as_mut_slice().iter_mut().zip(self.scale.as_slice()) {
            *v *= s;
        }
    }
}

/// Inverted dropout on the post-convolution embedding rows. The view's rows
/// are ordered by node index, so the same `seed` over the same node set
/// reproduces the same mask.
pub fn apply_dropout(view: &EmbeddingView, ratio: f64, seed: u64) -> (EmbeddingView, DropoutMask) {
    assert!(
        (0.0..1.0).contains(&ratio),
        "dropout ratio must be in [0, 1)"
    );
    let (rows, cols) = (view.rows().rows(), view.rows().cols());
    let mask = if ratio == 0.0 {
        DropoutMask::ones(rows, cols)
    } else {
        let keep = 1.0 / (1.0 - ratio);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DropoutMask {
            scale: Matrix::from_fn(rows, cols, |_, _| {
                if rng.gen::<f64>() < ratio {
                    0.0
                } else {
                    keep
                }
            }),
        }
    };
    let mut out = view.clone();
    mask.apply(out.rows_mut());
    (out, mask)
}
