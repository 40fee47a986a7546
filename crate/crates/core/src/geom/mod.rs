//! Geometry: coordinate grids, keypoint readout from network maps, segment
//! distances, 2D image transforms, closed-form similarity alignment, and
//! skeleton definitions.

mod affine;
mod align;
mod coords;
mod readout;
mod segment;
mod skeleton;

pub use affine::{apply_affine, apply_affine_value, sample_transform, warp_image, Affine2D};
pub use align::{aligned_residual_sq, umeyama, Similarity3D};
pub use coords::{col_to_x, grid_tensor, grid_xy, row_to_y, x_to_col, y_to_row};
pub use readout::{soft_argmax, soft_argmax_batch, weighted_readout, weighted_readout_batch};
pub use segment::{point_to_segment, seg_distance_value, seg_eval, seg_grads, SegBranch, SegEval, SegGrads};
pub use skeleton::{Part, Skeleton};

use crate::diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    /// Source points for alignment are (numerically) all coincident.
    #[error("degenerate source: points are all coincident (variance < 1e-12)")]
    DegenerateSource,
    #[error("SVD failure: {what}")]
    SvdFailure { what: String },
    #[error("affine matrix is not invertible (|det| <= 1e-9)")]
    NonInvertible,
    /// Flip transforms must state their label permutation explicitly.
    #[error("flip requested without a keypoint permutation (pass the identity explicitly)")]
    FlipWithoutPermutation,
    #[error("invalid input: {what}")]
    BadInput { what: String },
    #[error("skeleton: {what}")]
    BadSkeleton { what: String },
}
