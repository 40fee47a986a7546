//! The normalized coordinate convention.
//!
//! Pixel `(r, c)` on an `H x W` grid sits at the *center* of its cell:
//! `x = (2c+1)/W - 1`, `y = (2r+1)/H - 1`, so coordinates span
//! `[-1 + 1/W, 1 - 1/W]` and the grid is exactly symmetric about the origin.

use crate::diffcore::Tensor;

/// Normalized x of pixel column `c` on a width-`w` grid.
pub fn col_to_x(c: usize, w: usize) -> f64 {
    (2 * c + 1) as f64 / w as f64 - 1.0
}

/// Normalized y of pixel row `r` on a height-`h` grid.
pub fn row_to_y(r: usize, h: usize) -> f64 {
    (2 * r + 1) as f64 / h as f64 - 1.0
}

/// Fractional column of normalized x (inverse of [`col_to_x`]).
pub fn x_to_col(x: f64, w: usize) -> f64 {
    ((x + 1.0) * w as f64 - 1.0) / 2.0
}

/// Fractional row of normalized y (inverse of [`row_to_y`]).
pub fn y_to_row(y: f64, h: usize) -> f64 {
    ((y + 1.0) * h as f64 - 1.0) / 2.0
}

/// Pixel-center coordinates in row-major order: entry `r*w + c` is `(x, y)`.
pub fn grid_xy(h: usize, w: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let y = row_to_y(r, h);
        for c in 0..w {
            out.push([col_to_x(c, w), y]);
        }
    }
    out
}

/// The same grid as an `[H*W, 2]` tensor, ready to matmul against softmax
/// weights.
pub fn grid_tensor(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 2);
    for p in grid_xy(h, w) {
        data.extend_from_slice(&p);
    }
    Tensor { shape: vec![h * w, 2], data, requires_grad: false, grad: None }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_are_symmetric_and_sum_to_zero() {
        // Power-of-two sides make every center (2i+1)/n - 1 exactly
        // representable, so the symmetric sum cancels to exactly 0.0.
        for &(h, w) in &[(8usize, 8usize), (64, 64), (16, 32)] {
            let grid = grid_xy(h, w);
            let sx: f64 = grid.iter().map(|p| p[0]).sum();
            let sy: f64 = grid.iter().map(|p| p[1]).sum();
            assert_eq!(sx, 0.0, "x sum for {h}x{w}");
            assert_eq!(sy, 0.0, "y sum for {h}x{w}");
        }
        // Other sides only cancel to rounding error.
        let grid = grid_xy(5, 7);
        let sx: f64 = grid.iter().map(|p| p[0]).sum();
        let sy: f64 = grid.iter().map(|p| p[1]).sum();
        assert!(sx.abs() < 1e-13 && sy.abs() < 1e-13, "5x7 sums {sx} {sy}");
    }

    #[test]
    fn corners_sit_half_a_pixel_inside() {
        // 4-wide grid: first center at -0.75, last at 0.75.
        assert_eq!(col_to_x(0, 4), -0.75);
        assert_eq!(col_to_x(3, 4), 0.75);
        assert_eq!(row_to_y(0, 2), -0.5);
    }

    #[test]
    fn pixel_round_trip() {
        for c in 0..9 {
            let x = col_to_x(c, 9);
            assert!((x_to_col(x, 9) - c as f64).abs() < 1e-12);
        }
    }
}
