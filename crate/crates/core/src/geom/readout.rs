//! Differentiable heatmap readouts: soft-argmax coordinates and
//! attention-weighted scalar readouts (used for per-keypoint depth).

use crate::diffcore::Value;

use super::coords::grid_tensor;
use super::GeomError;

/// Shared core: rows of flattened maps -> (coordinates, attention weights).
fn rows_soft_argmax(flat: &Value, h: usize, w: usize) -> Result<(Value, Value), GeomError> {
    let g = flat.graph().clone();
    let weights = flat.softmax(1)?;
    let grid = g.constant(grid_tensor(h, w))?;
    let coords = weights.matmul(&grid)?;
    Ok((coords, weights))
}

/// Soft-argmax of a single `[H,W]` heatmap: softmax over all pixels, then
/// the probability-weighted average of pixel-center coordinates. Returns
/// the `[2]` coordinate and the `[H*W]` attention weights.
pub fn soft_argmax(heat: &Value) -> Result<(Value, Value), GeomError> {
    let shape = heat.shape();
    if shape.len() != 2 {
        return Err(GeomError::BadInput {
            what: format!("soft_argmax expects [H,W], got shape {shape:?}"),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let flat = heat.reshape(&[1, h * w])?;
    let (coords, weights) = rows_soft_argmax(&flat, h, w)?;
    Ok((coords.reshape(&[2])?, weights.reshape(&[h * w])?))
}

/// Batched soft-argmax over `[N,K,H,W]` heatmaps. Returns `[N,K,2]`
/// coordinates and the flattened `[N*K, H*W]` attention weights (row order
/// matches `(n,k)` in row-major order), ready for [`weighted_readout_batch`].
pub fn soft_argmax_batch(heat: &Value) -> Result<(Value, Value), GeomError> {
    let shape = heat.shape();
    if shape.len() != 4 {
        return Err(GeomError::BadInput {
            what: format!("soft_argmax_batch expects [N,K,H,W], got shape {shape:?}"),
        });
    }
    let (n, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let flat = heat.reshape(&[n * k, h * w])?;
    let (coords, weights) = rows_soft_argmax(&flat, h, w)?;
    Ok((coords.reshape(&[n, k, 2])?, weights))
}

fn check_weight_rows(weights: &Value, maps: &Value) -> Result<(), GeomError> {
    let ws = weights.shape();
    let ms = maps.shape();
    if ws.len() != 2 || ws != ms {
        return Err(GeomError::BadInput {
            what: format!("expected matching [R,P] weights and maps, got {ws:?} and {ms:?}"),
        });
    }
    let t = weights.tensor();
    let (rows, cols) = (ws[0], ws[1]);
    for r in 0..rows {
        let sum: f64 = t.data[r * cols..(r + 1) * cols].iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GeomError::BadInput {
                what: format!("weight row {r} sums to {sum}, expected 1"),
            });
        }
    }
    Ok(())
}

/// Attention-weighted readout of one map: `sum(weights * map)` where
/// `weights` is a `[H*W]` distribution (must sum to 1) and `map` is `[H,W]`.
/// Returns a scalar value.
pub fn weighted_readout(weights: &Value, map: &Value) -> Result<Value, GeomError> {
    let ms = map.shape();
    if ms.len() != 2 {
        return Err(GeomError::BadInput {
            what: format!("weighted_readout expects an [H,W] map, got shape {ms:?}"),
        });
    }
    let flat_w = weights.reshape(&[1, ms[0] * ms[1]])?;
    let flat_m = map.reshape(&[1, ms[0] * ms[1]])?;
    let out = weighted_readout_batch(&flat_w, &flat_m)?;
    Ok(out.reshape(&[1])?)
}

/// Row-wise attention-weighted readouts: `weights` and `maps` are both
/// `[R,P]`, each weight row a distribution summing to 1; returns `[R]`
/// readouts.
pub fn weighted_readout_batch(weights: &Value, maps: &Value) -> Result<Value, GeomError> {
    check_weight_rows(weights, maps)?;
    Ok(weights.mul(maps)?.sum_axis(1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, Graph, Tensor};

    #[test]
    fn uniform_heatmap_reads_out_exact_center() {
        let g = Graph::new();
        let heat = g.leaf(&Tensor::zeros(&[4, 4])).unwrap();
        let (coords, weights) = soft_argmax(&heat).unwrap();
        let c = coords.tensor();
        // Power-of-two grid: uniform weights and the symmetric pixel-center
        // grid make both sums exactly representable, hence exactly zero.
        assert_eq!(c.data, vec![0.0, 0.0]);
        let wsum: f64 = weights.tensor().data.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn peaked_heatmap_approaches_pixel_center() {
        let g = Graph::new();
        let mut data = vec![0.0; 64];
        data[2 * 8 + 5] = 60.0; // row 2, col 5 of an 8x8 map
        let heat = g.leaf(&Tensor::new(vec![8, 8], data).unwrap()).unwrap();
        let (coords, _) = soft_argmax(&heat).unwrap();
        let c = coords.tensor();
        let want_x = (2.0 * 5.0 + 1.0) / 8.0 - 1.0;
        let want_y = (2.0 * 2.0 + 1.0) / 8.0 - 1.0;
        assert!((c.data[0] - want_x).abs() < 1e-12);
        assert!((c.data[1] - want_y).abs() < 1e-12);
    }

    #[test]
    fn symmetric_heatmap_has_zero_x() {
        let g = Graph::new();
        // Symmetric about the vertical midline of a 4x4 map.
        #[rustfmt::skip]
        let data = vec![
            0.0, 1.0, 1.0, 0.0,
            2.0, 3.0, 3.0, 2.0,
            0.5, 0.25, 0.25, 0.5,
            0.0, 0.0, 0.0, 0.0,
        ];
        let heat = g.leaf(&Tensor::new(vec![4, 4], data).unwrap()).unwrap();
        let (coords, _) = soft_argmax(&heat).unwrap();
        assert!(coords.tensor().data[0].abs() < 1e-15);
    }

    #[test]
    fn batch_matches_single_maps() {
        let g = Graph::new();
        let a: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..16).map(|i| (i as f64 * 0.61).cos()).collect();
        let mut all = a.clone();
        all.extend_from_slice(&b);
        let batch = g.leaf(&Tensor::new(vec![1, 2, 4, 4], all).unwrap()).unwrap();
        let (coords, _) = soft_argmax_batch(&batch).unwrap();
        let cb = coords.tensor();
        assert_eq!(cb.shape, vec![1, 2, 2]);
        for (k, data) in [a, b].into_iter().enumerate() {
            let g2 = Graph::new();
            let single = g2.leaf(&Tensor::new(vec![4, 4], data).unwrap()).unwrap();
            let (cs, _) = soft_argmax(&single).unwrap();
            let cs = cs.tensor();
            assert!((cb.data[2 * k] - cs.data[0]).abs() < 1e-15);
            assert!((cb.data[2 * k + 1] - cs.data[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn readout_with_uniform_weights_is_the_mean() {
        let g = Graph::new();
        let w = g.leaf(&Tensor::full(&[4], 0.25)).unwrap();
        let map = g
            .leaf(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let out = weighted_readout(&w, &map).unwrap();
        assert!((out.tensor().data[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn readout_rejects_unnormalized_weights() {
        let g = Graph::new();
        let w = g.leaf(&Tensor::full(&[4], 0.3)).unwrap();
        let map = g.leaf(&Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(
            weighted_readout(&w, &map),
            Err(GeomError::BadInput { .. })
        ));
    }

    #[test]
    fn gradients_flow_through_soft_argmax() {
        let heat0 = Tensor::with_grad(Tensor::new(
            vec![3, 3],
            vec![0.3, -0.2, 0.9, 0.0, 1.2, -0.7, 0.4, 0.1, -0.3],
        )
        .unwrap());
        let res = grad_check(
            |_, ins| {
                let (coords, _) = soft_argmax(&ins[0]).map_err(|e| match e {
                    GeomError::Diff(d) => d,
                    other => panic!("unexpected: {other}"),
                })?;
                coords.square()?.sum()
            },
            &[heat0],
            1e-6,
        )
        .unwrap();
        assert!(res.max_err < 1e-6, "soft-argmax gradient error {}", res.max_err);
    }

    #[test]
    fn gradients_flow_through_weighted_readout() {
        // Feed logits so the weights stay a valid distribution under
        // perturbation (softmax renormalizes).
        let logits = Tensor::with_grad(Tensor::new(vec![1, 4], vec![0.2, -0.4, 0.8, 0.0]).unwrap());
        let map = Tensor::with_grad(Tensor::new(vec![2, 2], vec![2.0, -1.0, 0.5, 3.0]).unwrap());
        let res = grad_check(
            |_, ins| {
                let w = ins[0].softmax(1)?.reshape(&[4])?;
                let out = weighted_readout(&w, &ins[1]).map_err(|e| match e {
                    GeomError::Diff(d) => d,
                    other => panic!("unexpected: {other}"),
                })?;
                out.sum()
            },
            &[logits, map],
            1e-6,
        )
        .unwrap();
        assert!(res.max_err < 1e-6, "readout gradient error {}", res.max_err);
    }
}
