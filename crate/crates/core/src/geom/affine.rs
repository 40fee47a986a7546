//! 2D affine transforms on normalized coordinates, their sampling schedule,
//! and image warping.
//!
//! Conventions (documented once, used everywhere):
//! - A transform acts as `p' = lin·p + trans` on normalized coordinates.
//! - `flip` mirrors x *inside* `lin` (so `det < 0` when flipped); the flag
//!   additionally marks that keypoint identities must be swapped through a
//!   user-supplied left/right permutation.
//! - Photometric jitter (brightness/contrast) applies to image intensities
//!   *before* the geometric warp, so zero padding introduced by the warp
//!   stays exactly zero.
//! - Warping uses inverse mapping with bilinear sampling and zero padding.

use rand::Rng;

use crate::diffcore::{concat, Tensor, Value};

use super::coords::{col_to_x, row_to_y, x_to_col, y_to_row};
use super::GeomError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2D {
    /// Row-major linear part: `x' = lin[0][0]x + lin[0][1]y + trans[0]`.
    pub lin: [[f64; 2]; 2],
    pub trans: [f64; 2],
    /// Whether keypoint identities must be permuted (mirror included in
    /// `lin`).
    pub flip: bool,
    /// Additive intensity shift.
    pub brightness: f64,
    /// Multiplicative contrast around mid-gray: `(v-0.5)*(1+contrast)+0.5`.
    pub contrast: f64,
}

impl Affine2D {
    pub fn identity() -> Self {
        Affine2D {
            lin: [[1.0, 0.0], [0.0, 1.0]],
            trans: [0.0, 0.0],
            flip: false,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    /// Builds `trans ∘ scale·R(angle) ∘ flip` (flip applied to the point
    /// first).
    pub fn from_parts(angle: f64, scale: f64, trans: [f64; 2], flip: bool) -> Self {
        let (s, c) = angle.sin_cos();
        let fx = if flip { -1.0 } else { 1.0 };
        Affine2D {
            lin: [[scale * c * fx, -scale * s], [scale * s * fx, scale * c]],
            trans,
            flip,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn det(&self) -> f64 {
        self.lin[0][0] * self.lin[1][1] - self.lin[0][1] * self.lin[1][0]
    }

    pub fn apply_pt(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.lin[0][0] * p[0] + self.lin[0][1] * p[1] + self.trans[0],
            self.lin[1][0] * p[0] + self.lin[1][1] * p[1] + self.trans[1],
        ]
    }

    /// Geometric inverse: undoes `lin` and `trans`. The flip flag carries
    /// over (the label permutation must be applied again); jitter is
    /// dropped — photometric changes are not invertible here.
    pub fn inverse(&self) -> Result<Affine2D, GeomError> {
        let det = self.det();
        if det.abs() <= 1e-9 {
            return Err(GeomError::NonInvertible);
        }
        let inv = [
            [self.lin[1][1] / det, -self.lin[0][1] / det],
            [-self.lin[1][0] / det, self.lin[0][0] / det],
        ];
        Ok(Affine2D {
            lin: inv,
            trans: [
                -(inv[0][0] * self.trans[0] + inv[0][1] * self.trans[1]),
                -(inv[1][0] * self.trans[0] + inv[1][1] * self.trans[1]),
            ],
            flip: self.flip,
            brightness: 0.0,
            contrast: 0.0,
        })
    }
}

/// Draws a random augmentation at the given warmup strength.
///
/// Ranges scale linearly with `strength` (clamped to `[0,1]`): rotation
/// ±60°·s, translation ±0.1·s per axis, scale in `[1-0.1·s, 1]`, flip with
/// probability 0.5·s, brightness and contrast ±0.5·s.
///
/// Exactly seven uniform draws are consumed in a fixed order (rotation,
/// tx, ty, scale, flip, brightness, contrast) regardless of strength, so
/// random streams stay aligned across schedules.
pub fn sample_transform(strength: f64, rng: &mut impl Rng) -> Affine2D {
    let s = strength.clamp(0.0, 1.0);
    let u_rot: f64 = rng.gen();
    let u_tx: f64 = rng.gen();
    let u_ty: f64 = rng.gen();
    let u_scale: f64 = rng.gen();
    let u_flip: f64 = rng.gen();
    let u_bright: f64 = rng.gen();
    let u_contrast: f64 = rng.gen();

    let angle = (2.0 * u_rot - 1.0) * (std::f64::consts::PI / 3.0) * s;
    let tx = (2.0 * u_tx - 1.0) * 0.1 * s;
    let ty = (2.0 * u_ty - 1.0) * 0.1 * s;
    let scale = 1.0 - 0.1 * s * u_scale;
    let flip = u_flip < 0.5 * s;
    let mut t = Affine2D::from_parts(angle, scale, [tx, ty], flip);
    t.brightness = (2.0 * u_bright - 1.0) * 0.5 * s;
    t.contrast = (2.0 * u_contrast - 1.0) * 0.5 * s;
    t
}

/// Transforms keypoints. When `t.flip` is set, output slot `i` takes input
/// keypoint `perm[i]` (the left/right identity swap) — a flip without an
/// explicit permutation is an error. Returns the transformed points and an
/// in-bounds flag (`|x| <= 1` and `|y| <= 1`).
pub fn apply_affine(
    points: &[[f64; 2]],
    t: &Affine2D,
    flip_perm: Option<&[usize]>,
) -> Result<(Vec<[f64; 2]>, Vec<bool>), GeomError> {
    let perm = resolve_perm(points.len(), t, flip_perm)?;
    let mut out = Vec::with_capacity(points.len());
    let mut in_bounds = Vec::with_capacity(points.len());
    for i in 0..points.len() {
        let src = match &perm {
            Some(p) => points[p[i]],
            None => points[i],
        };
        let q = t.apply_pt(src);
        in_bounds.push(q[0].abs() <= 1.0 && q[1].abs() <= 1.0);
        out.push(q);
    }
    Ok((out, in_bounds))
}

fn resolve_perm(
    k: usize,
    t: &Affine2D,
    flip_perm: Option<&[usize]>,
) -> Result<Option<Vec<usize>>, GeomError> {
    if !t.flip {
        return Ok(None);
    }
    let perm = flip_perm.ok_or(GeomError::FlipWithoutPermutation)?;
    if perm.len() != k || perm.iter().any(|&i| i >= k) {
        return Err(GeomError::BadInput {
            what: format!("flip permutation must index {k} keypoints, got {perm:?}"),
        });
    }
    Ok(Some(perm.to_vec()))
}

/// Differentiable version of [`apply_affine`] for a `[K,2]` value: the same
/// permutation and affine map, built from graph ops so gradients flow back
/// to the keypoints. Bounds flags are computed on the forward data.
pub fn apply_affine_value(
    k: &Value,
    t: &Affine2D,
    flip_perm: Option<&[usize]>,
) -> Result<(Value, Vec<bool>), GeomError> {
    let shape = k.shape();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(GeomError::BadInput {
            what: format!("expected [K,2] keypoints, got shape {shape:?}"),
        });
    }
    let n = shape[0];
    let g = k.graph().clone();
    let perm = resolve_perm(n, t, flip_perm)?;
    let gathered = match &perm {
        None => k.clone(),
        Some(p) => {
            let rows: Vec<Value> = p
                .iter()
                .map(|&src| k.slice(&[src, 0], &[src + 1, 2]))
                .collect::<Result<_, _>>()?;
            let refs: Vec<&Value> = rows.iter().collect();
            concat(&refs, 0)?
        }
    };
    // p' = p @ linᵀ + trans
    let lin_t = g.constant(Tensor::new(
        vec![2, 2],
        vec![t.lin[0][0], t.lin[1][0], t.lin[0][1], t.lin[1][1]],
    )?)?;
    let mut trans_tile = Vec::with_capacity(n * 2);
    for _ in 0..n {
        trans_tile.extend_from_slice(&t.trans);
    }
    let trans = g.constant(Tensor::new(vec![n, 2], trans_tile)?)?;
    let moved = gathered.matmul(&lin_t)?.add(&trans)?;
    let data = moved.tensor();
    let in_bounds = (0..n)
        .map(|i| data.data[2 * i].abs() <= 1.0 && data.data[2 * i + 1].abs() <= 1.0)
        .collect();
    Ok((moved, in_bounds))
}

/// Applies photometric jitter then warps a `[C,H,W]` image by `t` (inverse
/// mapping, bilinear, zero padding). Intensities are clamped to `[0,1]`
/// after jitter.
pub fn warp_image(img: &Tensor, t: &Affine2D) -> Result<Tensor, GeomError> {
    if img.shape.len() != 3 {
        return Err(GeomError::BadInput {
            what: format!("expected a [C,H,W] image, got shape {:?}", img.shape),
        });
    }
    let (c, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let mut src = img.data.clone();
    if t.brightness != 0.0 || t.contrast != 0.0 {
        for v in &mut src {
            *v = ((*v - 0.5) * (1.0 + t.contrast) + 0.5 + t.brightness).clamp(0.0, 1.0);
        }
    }
    let inv = t.inverse()?;
    let mut out = vec![0.0; c * h * w];
    for r in 0..h {
        let y = row_to_y(r, h);
        for col in 0..w {
            let p = inv.apply_pt([col_to_x(col, w), y]);
            let cf = x_to_col(p[0], w);
            let rf = y_to_row(p[1], h);
            let c0 = cf.floor();
            let r0 = rf.floor();
            let fx = cf - c0;
            let fy = rf - r0;
            let (c0, r0) = (c0 as isize, r0 as isize);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let tap = |rr: isize, cc: isize| -> f64 {
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        0.0
                    } else {
                        plane[rr as usize * w + cc as usize]
                    }
                };
                let v = (1.0 - fy) * ((1.0 - fx) * tap(r0, c0) + fx * tap(r0, c0 + 1))
                    + fy * ((1.0 - fx) * tap(r0 + 1, c0) + fx * tap(r0 + 1, c0 + 1));
                out[ch * h * w + r * w + col] = v;
            }
        }
    }
    Ok(Tensor { shape: vec![c, h, w], data: out, requires_grad: false, grad: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_moves_nothing() {
        let t = Affine2D::identity();
        let pts = [[0.3, -0.7], [0.0, 0.0]];
        let (out, inb) = apply_affine(&pts, &t, None).unwrap();
        assert_eq!(out, pts.to_vec());
        assert!(inb.iter().all(|&b| b));
    }

    #[test]
    fn translation_can_push_out_of_bounds() {
        let mut t = Affine2D::identity();
        t.trans = [0.5, 0.0];
        let (out, inb) = apply_affine(&[[0.8, 0.0]], &t, None).unwrap();
        assert!((out[0][0] - 1.3).abs() < 1e-15);
        assert!(!inb[0]);
    }

    #[test]
    fn round_trip_through_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let t = sample_transform(1.0, &mut rng);
            let inv = t.inverse().unwrap();
            for _ in 0..5 {
                let p = [rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0];
                let q = inv.apply_pt(t.apply_pt(p));
                assert!((q[0] - p[0]).abs() <= 1e-12 && (q[1] - p[1]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn strength_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_transform(0.0, &mut rng);
        assert_eq!(t, Affine2D::identity());
    }

    #[test]
    fn draw_ranges_respect_strength() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let max_angle = std::f64::consts::PI / 3.0;
        for _ in 0..10_000 {
            let t = sample_transform(1.0, &mut rng);
            let det = t.det().abs();
            // |det| = scale² with scale in [0.9, 1].
            assert!((0.81..=1.0 + 1e-12).contains(&det), "det {det}");
            assert!(t.trans[0].abs() <= 0.1 && t.trans[1].abs() <= 0.1);
            assert!(t.brightness.abs() <= 0.5 && t.contrast.abs() <= 0.5);
            // Recover |angle| from the (possibly mirrored) rotation block.
            let fx = if t.flip { -1.0 } else { 1.0 };
            let angle = (t.lin[1][0] * fx).atan2(t.lin[0][0] * fx);
            assert!(angle.abs() <= max_angle + 1e-12);
        }
    }

    #[test]
    fn flip_frequency_matches_half_strength() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let flips = (0..n).filter(|_| sample_transform(1.0, &mut rng).flip).count();
        let freq = flips as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "flip frequency {freq}");
    }

    #[test]
    fn flip_without_permutation_is_an_error() {
        let t = Affine2D::from_parts(0.0, 1.0, [0.0, 0.0], true);
        assert!(matches!(
            apply_affine(&[[0.0, 0.0]], &t, None),
            Err(GeomError::FlipWithoutPermutation)
        ));
    }

    #[test]
    fn flip_permutation_relabels() {
        let t = Affine2D::from_parts(0.0, 1.0, [0.0, 0.0], true);
        let pts = [[0.5, 0.1], [-0.5, 0.1]];
        let (out, _) = apply_affine(&pts, &t, Some(&[1, 0])).unwrap();
        // Slot 0 takes old point 1, mirrored: (-0.5,0.1) -> (0.5,0.1).
        assert_eq!(out[0], [0.5, 0.1]);
        assert_eq!(out[1], [-0.5, 0.1]);
    }

    #[test]
    fn value_version_matches_pure_version() {
        use crate::diffcore::Graph;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = sample_transform(1.0, &mut rng);
            let pts: Vec<[f64; 2]> = (0..4)
                .map(|_| [rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0])
                .collect();
            let perm = [2usize, 3, 0, 1];
            let (pure, inb_pure) = apply_affine(&pts, &t, Some(&perm)).unwrap();
            let g = Graph::new();
            let flat: Vec<f64> = pts.iter().flatten().copied().collect();
            let kv = g.leaf(&Tensor::new(vec![4, 2], flat).unwrap()).unwrap();
            let (moved, inb_val) = apply_affine_value(&kv, &t, Some(&perm)).unwrap();
            let data = moved.tensor().data;
            for i in 0..4 {
                assert!((data[2 * i] - pure[i][0]).abs() < 1e-12);
                assert!((data[2 * i + 1] - pure[i][1]).abs() < 1e-12);
            }
            assert_eq!(inb_pure, inb_val);
        }
    }

    #[test]
    fn warp_identity_preserves_image() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.1, 0.4, 0.7, 0.9]).unwrap();
        let out = warp_image(&img, &Affine2D::identity()).unwrap();
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_translation_moves_content_with_zero_padding() {
        // 1x1 bright pixel at (0,0) of a 4x4 image, translate by +half image.
        let mut data = vec![0.0; 16];
        data[0] = 1.0;
        let img = Tensor::new(vec![1, 4, 4], data).unwrap();
        let mut t = Affine2D::identity();
        t.trans = [1.0, 1.0]; // +2 pixels on a 4-wide grid
        let out = warp_image(&img, &t).unwrap();
        assert!((out.data[2 * 4 + 2] - 1.0).abs() < 1e-12);
        assert_eq!(out.data[0], 0.0);
    }

    #[test]
    fn jitter_applies_before_warp_so_padding_stays_zero() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.5; 4]).unwrap();
        let mut t = Affine2D::identity();
        t.brightness = 0.3;
        t.trans = [1.0, 0.0]; // shifts one column of padding in
        let out = warp_image(&img, &t).unwrap();
        assert_eq!(out.data[0], 0.0, "padding must not be brightened");
        assert!((out.data[1] - 0.8).abs() < 1e-12);
    }
}
