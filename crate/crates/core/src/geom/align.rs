//! Closed-form least-squares similarity alignment between 3D point sets
//! (rotation restricted to proper rotations via an SVD sign correction),
//! plus the residual used to score candidate pairings.

use nalgebra::{Matrix3, Vector3};

use super::GeomError;

/// A similarity transform `p' = scale · R · p + t` with `R` a proper
/// rotation (row-major).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity3D {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Similarity3D {
    pub fn identity() -> Self {
        Similarity3D {
            scale: 1.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            self.scale * (r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2]) + self.translation[0],
            self.scale * (r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2]) + self.translation[1],
            self.scale * (r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2]) + self.translation[2],
        ]
    }
}

/// Least-squares similarity (or rigid, when `with_scale` is false) aligning
/// `src` onto `dst`. Needs at least 3 point pairs; sources with (near-)zero
/// spread are rejected as degenerate. The rotation is forced proper via the
/// smallest-singular-value sign flip, so mirrored correspondences align as
/// well as a rotation can, never via a reflection.
pub fn umeyama(
    src: &[[f64; 3]],
    dst: &[[f64; 3]],
    with_scale: bool,
) -> Result<Similarity3D, GeomError> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(GeomError::BadInput {
            what: format!(
                "alignment needs >=3 matched pairs, got {} and {}",
                src.len(),
                dst.len()
            ),
        });
    }
    let m = src.len() as f64;
    let mut mu_s = Vector3::zeros();
    let mut mu_d = Vector3::zeros();
    for (s, d) in src.iter().zip(dst) {
        mu_s += Vector3::new(s[0], s[1], s[2]);
        mu_d += Vector3::new(d[0], d[1], d[2]);
    }
    mu_s /= m;
    mu_d /= m;

    let mut cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = Vector3::new(s[0], s[1], s[2]) - mu_s;
        let dc = Vector3::new(d[0], d[1], d[2]) - mu_d;
        cov += dc * sc.transpose();
        var_src += sc.norm_squared();
    }
    cov /= m;
    var_src /= m;
    if var_src < 1e-12 {
        return Err(GeomError::DegenerateSource);
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => {
            return Err(GeomError::SvdFailure { what: "SVD did not produce factors".into() })
        }
    };
    let d_sign = if u.determinant() * v_t.determinant() < 0.0 { -1.0 } else { 1.0 };
    let s_fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d_sign));
    let r = u * s_fix * v_t;
    let sv = svd.singular_values;
    let scale = if with_scale { (sv[0] + sv[1] + d_sign * sv[2]) / var_src } else { 1.0 };
    let t = mu_d - scale * r * mu_s;

    // Guard against a numerically broken factorization before handing the
    // result to callers that assume a proper similarity.
    let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
    if orth > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 || !(scale > 0.0) || !scale.is_finite()
    {
        return Err(GeomError::SvdFailure {
            what: format!(
                "invalid rotation (orthogonality error {orth:.2e}, det {:.6}, scale {scale:.6})",
                r.determinant()
            ),
        });
    }

    let mut rotation = [[0.0; 3]; 3];
    for (i, row) in rotation.iter_mut().enumerate() {
        for (j, rij) in row.iter_mut().enumerate() {
            *rij = r[(i, j)];
        }
    }
    Ok(Similarity3D {
        scale,
        rotation,
        translation: [t[0], t[1], t[2]],
    })
}

/// Mean squared distance between `sim(src_i)` and `dst_i`.
pub fn aligned_residual_sq(src: &[[f64; 3]], dst: &[[f64; 3]], sim: &Similarity3D) -> f64 {
    assert_eq!(src.len(), dst.len(), "mismatched point counts");
    if src.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let p = sim.apply(*s);
        total += (p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2) + (p[2] - d[2]).powi(2);
    }
    total / src.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
        let axis = Unit::new_normalize(Vector3::new(
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        ));
        let rot = Rotation3::from_axis_angle(&axis, rng.gen::<f64>() * std::f64::consts::TAU);
        let m = rot.matrix();
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[(i, j)];
            }
        }
        out
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                ]
            })
            .collect()
    }

    #[test]
    fn recovers_known_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let truth = Similarity3D {
                scale: 0.5 + rng.gen::<f64>() * 1.5,
                rotation: random_rotation(&mut rng),
                translation: [
                    rng.gen::<f64>() * 4.0 - 2.0,
                    rng.gen::<f64>() * 4.0 - 2.0,
                    rng.gen::<f64>() * 4.0 - 2.0,
                ],
            };
            let src = random_cloud(&mut rng, 8);
            let dst: Vec<_> = src.iter().map(|&p| truth.apply(p)).collect();
            let est = umeyama(&src, &dst, true).unwrap();
            assert!((est.scale - truth.scale).abs() < 1e-9);
            for i in 0..3 {
                assert!((est.translation[i] - truth.translation[i]).abs() < 1e-9);
                for j in 0..3 {
                    assert!((est.rotation[i][j] - truth.rotation[i][j]).abs() < 1e-9);
                }
            }
            assert!(aligned_residual_sq(&src, &dst, &est) < 1e-18);
        }
    }

    #[test]
    fn rigid_mode_pins_scale_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let src = random_cloud(&mut rng, 6);
        let truth = Similarity3D {
            scale: 1.0,
            rotation: random_rotation(&mut rng),
            translation: [0.3, -0.2, 0.9],
        };
        let dst: Vec<_> = src.iter().map(|&p| truth.apply(p)).collect();
        let est = umeyama(&src, &dst, false).unwrap();
        assert_eq!(est.scale, 1.0);
        assert!(aligned_residual_sq(&src, &dst, &est) < 1e-18);
    }

    #[test]
    fn planar_source_still_recovers() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let src: Vec<[f64; 3]> = (0..6)
                .map(|_| [rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0, 0.0])
                .collect();
            let truth = Similarity3D {
                scale: 1.3,
                rotation: random_rotation(&mut rng),
                translation: [0.1, 0.2, -0.3],
            };
            let dst: Vec<_> = src.iter().map(|&p| truth.apply(p)).collect();
            let est = umeyama(&src, &dst, true).unwrap();
            assert!(aligned_residual_sq(&src, &dst, &est) < 1e-18);
        }
    }

    #[test]
    fn collapsed_source_is_degenerate() {
        let src = vec![[0.5, 0.5, 0.5]; 4];
        let dst = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(umeyama(&src, &dst, true), Err(GeomError::DegenerateSource)));
    }

    #[test]
    fn too_few_points_rejected() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert!(matches!(umeyama(&pts, &pts, true), Err(GeomError::BadInput { .. })));
    }

    #[test]
    fn mirrored_target_yields_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let src = random_cloud(&mut rng, 8);
        let dst: Vec<[f64; 3]> = src.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let est = umeyama(&src, &dst, true).unwrap();
        let r = Matrix3::from_fn(|i, j| est.rotation[i][j]);
        assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn residual_detects_misalignment() {
        let src = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let shifted: Vec<[f64; 3]> = src.iter().map(|p| [p[0] + 1.0, p[1], p[2]]).collect();
        let id = Similarity3D::identity();
        assert!((aligned_residual_sq(&src, &shifted, &id) - 1.0).abs() < 1e-12);
        assert_eq!(aligned_residual_sq(&src, &src, &id), 0.0);
    }
}
