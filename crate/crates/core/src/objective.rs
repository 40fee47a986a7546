//! Training losses: few-shot supervision, transform equivariance, 3D part
//! alignment across the batch, reconstruction, optional chain smoothness,
//! and their weighted total.
//!
//! Conventions shared by the point losses: a per-keypoint error is the L1
//! norm over its coordinates (sum of absolute differences), and a loss is
//! the mean of per-keypoint errors over whichever keypoints participate
//! (annotated, in-bounds, or part members). Losses that can end up with no
//! participants return an exact-zero value plus a "degenerate" flag rather
//! than erroring, so a training step can skip them.

use rand::Rng;
use thiserror::Error;

use crate::diffcore::{concat, DiffError, Graph, Tensor, Value};
use crate::geom::{
    apply_affine_value, umeyama, Affine2D, GeomError, Similarity3D, Skeleton,
};
use crate::nets::{feature_value, FeatureExtractor, KeypointSet, NetError};

#[derive(Debug, Error)]
pub enum ObjError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{what}")]
    BadInput { what: String },
    #[error("loss term '{term}' is not finite")]
    NonFiniteTerm { term: &'static str },
}

fn bad(what: impl Into<String>) -> ObjError {
    ObjError::BadInput { what: what.into() }
}

/// Coefficients of the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub few_shot: f64,
    pub recon: f64,
    pub geo2d: f64,
    pub geo3d: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { few_shot: 1.0, recon: 1.0, geo2d: 1.0, geo3d: 0.1, smooth: 0.02 }
    }
}

fn scalar_const(g: &Graph, x: f64) -> Result<Value, DiffError> {
    g.constant(Tensor::scalar(x))
}

/// Mean over annotated keypoints of the per-keypoint L1 distance between
/// `pred` and `gt` (both `[K,2]` or `[N,K,2]`; `annotated` is flattened
/// over the leading axes). Returns the loss and a flag that is true when
/// nothing was annotated (loss is then exactly zero).
pub fn few_shot_loss(
    pred: &Value,
    gt: &Tensor,
    annotated: &[bool],
) -> Result<(Value, bool), ObjError> {
    let shape = pred.shape();
    if shape.last() != Some(&2) || shape.len() < 2 {
        return Err(bad(format!("expected [..,2] keypoints, got shape {shape:?}")));
    }
    if gt.shape != shape {
        return Err(bad(format!(
            "prediction shape {shape:?} does not match ground truth {:?}",
            gt.shape
        )));
    }
    let k_total: usize = shape[..shape.len() - 1].iter().product();
    if annotated.len() != k_total {
        return Err(bad(format!(
            "annotation mask has {} entries for {k_total} keypoints",
            annotated.len()
        )));
    }
    let g = pred.graph().clone();
    let count = annotated.iter().filter(|&&a| a).count();
    if count == 0 {
        return Ok((scalar_const(&g, 0.0)?, true));
    }
    let inv = 1.0 / count as f64;
    let mut weights = Vec::with_capacity(k_total * 2);
    for &a in annotated {
        let w = if a { inv } else { 0.0 };
        weights.extend_from_slice(&[w, w]);
    }
    let wv = g.constant(Tensor::new(shape.clone(), weights)?)?;
    let gtv = g.constant(gt.clone())?;
    let loss = pred.sub(&gtv)?.abs()?.mul(&wv)?.sum()?;
    Ok((loss, false))
}

/// Equivariance residual between a detection on the transformed image and
/// the transformed detection of the original image: mean per-keypoint L1
/// over the keypoints that stay inside the frame after the transform.
/// Returns the flag = true (and exact zero) when every keypoint leaves the
/// frame.
///
/// `k_warped` must be the detector output on the warped image and
/// `k_plain` the output on the original; both are `[K,2]` graph values so
/// gradients reach the detector through both branches.
pub fn equivariance_loss(
    k_warped: &Value,
    k_plain: &Value,
    t: &Affine2D,
    flip_perm: Option<&[usize]>,
) -> Result<(Value, bool), ObjError> {
    let shape = k_plain.shape();
    if shape.len() != 2 || shape[1] != 2 || k_warped.shape() != shape {
        return Err(bad(format!(
            "expected matching [K,2] keypoint sets, got {:?} and {shape:?}",
            k_warped.shape()
        )));
    }
    let k = shape[0];
    let g = k_plain.graph().clone();
    let (target, in_bounds) = apply_affine_value(k_plain, t, flip_perm)?;
    let count = in_bounds.iter().filter(|&&b| b).count();
    if count == 0 {
        return Ok((scalar_const(&g, 0.0)?, true));
    }
    let inv = 1.0 / count as f64;
    let mut weights = Vec::with_capacity(k * 2);
    for &ok in &in_bounds {
        let w = if ok { inv } else { 0.0 };
        weights.extend_from_slice(&[w, w]);
    }
    let wv = g.constant(Tensor::new(vec![k, 2], weights)?)?;
    let loss = k_warped.sub(&target)?.abs()?.mul(&wv)?.sum()?;
    Ok((loss, false))
}

/// Composed form of [`equivariance_loss`] for tests and tools: runs the
/// supplied detector on the original and the warped image itself.
/// `detect_fn` maps a `[3,H,W]` image tensor to `[K,2]` keypoints in the
/// shared graph. Training loops batch their detector passes instead.
pub fn equivariance_loss_with<F>(
    detect_fn: F,
    image: &Tensor,
    t: &Affine2D,
    flip_perm: Option<&[usize]>,
) -> Result<(Value, bool), ObjError>
where
    F: Fn(&Tensor) -> Result<Value, ObjError>,
{
    let k_plain = detect_fn(image)?;
    let warped = crate::geom::warp_image(image, t)?;
    let k_warped = detect_fn(&warped)?;
    equivariance_loss(&k_warped, &k_plain, t, flip_perm)
}

/// Linear warmup `min(iteration/total, 1)` for augmentation strength.
pub fn warmup_strength(iteration: usize, total: usize) -> Result<f64, ObjError> {
    if total == 0 {
        return Err(bad("warmup total must be positive"));
    }
    Ok((iteration as f64 / total as f64).min(1.0))
}

/// How part partners are chosen across the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairingMode {
    Random,
    Nearest,
}

/// Iteration-driven pairing schedule: random partners early, nearest
/// partners from iteration 200 on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairingState {
    pub iteration: usize,
}

pub const PAIRING_SWITCH_ITERATION: usize = 200;

impl PairingState {
    pub fn mode(&self) -> PairingMode {
        if self.iteration < PAIRING_SWITCH_ITERATION {
            PairingMode::Random
        } else {
            PairingMode::Nearest
        }
    }
}

/// Stacks predicted 2D points and depths into `[N,K,3]` coordinates.
pub fn keypoints_3d(kps: &KeypointSet) -> Result<Value, ObjError> {
    let pshape = kps.points.shape();
    let (n, k) = (pshape[0], pshape[1]);
    let depth = kps.depth.reshape(&[n, k, 1])?;
    Ok(concat(&[&kps.points, &depth], 2)?)
}

/// Output of [`part_align_loss`]: the loss plus bookkeeping that callers
/// log or assert on.
pub struct PartAlign {
    pub loss: Value,
    /// Names of parts skipped for having fewer than 3 keypoints.
    pub skipped: Vec<String>,
    /// One entry per accumulated term: (image, part name, partner image).
    pub pairings: Vec<(usize, String, usize)>,
}

/// Part members of one image as plain coordinates.
fn part_points(data: &Tensor, img: usize, members: &[usize]) -> Vec<[f64; 3]> {
    let k = data.shape[1];
    members
        .iter()
        .map(|&m| {
            let base = (img * k + m) * 3;
            [data.data[base], data.data[base + 1], data.data[base + 2]]
        })
        .collect()
}

/// Least-squares similarity with a translation-only fallback when the
/// source part has no spread (e.g. early training, all points identical).
fn estimate_sim(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<Similarity3D, GeomError> {
    match umeyama(src, dst, true) {
        Ok(sim) => Ok(sim),
        Err(GeomError::DegenerateSource) => {
            let n = src.len() as f64;
            let mut t = [0.0; 3];
            for (s, d) in src.iter().zip(dst) {
                for ax in 0..3 {
                    t[ax] += (d[ax] - s[ax]) / n;
                }
            }
            Ok(Similarity3D { translation: t, ..Similarity3D::identity() })
        }
        Err(e) => Err(e),
    }
}

/// Mean per-point L1 distance between `sim(src)` and `dst` — the residual
/// the pairing search minimizes and the loss accumulates.
fn aligned_l1(src: &[[f64; 3]], dst: &[[f64; 3]], sim: &Similarity3D) -> f64 {
    let mut total = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let p = sim.apply(*s);
        total += (p[0] - d[0]).abs() + (p[1] - d[1]).abs() + (p[2] - d[2]).abs();
    }
    total / src.len() as f64
}

/// Gathers part rows of one image from `[N,K,3]` as a `[|P|,3]` value.
fn gather_part(batch: &Value, img: usize, members: &[usize]) -> Result<Value, DiffError> {
    let rows: Vec<Value> = members
        .iter()
        .map(|&m| batch.slice(&[img, m, 0], &[img + 1, m + 1, 3])?.reshape(&[1, 3]))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&Value> = rows.iter().collect();
    concat(&refs, 0)
}

/// Cross-image part-alignment loss over `[N,K,3]` keypoints.
///
/// For every image and every part (each skeleton part plus the implicit
/// whole-object part, weighted by `skel.whole_part_weight`), a partner
/// image is chosen — uniformly in `Random` mode, by minimum aligned
/// residual in `Nearest` mode (ties to the lowest index) — and the
/// partner's part is aligned onto this image's part with a least-squares
/// similarity. The similarity estimate is computed from detached values:
/// gradients flow through both point sets of the residual but never
/// through the estimate itself. Terms are the mean per-point L1 residual,
/// averaged over images.
pub fn part_align_loss(
    batch_k3d: &Value,
    skel: &Skeleton,
    state: &PairingState,
    rng: &mut impl Rng,
) -> Result<PartAlign, ObjError> {
    let shape = batch_k3d.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(bad(format!("expected [N,K,3] keypoints, got shape {shape:?}")));
    }
    let (n, k) = (shape[0], shape[1]);
    if n < 2 {
        return Err(bad(format!("part alignment needs a batch of >= 2 images, got {n}")));
    }
    if k != skel.num_keypoints {
        return Err(bad(format!(
            "batch has {k} keypoints but skeleton defines {}",
            skel.num_keypoints
        )));
    }

    // Parts in play: declared parts at weight 1, whole object at its soft
    // weight; anything under 3 points cannot anchor a similarity.
    let mut parts: Vec<(String, Vec<usize>, f64)> = Vec::new();
    let mut skipped = Vec::new();
    for p in &skel.parts {
        if p.members.len() < 3 {
            skipped.push(p.name.clone());
        } else {
            parts.push((p.name.clone(), p.members.clone(), 1.0));
        }
    }
    if k >= 3 {
        parts.push(("whole".into(), (0..k).collect(), skel.whole_part_weight));
    } else {
        skipped.push("whole".into());
    }

    let g = batch_k3d.graph().clone();
    let data = batch_k3d.tensor();
    let mut loss: Option<Value> = None;
    let mut pairings = Vec::new();

    for i in 0..n {
        for (name, members, weight) in &parts {
            let dst = part_points(&data, i, members);
            let partner = match state.mode() {
                PairingMode::Random => {
                    let raw = rng.gen_range(0..n - 1);
                    if raw >= i {
                        raw + 1
                    } else {
                        raw
                    }
                }
                PairingMode::Nearest => {
                    let mut best = (f64::INFINITY, usize::MAX);
                    for c in (0..n).filter(|&c| c != i) {
                        let src = part_points(&data, c, members);
                        let sim = estimate_sim(&src, &dst)?;
                        let r = aligned_l1(&src, &dst, &sim);
                        if r < best.0 {
                            best = (r, c);
                        }
                    }
                    best.1
                }
            };
            pairings.push((i, name.clone(), partner));

            let src = part_points(&data, partner, members);
            let sim = estimate_sim(&src, &dst)?;

            // eta(x) = s·R·x + t with (s,R,t) as constants.
            let mut lin_t = Vec::with_capacity(9);
            for m in 0..3 {
                for j in 0..3 {
                    lin_t.push(sim.scale * sim.rotation[j][m]);
                }
            }
            let lin = g.constant(Tensor::new(vec![3, 3], lin_t)?)?;
            let mut t_tile = Vec::with_capacity(members.len() * 3);
            for _ in 0..members.len() {
                t_tile.extend_from_slice(&sim.translation);
            }
            let trans = g.constant(Tensor::new(vec![members.len(), 3], t_tile)?)?;

            let dst_v = gather_part(batch_k3d, i, members)?;
            let src_v = gather_part(batch_k3d, partner, members)?;
            let aligned = src_v.matmul(&lin)?.add(&trans)?;
            let term = dst_v.sub(&aligned)?.abs()?.sum()?;
            let coef = scalar_const(&g, weight / (members.len() as f64 * n as f64))?;
            let weighted = term.mul(&coef)?;
            loss = Some(match loss {
                None => weighted,
                Some(acc) => acc.add(&weighted)?,
            });
        }
    }

    let loss = match loss {
        Some(v) => v,
        None => scalar_const(&g, 0.0)?,
    };
    Ok(PartAlign { loss, skipped, pairings })
}

/// Reconstruction loss: mean absolute pixel error plus mean absolute
/// feature difference under the pluggable extractor.
pub fn recon_loss(
    recon: &Value,
    target: &Tensor,
    fx: &FeatureExtractor,
) -> Result<Value, ObjError> {
    let shape = recon.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(bad(format!("expected [N,3,H,W] reconstructions, got shape {shape:?}")));
    }
    if target.shape != shape {
        return Err(bad(format!(
            "reconstruction shape {shape:?} does not match target {:?}",
            target.shape
        )));
    }
    let g = recon.graph().clone();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let tv = g.constant(target.clone())?;
    let l1 = recon.sub(&tv)?.abs()?.mean()?;

    let mut feat_term: Option<Value> = None;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let ri = recon.slice(&[i, 0, 0, 0], &[i + 1, 3, h, w])?.reshape(&[3, h, w])?;
        let fr = feature_value(&ri, fx)?;
        let ti = Tensor::new(
            vec![3, h, w],
            target.data[i * 3 * h * w..(i + 1) * 3 * h * w].to_vec(),
        )?;
        let ft_data = crate::nets::extract_features(&ti, fx)?;
        let ft = g.constant(Tensor::new(vec![ft_data.len()], ft_data)?)?;
        let per_image = fr.sub(&ft)?.abs()?.mean()?;
        let scaled = per_image.mul(&scalar_const(&g, inv_n)?)?;
        feat_term = Some(match feat_term {
            None => scaled,
            Some(acc) => acc.add(&scaled)?,
        });
    }
    Ok(l1.add(&feat_term.expect("n >= 1 guaranteed by shape check"))?)
}

/// Straightness penalty over ordered keypoint chains: for each interior
/// point, the squared cosine between the turn normal and the next segment
/// — zero when the chain continues straight, maximal (1) on a right-angle
/// turn. Summed over interior points of all chains.
pub fn chain_smoothness_loss(
    points: &Value,
    chains: &[Vec<usize>],
) -> Result<Value, ObjError> {
    let shape = points.shape();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(bad(format!("expected [K,2] keypoints, got shape {shape:?}")));
    }
    let k = shape[0];
    let g = points.graph().clone();
    for (ci, chain) in chains.iter().enumerate() {
        if chain.len() < 3 {
            return Err(bad(format!("chain {ci} has {} points; need at least 3", chain.len())));
        }
        if let Some(&p) = chain.iter().find(|&&p| p >= k) {
            return Err(bad(format!("chain {ci} index {p} out of range for {k} keypoints")));
        }
        if let Some(w) = chain.windows(2).find(|w| w[0] == w[1]) {
            return Err(bad(format!("chain {ci} repeats keypoint {} consecutively", w[0])));
        }
    }

    let row = |idx: usize| -> Result<Value, DiffError> {
        points.slice(&[idx, 0], &[idx + 1, 2])
    };
    let comp = |v: &Value, c: usize| -> Result<Value, DiffError> {
        v.slice(&[0, c], &[1, c + 1])?.reshape(&[1])
    };

    let mut total = scalar_const(&g, 0.0)?;
    for chain in chains {
        for win in chain.windows(3) {
            let (a, b, c) = (win[0], win[1], win[2]);
            let u = row(b)?.sub(&row(a)?)?;
            let v = row(c)?.sub(&row(b)?)?;
            let (ux, uy) = (comp(&u, 0)?, comp(&u, 1)?);
            let (vx, vy) = (comp(&v, 0)?, comp(&v, 1)?);
            // Turn normal of u against v: cross = ux·vy − uy·vx.
            let cross = ux.mul(&vy)?.sub(&uy.mul(&vx)?)?;
            let u2 = ux.square()?.add(&uy.square()?)?;
            let v2 = vx.square()?.add(&vy.square()?)?;
            let pen = cross.square()?.div(&u2.mul(&v2)?)?;
            total = total.add(&pen)?;
        }
    }
    Ok(total)
}

/// The named scalar terms of one training step. `smooth` is only present
/// when chains are configured.
pub struct LossTerms {
    pub few_shot: Value,
    pub recon: Value,
    pub geo2d: Value,
    pub geo3d: Value,
    pub smooth: Option<Value>,
}

/// Weighted total of the loss terms. Every term must currently be finite;
/// a NaN names the offending term instead of propagating silently.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<Value, ObjError> {
    for (name, weight) in [
        ("few_shot", w.few_shot),
        ("recon", w.recon),
        ("geo2d", w.geo2d),
        ("geo3d", w.geo3d),
        ("smooth", w.smooth),
    ] {
        if !(weight >= 0.0) {
            return Err(bad(format!("weight for '{name}' must be >= 0, got {weight}")));
        }
    }
    let named: Vec<(&'static str, &Value, f64)> = {
        let mut v = vec![
            ("few_shot", &terms.few_shot, w.few_shot),
            ("recon", &terms.recon, w.recon),
            ("geo2d", &terms.geo2d, w.geo2d),
            ("geo3d", &terms.geo3d, w.geo3d),
        ];
        if let Some(s) = &terms.smooth {
            v.push(("smooth", s, w.smooth));
        }
        v
    };
    let g = terms.few_shot.graph().clone();
    let mut total = scalar_const(&g, 0.0)?;
    for (name, term, weight) in named {
        let t = term.tensor();
        if !t.is_scalar() {
            return Err(bad(format!("loss term '{name}' must be scalar, got {:?}", t.shape)));
        }
        if t.data[0].is_nan() {
            return Err(ObjError::NonFiniteTerm { term: name });
        }
        total = total.add(&term.mul(&scalar_const(&g, weight)?)?)?;
    }
    Ok(total)
}
