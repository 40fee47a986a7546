//! Few-shot example selection (k-means over image features) and
//! evaluation metrics (NME, PCK, depth rank alignment).
//!
//! Everything here is pure f64 math over plain slices; no autodiff graph
//! is involved. Clustering is made order-independent by walking points in
//! a canonical (lexicographic) order wherever a tie or a weighted draw
//! could otherwise depend on file ordering, so shot selection commutes
//! with dataset permutations.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nets::{extract_features, FeatureExtractor, NetError};
use crate::synthgen::{Dataset, SynthError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what}")]
    BadInput { what: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

fn bad(what: impl Into<String>) -> EvalError {
    EvalError::BadInput { what: what.into() }
}

const KMEANS_TOL: f64 = 1e-9;

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Canonical point order: lexicographic by feature vector, index as the
/// final tiebreak. Every data-dependent choice in the clustering walks
/// points in this order, which makes results permutation-equivariant.
fn canonical_order(features: &[Vec<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&i, &j| {
        for (a, b) in features[i].iter().zip(&features[j]) {
            match a.total_cmp(b) {
                Ordering::Equal => continue,
                other => return other,
            }
        }
        i.cmp(&j)
    });
    order
}

/// Nearest center of `x`; ties go to the lowest center index.
fn nearest_center(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = dist_sq(x, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Sum of squared distances from every point to its assigned center.
pub fn inertia(features: &[Vec<f64>], centers: &[Vec<f64>], assignment: &[usize]) -> f64 {
    features
        .iter()
        .zip(assignment)
        .map(|(x, &c)| dist_sq(x, &centers[c]))
        .sum()
}

/// Lloyd's algorithm with a distance-weighted seeded initialization.
/// Deterministic for fixed inputs; `iters` caps the sweeps (convergence is
/// declared when no center moves more than 1e-9). An empty cluster is
/// re-seeded from the point currently farthest from its own center.
pub fn kmeans(
    features: &[Vec<f64>],
    k: usize,
    seed: u64,
    iters: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>), EvalError> {
    let n = features.len();
    if k == 0 || k > n {
        return Err(bad(format!("k={k} clusters for {n} points")));
    }
    let f = features[0].len();
    for (i, x) in features.iter().enumerate() {
        if x.len() != f {
            return Err(bad(format!("feature {i} has {} dims, expected {f}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("feature {i} contains a non-finite value")));
        }
    }
    let order = canonical_order(features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Distance-weighted initialization: first center is a seeded draw in
    // canonical order; each next center is drawn proportionally to the
    // squared distance to the nearest chosen center.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = order[(rand::Rng::gen::<f64>(&mut rng) * n as f64) as usize % n];
    centers.push(features[first].clone());
    chosen[first] = true;
    while centers.len() < k {
        let d2: Vec<f64> = features
            .iter()
            .map(|x| centers.iter().map(|c| dist_sq(x, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rand::Rng::gen::<f64>(&mut rng) * total;
            let mut found = None;
            for &i in &order {
                u -= d2[i];
                if u <= 0.0 {
                    found = Some(i);
                    break;
                }
            }
            // Float undershoot: fall back to the last canonical point.
            found.unwrap_or(*order.last().expect("n >= 1"))
        } else {
            // All remaining points coincide with a center; take the first
            // unchosen one in canonical order.
            *order.iter().find(|&&i| !chosen[i]).expect("k <= n leaves one")
        };
        chosen[pick] = true;
        centers.push(features[pick].clone());
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..iters {
        for (i, x) in features.iter().enumerate() {
            assignment[i] = nearest_center(x, &centers).0;
        }
        // Re-seed empty clusters from the farthest point (canonical order
        // breaks ties), stealing it into the empty cluster.
        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = (f64::NEG_INFINITY, usize::MAX);
            for &i in &order {
                if counts[assignment[i]] <= 1 {
                    continue; // don't empty another cluster
                }
                let d = dist_sq(&features[i], &centers[assignment[i]]);
                if d > far.0 {
                    far = (d, i);
                }
            }
            if far.1 == usize::MAX {
                continue; // every cluster is a singleton; leave as is
            }
            counts[assignment[far.1]] -= 1;
            assignment[far.1] = c;
            counts[c] = 1;
            centers[c] = features[far.1].clone();
        }
        // Means update.
        let mut sums = vec![vec![0.0f64; f]; k];
        for (i, x) in features.iter().enumerate() {
            for (s, v) in sums[assignment[i]].iter_mut().zip(x) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let mut moved = 0.0;
            for (dim, s) in sums[c].iter().enumerate() {
                let nv = s * inv;
                moved += (nv - centers[c][dim]) * (nv - centers[c][dim]);
                centers[c][dim] = nv;
            }
            shift = shift.max(moved.sqrt());
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    for (i, x) in features.iter().enumerate() {
        assignment[i] = nearest_center(x, &centers).0;
    }
    Ok((centers, assignment))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    KMeans,
    Random,
}

impl std::str::FromStr for SelectionMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kmeans" => Ok(SelectionMethod::KMeans),
            "random" => Ok(SelectionMethod::Random),
            other => Err(format!("unknown selection method '{other}' (kmeans|random)")),
        }
    }
}

/// Picks `k` of `features.len()` items. KMeans returns, for each cluster
/// center, the index of its nearest feature vector (ties to the canonical
/// first; an already-taken index falls through to the next nearest).
/// Random draws uniformly without replacement. Output is sorted ascending.
pub fn select_shots_from_features(
    features: &[Vec<f64>],
    k: usize,
    method: SelectionMethod,
    seed: u64,
) -> Result<Vec<usize>, EvalError> {
    let n = features.len();
    if k == 0 || k > n {
        return Err(bad(format!("cannot select {k} shots from {n} items")));
    }
    let mut picks = match method {
        SelectionMethod::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, n, k).into_vec()
        }
        SelectionMethod::KMeans => {
            let (centers, _) = kmeans(features, k, seed, 100)?;
            let order = canonical_order(features);
            let mut taken = vec![false; n];
            let mut out = Vec::with_capacity(k);
            for center in &centers {
                let mut best = (f64::INFINITY, usize::MAX);
                for &i in &order {
                    if taken[i] {
                        continue;
                    }
                    let d = dist_sq(&features[i], center);
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                let idx = best.1;
                taken[idx] = true;
                out.push(idx);
            }
            out
        }
    };
    picks.sort_unstable();
    Ok(picks)
}

/// Extracts features for the given dataset samples (by global index).
pub fn dataset_features(
    ds: &Dataset,
    indices: &[usize],
    fx: &FeatureExtractor,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = ds.load_image(i)?;
        out.push(extract_features(&img, fx)?);
    }
    Ok(out)
}

/// Selects `k` annotation shots from one split of a dataset; returns
/// global sample indices, sorted ascending.
pub fn select_shots(
    ds: &Dataset,
    split: &str,
    k: usize,
    method: SelectionMethod,
    seed: u64,
    fx: &FeatureExtractor,
) -> Result<Vec<usize>, EvalError> {
    let indices = ds.split_indices(split);
    if indices.is_empty() {
        return Err(bad(format!("split '{split}' is empty or unknown")));
    }
    let local = match method {
        SelectionMethod::Random => {
            select_shots_from_features(&vec![vec![0.0]; indices.len()], k, method, seed)?
        }
        SelectionMethod::KMeans => {
            let features = dataset_features(ds, &indices, fx)?;
            select_shots_from_features(&features, k, method, seed)?
        }
    };
    Ok(local.into_iter().map(|i| indices[i]).collect())
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])).sqrt()
}

/// Normalized mean error: mean over masked keypoints of the Euclidean
/// error divided by the distance between the two normalization keypoints
/// of the ground truth.
pub fn nme(
    pred: &[[f64; 2]],
    gt: &[[f64; 2]],
    eval_mask: &[bool],
    norm_pair: (usize, usize),
) -> Result<f64, EvalError> {
    let k = gt.len();
    if pred.len() != k || eval_mask.len() != k {
        return Err(bad(format!(
            "size mismatch: {} predictions, {k} ground truth, {} mask",
            pred.len(),
            eval_mask.len()
        )));
    }
    let (i, j) = norm_pair;
    if i >= k || j >= k {
        return Err(bad(format!("normalization pair ({i},{j}) out of range for {k} keypoints")));
    }
    let norm = euclid(gt[i], gt[j]);
    if !(norm > 0.0) {
        return Err(bad(format!("zero normalization distance between keypoints {i} and {j}")));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for kp in 0..k {
        if eval_mask[kp] {
            total += euclid(pred[kp], gt[kp]) / norm;
            count += 1;
        }
    }
    if count == 0 {
        return Err(bad("empty evaluation mask"));
    }
    Ok(total / count as f64)
}

/// Fraction of masked keypoints within `thresh * bbox_side` of the ground
/// truth (inclusive boundary).
pub fn pck(
    pred: &[[f64; 2]],
    gt: &[[f64; 2]],
    eval_mask: &[bool],
    bbox_side: f64,
    thresh: f64,
) -> Result<f64, EvalError> {
    let k = gt.len();
    if pred.len() != k || eval_mask.len() != k {
        return Err(bad(format!(
            "size mismatch: {} predictions, {k} ground truth, {} mask",
            pred.len(),
            eval_mask.len()
        )));
    }
    if !(bbox_side > 0.0) {
        return Err(bad(format!("bbox side must be positive, got {bbox_side}")));
    }
    if !(thresh >= 0.0) {
        return Err(bad(format!("threshold must be >= 0, got {thresh}")));
    }
    let limit = thresh * bbox_side;
    let mut hits = 0usize;
    let mut count = 0usize;
    for kp in 0..k {
        if eval_mask[kp] {
            count += 1;
            if euclid(pred[kp], gt[kp]) <= limit {
                hits += 1;
            }
        }
    }
    if count == 0 {
        return Err(bad("empty evaluation mask"));
    }
    Ok(hits as f64 / count as f64)
}

/// Largest side of the axis-aligned bounding box of the points.
pub fn gt_bbox_side(points: &[[f64; 2]]) -> f64 {
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for p in points {
        for ax in 0..2 {
            min[ax] = min[ax].min(p[ax]);
            max[ax] = max[ax].max(p[ax]);
        }
    }
    (max[0] - min[0]).max(max[1] - min[1])
}

/// Fractional ranks with ties averaged (1-based).
fn ranks_average_ties(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; n];
    let mut pos = 0;
    while pos < n {
        let mut end = pos + 1;
        while end < n && xs[order[end]] == xs[order[pos]] {
            end += 1;
        }
        let avg = (pos + 1 + end) as f64 / 2.0; // mean of ranks pos+1..=end
        for &i in &order[pos..end] {
            ranks[i] = avg;
        }
        pos = end;
    }
    ranks
}

/// Spearman rank correlation with average ties; `None` when either side
/// has zero rank variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ra = ranks_average_ties(a);
    let rb = ranks_average_ties(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - ma;
        let db = rb[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Mean |Spearman| between predicted and true depth over visible
/// keypoints, per sample; samples with fewer than 3 visible keypoints (or
/// degenerate rank variance) are skipped.
pub fn depth_alignment_score(
    pred_depth: &[Vec<f64>],
    gt_depth: &[Vec<f64>],
    visible: &[Vec<bool>],
) -> Result<f64, EvalError> {
    if pred_depth.len() != gt_depth.len() || pred_depth.len() != visible.len() {
        return Err(bad(format!(
            "size mismatch: {} pred / {} gt / {} visibility rows",
            pred_depth.len(),
            gt_depth.len(),
            visible.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, vis) in visible.iter().enumerate() {
        let p = &pred_depth[s];
        let g = &gt_depth[s];
        if p.len() != vis.len() || g.len() != vis.len() {
            return Err(bad(format!("sample {s}: depth/visibility length mismatch")));
        }
        let pv: Vec<f64> = p.iter().zip(vis).filter(|(_, &v)| v).map(|(&x, _)| x).collect();
        let gv: Vec<f64> = g.iter().zip(vis).filter(|(_, &v)| v).map(|(&x, _)| x).collect();
        if pv.len() < 3 {
            continue;
        }
        if let Some(rho) = spearman(&pv, &gv) {
            total += rho.abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(bad("no sample had >= 3 visible keypoints with rank variance"));
    }
    Ok(total / count as f64)
}

/// Aggregated evaluation results plus the conventions they were computed
/// under.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub nme: f64,
    pub pck: f64,
    pub per_keypoint_error: Vec<f64>,
    pub n_evaluated: usize,
    pub norm_pair: (usize, usize),
    pub bbox_convention: String,
    pub depth_score: Option<f64>,
}

impl MetricReport {
    /// Fixed-order, fixed-precision text form (supports bitwise diffing).
    pub fn to_text(&self) -> String {
        let mut s = String::from("metrics v1\n");
        let _ = writeln!(s, "nme {:.6}", self.nme);
        let _ = writeln!(s, "pck {:.6}", self.pck);
        let _ = writeln!(s, "n_evaluated {}", self.n_evaluated);
        let _ = writeln!(s, "norm_pair {} {}", self.norm_pair.0, self.norm_pair.1);
        let _ = writeln!(s, "bbox {}", self.bbox_convention);
        if let Some(d) = self.depth_score {
            let _ = writeln!(s, "depth_score {d:.6}");
        }
        let per: Vec<String> =
            self.per_keypoint_error.iter().map(|e| format!("{e:.6}")).collect();
        let _ = writeln!(s, "per_keypoint_error {}", per.join(" "));
        s
    }
}

/// Evaluates per-sample predictions against dataset ground truth.
/// `preds[s]` corresponds to `ds.records[indices[s]]`. Keypoints are
/// pooled across samples; each error is normalized by its own image's
/// normalization distance. Depth ranks are scored when the dataset is 3D
/// and predicted depths are provided.
pub fn evaluate_dataset(
    ds: &Dataset,
    indices: &[usize],
    preds: &[Vec<[f64; 2]>],
    pred_depth: Option<&[Vec<f64>]>,
    thresh: f64,
) -> Result<MetricReport, EvalError> {
    if preds.len() != indices.len() {
        return Err(bad(format!(
            "{} prediction sets for {} samples",
            preds.len(),
            indices.len()
        )));
    }
    if indices.is_empty() {
        return Err(bad("nothing to evaluate"));
    }
    let k = ds.meta.keypoints;
    let norm_pair = ds.meta.norm_pair;
    let mut nme_total = 0.0;
    let mut nme_count = 0usize;
    let mut pck_hits = 0usize;
    let mut per_kp_total = vec![0.0f64; k];
    let mut per_kp_count = vec![0usize; k];
    for (s, &idx) in indices.iter().enumerate() {
        let rec = ds
            .records
            .get(idx)
            .ok_or_else(|| bad(format!("sample index {idx} out of range")))?;
        let pred = &preds[s];
        if pred.len() != k {
            return Err(bad(format!("prediction {s} has {} keypoints, expected {k}", pred.len())));
        }
        let norm = euclid(rec.points[norm_pair.0], rec.points[norm_pair.1]);
        if !(norm > 0.0) {
            return Err(bad(format!("sample {idx}: zero normalization distance")));
        }
        let bbox = gt_bbox_side(&rec.points);
        if !(bbox > 0.0) {
            return Err(bad(format!("sample {idx}: degenerate keypoint bounding box")));
        }
        let limit = thresh * bbox;
        for kp in 0..k {
            if !rec.annotated[kp] {
                continue;
            }
            let e = euclid(pred[kp], rec.points[kp]);
            nme_total += e / norm;
            nme_count += 1;
            if e <= limit {
                pck_hits += 1;
            }
            per_kp_total[kp] += e / norm;
            per_kp_count[kp] += 1;
        }
    }
    if nme_count == 0 {
        return Err(bad("no annotated keypoints in the evaluated samples"));
    }
    let depth_score = match (pred_depth, ds.meta.is_3d) {
        (Some(pd), true) => {
            let gt: Vec<Vec<f64>> = indices
                .iter()
                .map(|&i| ds.records[i].depth.clone().expect("3D dataset has depth"))
                .collect();
            let vis: Vec<Vec<bool>> =
                indices.iter().map(|&i| ds.records[i].visible.clone()).collect();
            Some(depth_alignment_score(pd, &gt, &vis)?)
        }
        _ => None,
    };
    Ok(MetricReport {
        nme: nme_total / nme_count as f64,
        pck: pck_hits as f64 / nme_count as f64,
        per_keypoint_error: per_kp_total
            .iter()
            .zip(&per_kp_count)
            .map(|(t, &c)| if c > 0 { t / c as f64 } else { 0.0 })
            .collect(),
        n_evaluated: indices.len(),
        norm_pair,
        bbox_convention: "inclusive-gt-keypoint-bbox".into(),
        depth_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blob(rng: &mut impl Rng, center: [f64; 2], spread: f64, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                vec![
                    center[0] + spread * (rng.gen::<f64>() - 0.5),
                    center[1] + spread * (rng.gen::<f64>() - 0.5),
                ]
            })
            .collect()
    }

    #[test]
    fn kmeans_with_k_equals_n_is_a_perfect_fit() {
        let features: Vec<Vec<f64>> =
            (0..5).map(|i| vec![i as f64 * 3.0, -(i as f64)]).collect();
        let (centers, assignment) = kmeans(&features, 5, 0, 100).unwrap();
        assert!(inertia(&features, &centers, &assignment) < 1e-18);
        let mut seen: Vec<usize> = assignment.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4], "assignment is a relabeling");
    }

    #[test]
    fn kmeans_separates_two_blobs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut features = blob(&mut rng, [0.0, 0.0], 0.5, 20);
        features.extend(blob(&mut rng, [50.0, 50.0], 0.5, 20));
        let (_, assignment) = kmeans(&features, 2, 3, 100).unwrap();
        let first = assignment[0];
        assert!(assignment[..20].iter().all(|&a| a == first));
        assert!(assignment[20..].iter().all(|&a| a != first));
    }

    #[test]
    fn kmeans_beats_a_random_assignment_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let features = blob(&mut rng, [0.0, 0.0], 10.0, 60);
        let (centers, assignment) = kmeans(&features, 4, 5, 100).unwrap();
        let lloyd = inertia(&features, &centers, &assignment);
        // Random assignment with the same k, centers at cluster means.
        let rand_assign: Vec<usize> = (0..60).map(|_| rng.gen_range(0..4)).collect();
        let f = 2;
        let mut sums = vec![vec![0.0; f]; 4];
        let mut counts = vec![0usize; 4];
        for (x, &a) in features.iter().zip(&rand_assign) {
            counts[a] += 1;
            for d in 0..f {
                sums[a][d] += x[d];
            }
        }
        let rand_centers: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| s.iter().map(|v| v / c.max(1) as f64).collect())
            .collect();
        let baseline = inertia(&features, &rand_centers, &rand_assign);
        assert!(lloyd <= baseline, "lloyd {lloyd} vs baseline {baseline}");
    }

    #[test]
    fn kmeans_handles_duplicates_and_empty_clusters() {
        let mut features = vec![vec![0.0, 0.0]; 5];
        features.extend(vec![vec![10.0, 10.0]; 5]);
        let (centers, assignment) = kmeans(&features, 3, 0, 100).unwrap();
        assert!(inertia(&features, &centers, &assignment) < 1e-18);
    }

    #[test]
    fn kmeans_is_deterministic_and_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let features = blob(&mut rng, [1.0, 2.0], 4.0, 30);
        let a = kmeans(&features, 5, 9, 100).unwrap();
        let b = kmeans(&features, 5, 9, 100).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(kmeans(&features, 31, 0, 100).is_err(), "k > N");
        let mut nan = features.clone();
        nan[3][1] = f64::NAN;
        assert!(kmeans(&nan, 2, 0, 100).is_err(), "non-finite feature");
    }

    #[test]
    fn select_all_returns_identity_for_both_methods() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let features = blob(&mut rng, [0.0, 0.0], 5.0, 8);
        for method in [SelectionMethod::KMeans, SelectionMethod::Random] {
            let picks = select_shots_from_features(&features, 8, method, 7).unwrap();
            assert_eq!(picks, (0..8).collect::<Vec<_>>(), "{method:?}");
        }
    }

    #[test]
    fn selection_is_reproducible_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let features = blob(&mut rng, [0.0, 0.0], 5.0, 40);
        for method in [SelectionMethod::KMeans, SelectionMethod::Random] {
            let a = select_shots_from_features(&features, 6, method, 11).unwrap();
            let b = select_shots_from_features(&features, 6, method, 11).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 6);
            assert!(a.windows(2).all(|w| w[0] < w[1]), "sorted, no duplicates");
        }
        assert!(
            select_shots_from_features(&features, 41, SelectionMethod::Random, 0).is_err(),
            "k > N"
        );
    }

    #[test]
    fn kmeans_selection_covers_duplicated_groups() {
        // 4 groups of identical feature vectors: one pick per group.
        let mut features = Vec::new();
        for g in 0..4 {
            for _ in 0..5 {
                features.push(vec![g as f64 * 100.0, -(g as f64) * 10.0]);
            }
        }
        let picks = select_shots_from_features(&features, 4, SelectionMethod::KMeans, 0).unwrap();
        let groups: Vec<usize> = picks.iter().map(|&i| i / 5).collect();
        let mut dedup = groups.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 4, "one shot per duplicated group, got {picks:?}");
    }

    #[test]
    fn duplicate_nearest_indices_fall_through_to_next_nearest() {
        let features = vec![vec![0.0], vec![0.0]];
        let picks = select_shots_from_features(&features, 2, SelectionMethod::KMeans, 0).unwrap();
        assert_eq!(picks, vec![0, 1]);
    }

    #[test]
    fn kmeans_selection_commutes_with_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut features = blob(&mut rng, [0.0, 0.0], 2.0, 12);
        features.extend(blob(&mut rng, [30.0, -5.0], 2.0, 12));
        let base = select_shots_from_features(&features, 5, SelectionMethod::KMeans, 3).unwrap();
        // Apply a fixed permutation.
        let perm: Vec<usize> = (0..24).map(|i| (i * 7 + 3) % 24).collect();
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&p| features[p].clone()).collect();
        let picks = select_shots_from_features(&permuted, 5, SelectionMethod::KMeans, 3).unwrap();
        // permuted[i] == features[perm[i]]; map picks back through perm.
        let mut mapped: Vec<usize> = picks.iter().map(|&i| perm[i]).collect();
        mapped.sort_unstable();
        assert_eq!(mapped, base);
    }

    #[test]
    fn nme_oracles() {
        let gt = vec![[0.0, 0.0], [1.0, 0.0], [0.3, 0.7], [-0.5, 0.2]];
        let mask = vec![true; 4];
        assert_eq!(nme(&gt, &gt, &mask, (0, 1)).unwrap(), 0.0);
        // Every prediction offset by exactly the normalization distance.
        let off: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        assert!((nme(&off, &gt, &mask, (0, 1)).unwrap() - 1.0).abs() < 1e-15);
        // Zero normalization distance.
        let gt2 = vec![[0.1, 0.1], [0.1, 0.1], [0.5, 0.5], [0.0, 0.0]];
        assert!(nme(&gt2, &gt2, &mask, (0, 1)).is_err());
        // Empty mask.
        assert!(nme(&gt, &gt, &[false; 4], (0, 1)).is_err());
    }

    #[test]
    fn nme_matches_brute_force_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let k = 3 + rng.gen_range(0..6);
            let gt: Vec<[f64; 2]> =
                (0..k).map(|_| [rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0]).collect();
            let pred: Vec<[f64; 2]> =
                (0..k).map(|_| [rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0]).collect();
            let mask: Vec<bool> = (0..k).map(|_| rng.gen::<f64>() < 0.8).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let got = nme(&pred, &gt, &mask, (0, 1)).unwrap();
            // Brute force, written independently.
            let nd = ((gt[0][0] - gt[1][0]).powi(2) + (gt[0][1] - gt[1][1]).powi(2)).sqrt();
            let mut acc = 0.0;
            let mut m = 0;
            for i in 0..k {
                if mask[i] {
                    acc += ((pred[i][0] - gt[i][0]).powi(2) + (pred[i][1] - gt[i][1]).powi(2))
                        .sqrt()
                        / nd;
                    m += 1;
                }
            }
            assert!((got - acc / m as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn nme_is_similarity_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let k = 5;
            let gt: Vec<[f64; 2]> =
                (0..k).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
            let pred: Vec<[f64; 2]> =
                (0..k).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
            let mask = vec![true; k];
            let base = nme(&pred, &gt, &mask, (0, 1)).unwrap();
            let ang = rng.gen::<f64>() * 6.28;
            let s = 0.3 + 2.0 * rng.gen::<f64>();
            let (sn, cs) = ang.sin_cos();
            let t = [rng.gen::<f64>() * 5.0, rng.gen::<f64>() * 5.0];
            let tf = |p: [f64; 2]| {
                [s * (cs * p[0] - sn * p[1]) + t[0], s * (sn * p[0] + cs * p[1]) + t[1]]
            };
            let gt2: Vec<[f64; 2]> = gt.iter().map(|&p| tf(p)).collect();
            let pred2: Vec<[f64; 2]> = pred.iter().map(|&p| tf(p)).collect();
            let moved = nme(&pred2, &gt2, &mask, (0, 1)).unwrap();
            assert!((base - moved).abs() <= 1e-9, "{base} vs {moved}");
        }
    }

    #[test]
    fn pck_oracles_and_inclusive_boundary() {
        let gt = vec![[0.0, 0.0], [1.0, 0.0], [0.5, 0.5], [0.2, 0.9]];
        let mask = vec![true; 4];
        assert_eq!(pck(&gt, &gt, &mask, 1.0, 0.1).unwrap(), 1.0);
        // Exactly on the boundary: inclusive.
        let on: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 0.1, p[1]]).collect();
        assert_eq!(pck(&on, &gt, &mask, 1.0, 0.1).unwrap(), 1.0);
        // Just outside.
        let out: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 0.100001, p[1]]).collect();
        assert_eq!(pck(&out, &gt, &mask, 1.0, 0.1).unwrap(), 0.0);
        // Half exact, half far.
        let half = vec![[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [-5.0, 5.0]];
        assert_eq!(pck(&half, &gt, &mask, 1.0, 0.1).unwrap(), 0.5);
        assert!(pck(&gt, &gt, &[false; 4], 1.0, 0.1).is_err(), "empty mask");
        assert!(pck(&gt, &gt, &mask, 0.0, 0.1).is_err(), "degenerate bbox");
    }

    #[test]
    fn pck_is_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = 10;
        let gt: Vec<[f64; 2]> = (0..k).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        let pred: Vec<[f64; 2]> =
            (0..k).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        let mask = vec![true; k];
        let mut prev = 0.0;
        for step in 0..40 {
            let t = step as f64 * 0.05;
            let p = pck(&pred, &gt, &mask, 1.0, t).unwrap();
            assert!(p >= prev, "thresh {t}");
            prev = p;
        }
    }

    #[test]
    fn ranks_average_tied_values() {
        assert_eq!(ranks_average_ties(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(ranks_average_ties(&[5.0, -1.0, 3.0]), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn spearman_oracles() {
        let a = vec![0.1, 0.5, 0.9, 1.3, 2.0];
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((spearman(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(spearman(&a, &[1.0; 5]).is_none(), "zero variance");
    }

    #[test]
    fn depth_score_handles_sign_skips_and_permutations() {
        let gt = vec![vec![0.1, 0.4, 0.2, 0.9, 0.6]; 4];
        let vis = vec![vec![true; 5]; 4];
        assert_eq!(depth_alignment_score(&gt, &gt, &vis).unwrap(), 1.0);
        let neg: Vec<Vec<f64>> =
            gt.iter().map(|r| r.iter().map(|x| -x).collect()).collect();
        assert_eq!(depth_alignment_score(&neg, &gt, &vis).unwrap(), 1.0, "sign-blind");
        // Fewer than 3 visible: skipped; all skipped is an error.
        let vis2 = vec![vec![true, true, false, false, false]; 4];
        assert!(depth_alignment_score(&gt, &gt, &vis2).is_err());
        // Random permutations decorrelate in expectation.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let base: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let mut mean = 0.0;
        let trials = 1000;
        for _ in 0..trials {
            let perm = rand::seq::index::sample(&mut rng, 12, 12).into_vec();
            let shuffled: Vec<f64> = perm.iter().map(|&i| base[i]).collect();
            mean += spearman(&shuffled, &base).unwrap();
        }
        mean /= trials as f64;
        assert!(mean.abs() <= 0.05, "mean correlation {mean}");
    }

    #[test]
    fn report_text_is_stable() {
        let report = MetricReport {
            nme: 0.1234564,
            pck: 0.75,
            per_keypoint_error: vec![0.1, 0.25],
            n_evaluated: 42,
            norm_pair: (0, 1),
            bbox_convention: "inclusive-gt-keypoint-bbox".into(),
            depth_score: Some(0.5),
        };
        let expected = "metrics v1\n\
                        nme 0.123456\n\
                        pck 0.750000\n\
                        n_evaluated 42\n\
                        norm_pair 0 1\n\
                        bbox inclusive-gt-keypoint-bbox\n\
                        depth_score 0.500000\n\
                        per_keypoint_error 0.100000 0.250000\n";
        assert_eq!(report.to_text(), expected);
    }

    #[test]
    fn dataset_evaluation_of_ground_truth_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let spec = crate::synthgen::quad_3d();
        crate::synthgen::generate_dataset(&spec, &[("test", 6)], 21, dir.path()).unwrap();
        let ds = crate::synthgen::load_dataset(dir.path()).unwrap();
        let indices = ds.split_indices("test");
        let preds: Vec<Vec<[f64; 2]>> =
            indices.iter().map(|&i| ds.records[i].points.clone()).collect();
        let depths: Vec<Vec<f64>> =
            indices.iter().map(|&i| ds.records[i].depth.clone().unwrap()).collect();
        let report = evaluate_dataset(&ds, &indices, &preds, Some(&depths), 0.1).unwrap();
        assert_eq!(report.nme, 0.0);
        assert_eq!(report.pck, 1.0);
        assert_eq!(report.n_evaluated, 6);
        assert_eq!(report.depth_score, Some(1.0));
        assert!(report.per_keypoint_error.iter().all(|&e| e == 0.0));
    }
}
