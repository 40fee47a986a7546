//! Differentiable rendering of the skeleton's edge map.
//!
//! Every bone (keypoint pair) paints a Gaussian ridge along its segment:
//! the value at a pixel decays with the squared distance to the segment,
//! the ridge thickness is controlled by a learnable logit `theta`, and the
//! whole map is scaled by a learnable positive weight `alpha(gamma)`. Each
//! pixel's visibility weight is the keypoint uncertainty propagated along
//! the bone, which makes uncertain edges render lighter. The map is the
//! per-pixel maximum over edges, and gradients flow only through the edge
//! that won each pixel (ties keep the lowest edge index, matching the max
//! reduction in the autodiff engine).
//!
//! For speed, each edge only touches pixels whose centers fall inside the
//! segment's bounding box expanded by five ridge widths (5σ); outside that
//! box its contribution is exactly zero. The truncated mass is below
//! `exp(-25)`, far under the tolerances used anywhere in the crate, but it
//! does mean the map is not perfectly smooth at the box boundary.

use std::cell::RefCell;
use std::path::Path;
use std::rc::Rc;

use crate::diffcore::{sigmoid_f64, softplus_f64, CustomOp, DiffError, Tensor, Value};
use crate::geom::{col_to_x, row_to_y, x_to_col, y_to_row, GeomError};
use crate::geom::{seg_eval, seg_grads, SegBranch, SegEval};
use crate::geom::Skeleton;

/// How keypoint uncertainty enters an edge's pixel value.
///
/// `Multiplicative` (the default) scales the Gaussian ridge by the
/// propagated visibility, `u · exp(-d²/σ²)`, so low-visibility edges fade.
/// `ExponentSigned` instead sharpens the falloff, `exp(-u · d²/σ²)`; it is
/// kept selectable for comparison because it changes how uncertainty and
/// thickness interact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeVariant {
    Multiplicative,
    ExponentSigned,
}

/// Learnable rendering parameters (as plain numbers; the training loop owns
/// them as tensors and passes them into [`render_skeleton`] as graph
/// values).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeParams {
    /// Thickness logit; the ridge variance is `sigma_sq(theta)`.
    pub theta: f64,
    /// Edge-weight logit; the map scale is `alpha(gamma)`.
    pub gamma: f64,
    pub variant: EdgeVariant,
}

impl Default for EdgeParams {
    fn default() -> Self {
        EdgeParams { theta: 1.0, gamma: -4.0, variant: EdgeVariant::Multiplicative }
    }
}

/// Ridge variance `σ² = 1/(1000·e^θ)`. Positive for every finite `theta`
/// and monotone decreasing (larger logit, thinner ridge).
pub fn sigma_sq(theta: f64) -> f64 {
    1.0 / (1000.0 * theta.exp())
}

/// Map scale `α = softplus(γ)`, positive for every finite `gamma`.
pub fn alpha(gamma: f64) -> f64 {
    softplus_f64(gamma)
}

/// Visibility propagated from the endpoints of a bone to the pixel's
/// nearest point on it: the endpoint logit when the projection parameter
/// `t` falls outside the segment, a linear blend inside, squashed through
/// a sigmoid.
pub fn propagate_uncertainty(t: f64, v_i: f64, v_j: f64) -> f64 {
    sigmoid_f64(blend_logit(t, v_i, v_j))
}

fn blend_logit(t: f64, v_i: f64, v_j: f64) -> f64 {
    if t <= 0.0 {
        v_i
    } else if t >= 1.0 {
        v_j
    } else {
        (1.0 - t) * v_i + t * v_j
    }
}

/// Everything the renderer needs besides the per-image inputs.
#[derive(Debug, Clone)]
pub struct RenderSpec {
    pub edges: Vec<(usize, usize)>,
    pub h: usize,
    pub w: usize,
    pub variant: EdgeVariant,
    /// When false, every pixel uses `u = 1`: uncertainty neither shapes the
    /// map nor receives gradient (the ablation switch).
    pub use_uncertainty: bool,
}

impl RenderSpec {
    pub fn from_skeleton(skel: &Skeleton, h: usize, w: usize) -> Self {
        RenderSpec {
            edges: skel.edges.clone(),
            h,
            w,
            variant: EdgeVariant::Multiplicative,
            use_uncertainty: true,
        }
    }
}

/// Half-width of the rendered band around each segment, in ridge widths.
const TRUNCATION_SIGMAS: f64 = 5.0;

/// Inclusive pixel index range whose centers lie in `[flo, fhi]` (both in
/// fractional pixel units), clipped to `0..n`.
fn pixel_range(flo: f64, fhi: f64, n: usize) -> Option<(usize, usize)> {
    let lo = flo.ceil().max(0.0);
    let hi = fhi.floor().min((n - 1) as f64);
    if lo > hi || hi < 0.0 {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

/// The pixel rows/columns an edge can touch: its bounding box grown by 5σ.
fn edge_pixel_bbox(
    a: [f64; 2],
    b: [f64; 2],
    sigma: f64,
    h: usize,
    w: usize,
) -> Option<(usize, usize, usize, usize)> {
    let margin = TRUNCATION_SIGMAS * sigma;
    let xlo = a[0].min(b[0]) - margin;
    let xhi = a[0].max(b[0]) + margin;
    let ylo = a[1].min(b[1]) - margin;
    let yhi = a[1].max(b[1]) + margin;
    let (c0, c1) = pixel_range(x_to_col(xlo, w), x_to_col(xhi, w), w)?;
    let (r0, r1) = pixel_range(y_to_row(ylo, h), y_to_row(yhi, h), h)?;
    Some((r0, r1, c0, c1))
}

/// Pre-scale pixel value of one edge at one pixel, plus the intermediates
/// the backward pass reuses.
fn edge_pixel_value(
    ev: &SegEval,
    v_i: f64,
    v_j: f64,
    inv_sigma_sq: f64,
    variant: EdgeVariant,
    use_uncertainty: bool,
) -> (f64, f64) {
    let u = if use_uncertainty {
        sigmoid_f64(blend_logit(ev.t, v_i, v_j))
    } else {
        1.0
    };
    let s = match variant {
        EdgeVariant::Multiplicative => u * (-ev.d2 * inv_sigma_sq).exp(),
        EdgeVariant::ExponentSigned => (-u * ev.d2 * inv_sigma_sq).exp(),
    };
    (s, u)
}

/// Renders one edge's (pre-scale) map: `u·exp(-d²/σ²)` or the exponent
/// variant, exactly zero outside the edge's 5σ bounding box. Mostly useful
/// for tests and inspection; training goes through [`render_skeleton`].
pub fn render_edge(
    k_i: [f64; 2],
    k_j: [f64; 2],
    v_i: f64,
    v_j: f64,
    params: &EdgeParams,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let sig2 = sigma_sq(params.theta);
    let inv = 1.0 / sig2;
    let mut out = vec![0.0; h * w];
    let Some((r0, r1, c0, c1)) = edge_pixel_bbox(k_i, k_j, sig2.sqrt(), h, w) else {
        return out;
    };
    for r in r0..=r1 {
        let y = row_to_y(r, h);
        for c in c0..=c1 {
            let p = [col_to_x(c, w), y];
            let ev = seg_eval(p, k_i, k_j);
            let (s, _) = edge_pixel_value(&ev, v_i, v_j, inv, params.variant, true);
            out[r * w + c] = s;
        }
    }
    out
}

struct SavedRender {
    /// Winning edge per pixel; `usize::MAX` where nothing rendered.
    argmax: Vec<usize>,
    /// Winning pre-scale value per pixel.
    best: Vec<f64>,
}

struct RenderSkeletonOp {
    spec: RenderSpec,
    saved: RefCell<Option<SavedRender>>,
}

const OP_NAME: &str = "render_skeleton";

fn op_shape_err(detail: String) -> DiffError {
    DiffError::Shape { op: OP_NAME, detail }
}

impl RenderSkeletonOp {
    fn unpack<'a>(
        &self,
        inputs: &[&'a Tensor],
    ) -> Result<(&'a Tensor, &'a Tensor, f64, f64), DiffError> {
        let [points, vis, theta, gamma] = inputs else {
            return Err(op_shape_err(format!("expected 4 inputs, got {}", inputs.len())));
        };
        if points.shape.len() != 2 || points.shape[1] != 2 {
            return Err(op_shape_err(format!("points must be [K,2], got {:?}", points.shape)));
        }
        let k = points.shape[0];
        if vis.shape != [k] {
            return Err(op_shape_err(format!(
                "visibility must be [{k}] to match points, got {:?}",
                vis.shape
            )));
        }
        if theta.numel() != 1 || gamma.numel() != 1 {
            return Err(op_shape_err("theta and gamma must be scalars".into()));
        }
        if let Some(&(i, j)) = self.spec.edges.iter().find(|&&(i, j)| i >= k || j >= k) {
            return Err(op_shape_err(format!("edge ({i},{j}) out of range for {k} keypoints")));
        }
        Ok((points, vis, theta.data[0], gamma.data[0]))
    }
}

impl CustomOp for RenderSkeletonOp {
    fn name(&self) -> &'static str {
        OP_NAME
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, DiffError> {
        let (points, vis, theta, gamma) = self.unpack(inputs)?;
        let (h, w) = (self.spec.h, self.spec.w);
        let sig2 = sigma_sq(theta);
        let inv = 1.0 / sig2;
        let sigma = sig2.sqrt();
        let a_scale = alpha(gamma);

        let mut best = vec![0.0; h * w];
        let mut argmax = vec![usize::MAX; h * w];
        for (ei, &(i, j)) in self.spec.edges.iter().enumerate() {
            let ka = [points.data[2 * i], points.data[2 * i + 1]];
            let kb = [points.data[2 * j], points.data[2 * j + 1]];
            let Some((r0, r1, c0, c1)) = edge_pixel_bbox(ka, kb, sigma, h, w) else {
                continue;
            };
            let (v_i, v_j) = (vis.data[i], vis.data[j]);
            for r in r0..=r1 {
                let y = row_to_y(r, h);
                for c in c0..=c1 {
                    let ev = seg_eval([col_to_x(c, w), y], ka, kb);
                    let (s, _) = edge_pixel_value(
                        &ev,
                        v_i,
                        v_j,
                        inv,
                        self.spec.variant,
                        self.spec.use_uncertainty,
                    );
                    let idx = r * w + c;
                    if s > best[idx] {
                        best[idx] = s;
                        argmax[idx] = ei;
                    }
                }
            }
        }

        let out: Vec<f64> = best.iter().map(|&s| a_scale * s).collect();
        *self.saved.borrow_mut() = Some(SavedRender { argmax, best });
        Tensor::new(vec![h, w], out)
    }

    fn backward(
        &self,
        grad_out: &[f64],
        inputs: &[&Tensor],
        input_grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), DiffError> {
        let (points, vis, theta, gamma) = self.unpack(inputs)?;
        let saved = self.saved.borrow();
        let saved = saved
            .as_ref()
            .ok_or_else(|| op_shape_err("backward called before forward".into()))?;
        let (h, w) = (self.spec.h, self.spec.w);
        let inv = 1.0 / sigma_sq(theta); // = 1000·e^θ; d(inv)/dθ = inv
        let a_scale = alpha(gamma);
        let dalpha = sigmoid_f64(gamma);

        let mut g_points = vec![0.0; points.data.len()];
        let mut g_vis = vec![0.0; vis.data.len()];
        let mut g_theta = 0.0;
        let mut g_gamma = 0.0;

        for r in 0..h {
            let y = row_to_y(r, h);
            for col in 0..w {
                let idx = r * w + col;
                let go = grad_out[idx];
                let ei = saved.argmax[idx];
                if go == 0.0 || ei == usize::MAX {
                    continue;
                }
                let (i, j) = self.spec.edges[ei];
                let ka = [points.data[2 * i], points.data[2 * i + 1]];
                let kb = [points.data[2 * j], points.data[2 * j + 1]];
                let (v_i, v_j) = (vis.data[i], vis.data[j]);
                let ev = seg_eval([col_to_x(col, w), y], ka, kb);
                let s = saved.best[idx];
                let (_, u) = edge_pixel_value(
                    &ev,
                    v_i,
                    v_j,
                    inv,
                    self.spec.variant,
                    self.spec.use_uncertainty,
                );

                g_gamma += go * s * dalpha;
                let gs = go * a_scale;

                // Per-variant partials of the pre-scale value s.
                let (ds_du, ds_dd2, ds_dinv) = match self.spec.variant {
                    EdgeVariant::Multiplicative => {
                        let e = (-ev.d2 * inv).exp();
                        (e, -u * inv * e, -u * ev.d2 * e)
                    }
                    EdgeVariant::ExponentSigned => {
                        (-ev.d2 * inv * s, -u * inv * s, -u * ev.d2 * s)
                    }
                };
                g_theta += gs * ds_dinv * inv;

                let sg = seg_grads(&ev);
                for ax in 0..2 {
                    g_points[2 * i + ax] += gs * ds_dd2 * sg.dd2_da[ax];
                    g_points[2 * j + ax] += gs * ds_dd2 * sg.dd2_db[ax];
                }

                if self.spec.use_uncertainty {
                    let du_dz = u * (1.0 - u);
                    let gz = gs * ds_du * du_dz;
                    match ev.branch {
                        SegBranch::AtA | SegBranch::Degenerate => g_vis[i] += gz,
                        SegBranch::AtB => g_vis[j] += gz,
                        SegBranch::Interior => {
                            g_vis[i] += gz * (1.0 - ev.t);
                            g_vis[j] += gz * ev.t;
                            // The blend point itself moves with the keypoints.
                            let gt = gz * (v_j - v_i);
                            for ax in 0..2 {
                                g_points[2 * i + ax] += gt * sg.dt_da[ax];
                                g_points[2 * j + ax] += gt * sg.dt_db[ax];
                            }
                        }
                    }
                }
            }
        }

        let locals = [g_points, g_vis, vec![g_theta], vec![g_gamma]];
        for (slot, local) in input_grads.iter_mut().zip(locals) {
            if let Some(acc) = slot {
                for (a, l) in acc.iter_mut().zip(local) {
                    *a += l;
                }
            }
        }
        Ok(())
    }
}

/// Renders the full skeleton map `α · max over edges` as a differentiable
/// `[H,W]` graph value. Gradients reach the keypoints, the visibility
/// logits, `theta`, and `gamma`, routed per pixel through the winning edge
/// only.
pub fn render_skeleton(
    points: &Value,
    vis: &Value,
    theta: &Value,
    gamma: &Value,
    spec: &RenderSpec,
) -> Result<Value, GeomError> {
    if spec.edges.is_empty() {
        return Err(GeomError::BadInput { what: "cannot render an empty edge list".into() });
    }
    if spec.h == 0 || spec.w == 0 {
        return Err(GeomError::BadInput {
            what: format!("render target must be non-empty, got {}x{}", spec.h, spec.w),
        });
    }
    let op = Rc::new(RenderSkeletonOp { spec: spec.clone(), saved: RefCell::new(None) });
    let g = points.graph().clone();
    Ok(g.apply_custom(op, &[points, vis, theta, gamma])?)
}

/// Writes an edge map as an 8-bit grayscale PNG, rescaled by `1/alpha` so
/// the brightest possible ridge value maps to white.
pub fn save_edge_map_png(map: &Tensor, alpha: f64, path: &Path) -> Result<(), GeomError> {
    if map.shape.len() != 2 {
        return Err(GeomError::BadInput {
            what: format!("expected an [H,W] map, got shape {:?}", map.shape),
        });
    }
    let (h, w) = (map.shape[0], map.shape[1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let v = (map.data[r * w + c] / alpha).clamp(0.0, 1.0);
            img.put_pixel(c as u32, r as u32, image::Luma([(v * 255.0).round() as u8]));
        }
    }
    img.save(path)
        .map_err(|e| GeomError::BadInput { what: format!("write {}: {e}", path.display()) })
}
