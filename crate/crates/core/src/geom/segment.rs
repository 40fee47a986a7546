//! Point-to-segment distance with the projection parameter, plus its
//! differentiable graph form. The same branch logic and derivatives drive
//! the skeleton renderer.

use std::rc::Rc;

use crate::diffcore::{CustomOp, DiffError, Graph, Tensor, Value};

use super::GeomError;

/// A segment is treated as a point when its length drops below this.
pub const DEGENERATE_EDGE_EPS: f64 = 1e-12;

/// Which branch of the distance function applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegBranch {
    /// `t <= 0`: nearest point is endpoint `a`.
    AtA,
    /// `t >= 1`: nearest point is endpoint `b`.
    AtB,
    /// `0 < t < 1`: nearest point is the interior projection.
    Interior,
    /// `|b - a| < 1e-12`: the segment is a point (treated like `AtA`, t = 0).
    Degenerate,
}

/// Full evaluation of the point/segment relation, with the intermediates the
/// derivative formulas need.
#[derive(Debug, Clone, Copy)]
pub struct SegEval {
    /// Raw projection parameter `(p-a)·(b-a) / |b-a|²` (0 when degenerate).
    pub t: f64,
    /// Distance from `p` to the segment.
    pub d: f64,
    /// Squared distance.
    pub d2: f64,
    pub branch: SegBranch,
    /// `b - a`.
    pub e: [f64; 2],
    /// `p - a`.
    pub q: [f64; 2],
    /// `|b - a|²`.
    pub l2: f64,
}

pub fn seg_eval(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> SegEval {
    let e = [b[0] - a[0], b[1] - a[1]];
    let q = [p[0] - a[0], p[1] - a[1]];
    let l2 = e[0] * e[0] + e[1] * e[1];
    if l2 < DEGENERATE_EDGE_EPS * DEGENERATE_EDGE_EPS {
        let d2 = q[0] * q[0] + q[1] * q[1];
        return SegEval { t: 0.0, d: d2.sqrt(), d2, branch: SegBranch::Degenerate, e, q, l2 };
    }
    let t = (q[0] * e[0] + q[1] * e[1]) / l2;
    let (d2, branch) = if t <= 0.0 {
        (q[0] * q[0] + q[1] * q[1], SegBranch::AtA)
    } else if t >= 1.0 {
        let r = [p[0] - b[0], p[1] - b[1]];
        (r[0] * r[0] + r[1] * r[1], SegBranch::AtB)
    } else {
        let r = [q[0] - t * e[0], q[1] - t * e[1]];
        (r[0] * r[0] + r[1] * r[1], SegBranch::Interior)
    };
    SegEval { t, d: d2.sqrt(), d2, branch, e, q, l2 }
}

/// Distance from `p` to segment `[a, b]` and the projection parameter `t`.
///
/// `t` is the unclamped projection of `p` onto the segment's line; the
/// distance uses endpoint `a` for `t <= 0`, endpoint `b` for `t >= 1`, and
/// the perpendicular foot in between. A degenerate segment (`|b-a| < 1e-12`)
/// is the point `a`: `t = 0`, `d = |p-a|`.
pub fn point_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let ev = seg_eval(p, a, b);
    (ev.d, ev.t)
}

/// Gradients of `d²` and `t` with respect to `p`, `a`, `b` for one
/// evaluation. Each entry is a 2-vector; `dt_*` are zero outside the
/// interior branch's dependence (t itself still varies with the inputs, but
/// the subgradient convention at the clamped branches routes the distance
/// through the active endpoint only).
#[derive(Debug, Clone, Copy, Default)]
pub struct SegGrads {
    pub dd2_dp: [f64; 2],
    pub dd2_da: [f64; 2],
    pub dd2_db: [f64; 2],
    pub dt_dp: [f64; 2],
    pub dt_da: [f64; 2],
    pub dt_db: [f64; 2],
}

pub fn seg_grads(ev: &SegEval) -> SegGrads {
    let mut g = SegGrads::default();
    match ev.branch {
        SegBranch::AtA | SegBranch::Degenerate => {
            // d² = |p-a|²
            g.dd2_dp = [2.0 * ev.q[0], 2.0 * ev.q[1]];
            g.dd2_da = [-2.0 * ev.q[0], -2.0 * ev.q[1]];
        }
        SegBranch::AtB => {
            // d² = |p-b|²; p-b = q - e
            let r = [ev.q[0] - ev.e[0], ev.q[1] - ev.e[1]];
            g.dd2_dp = [2.0 * r[0], 2.0 * r[1]];
            g.dd2_db = [-2.0 * r[0], -2.0 * r[1]];
        }
        SegBranch::Interior => {
            // r = q - t·e is perpendicular to e (r·e = 0), which collapses
            // the chain rule: ∂d²/∂a = 2(t-1)r, ∂d²/∂b = -2t·r, ∂d²/∂p = 2r.
            let t = ev.t;
            let r = [ev.q[0] - t * ev.e[0], ev.q[1] - t * ev.e[1]];
            g.dd2_dp = [2.0 * r[0], 2.0 * r[1]];
            g.dd2_da = [2.0 * (t - 1.0) * r[0], 2.0 * (t - 1.0) * r[1]];
            g.dd2_db = [-2.0 * t * r[0], -2.0 * t * r[1]];
        }
    }
    if !matches!(ev.branch, SegBranch::Degenerate) {
        // t = q·e / l2 everywhere off the degenerate case.
        let (t, l2) = (ev.t, ev.l2);
        g.dt_dp = [ev.e[0] / l2, ev.e[1] / l2];
        g.dt_da = [
            (2.0 * t * ev.e[0] - ev.e[0] - ev.q[0]) / l2,
            (2.0 * t * ev.e[1] - ev.e[1] - ev.q[1]) / l2,
        ];
        g.dt_db = [(ev.q[0] - 2.0 * t * ev.e[0]) / l2, (ev.q[1] - 2.0 * t * ev.e[1]) / l2];
    }
    g
}

struct SegDistOp;

impl CustomOp for SegDistOp {
    fn name(&self) -> &'static str {
        "point_to_segment"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, DiffError> {
        let [p, a, b] = expect_three(inputs)?;
        let ev = seg_eval(p, a, b);
        Tensor::new(vec![2], vec![ev.d, ev.t])
    }

    fn backward(
        &self,
        grad_out: &[f64],
        inputs: &[&Tensor],
        input_grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), DiffError> {
        let [p, a, b] = expect_three(inputs)?;
        let ev = seg_eval(p, a, b);
        let gr = seg_grads(&ev);
        // d = sqrt(d²); subgradient 0 exactly at d = 0.
        let dd = if ev.d > 0.0 { grad_out[0] / (2.0 * ev.d) } else { 0.0 };
        let dt = grad_out[1];
        let contributions = [
            (0, gr.dd2_dp, gr.dt_dp),
            (1, gr.dd2_da, gr.dt_da),
            (2, gr.dd2_db, gr.dt_db),
        ];
        for (slot, dd2_dx, dt_dx) in contributions {
            if let Some(buf) = &mut input_grads[slot] {
                buf[0] += dd * dd2_dx[0] + dt * dt_dx[0];
                buf[1] += dd * dd2_dx[1] + dt * dt_dx[1];
            }
        }
        Ok(())
    }
}

fn expect_three<'t>(inputs: &[&'t Tensor]) -> Result<[[f64; 2]; 3], DiffError> {
    if inputs.len() != 3 || inputs.iter().any(|t| t.numel() != 2) {
        return Err(DiffError::Shape {
            op: "point_to_segment",
            detail: "expects three 2-vectors (p, a, b)".into(),
        });
    }
    Ok([
        [inputs[0].data[0], inputs[0].data[1]],
        [inputs[1].data[0], inputs[1].data[1]],
        [inputs[2].data[0], inputs[2].data[1]],
    ])
}

/// Differentiable point-to-segment: returns a `[2]` value holding `(d, t)`.
/// Differentiable in all three inputs away from the `t = 0/1` branch
/// boundaries and `d = 0`.
pub fn seg_distance_value(
    g: &Graph,
    p: &Value,
    a: &Value,
    b: &Value,
) -> Result<Value, GeomError> {
    Ok(g.apply_custom(Rc::new(SegDistOp), &[p, a, b])?)
}
