//! Desk-scale networks: the keypoint detector, the reconstruction decoder,
//! patch masking, and the pluggable feature extractor.
//!
//! Both networks are deliberately small fixed architectures whose channel
//! counts scale with a width multiplier. Parameters live in a
//! [`ParamSet`] owned by the caller; each forward pass binds them into the
//! current graph, so one backward sweep reaches every weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{concat, BoundParams, DiffError, ParamSet, Tensor, Value};
use crate::geom::{soft_argmax_batch, weighted_readout_batch, GeomError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("{what}")]
    BadInput { what: String },
}

fn bad(what: impl Into<String>) -> NetError {
    NetError::BadInput { what: what.into() }
}

/// Network shape configuration shared by both models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    /// Number of keypoints (output heads produce K channels each).
    pub k: usize,
    /// Square input resolution.
    pub image_size: usize,
    /// Scales every internal channel count (min 1 channel per layer).
    pub width_mult: f64,
}

fn scaled(base: usize, mult: f64) -> usize {
    ((base as f64 * mult).round() as usize).max(1)
}

/// Draws a uniform `±1/sqrt(fan_in)` initialization for a conv layer.
fn conv_init(
    rng: &mut impl Rng,
    out_c: usize,
    in_c: usize,
    ksize: usize,
) -> (Tensor, Tensor) {
    let fan_in = in_c * ksize * ksize;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n).map(|_| (2.0 * rng.gen::<f64>() - 1.0) * bound).collect()
    };
    let w = Tensor::new(vec![out_c, in_c, ksize, ksize], draw(out_c * in_c * ksize * ksize))
        .expect("conv weight shape is consistent by construction");
    let b = Tensor::new(vec![out_c], draw(out_c)).expect("bias shape is consistent");
    (w, b)
}

fn add_conv(
    params: &mut ParamSet,
    rng: &mut impl Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
    ksize: usize,
) -> Result<(), DiffError> {
    let (w, b) = conv_init(rng, out_c, in_c, ksize);
    params.add(&format!("{name}.w"), w)?;
    params.add(&format!("{name}.b"), b)
}

fn add_zero_conv(
    params: &mut ParamSet,
    name: &str,
    out_c: usize,
    in_c: usize,
) -> Result<(), DiffError> {
    params.add(&format!("{name}.w"), Tensor::zeros(&[out_c, in_c, 1, 1]))?;
    params.add(&format!("{name}.b"), Tensor::zeros(&[out_c]))
}

fn conv_block(
    p: &BoundParams,
    name: &str,
    x: &Value,
    stride: usize,
    pad: usize,
    relu: bool,
) -> Result<Value, DiffError> {
    let w = p.req(&format!("{name}.w"))?;
    let b = p.req(&format!("{name}.b"))?;
    let y = x.conv2d(w, Some(b), stride, pad)?;
    if relu {
        y.relu()
    } else {
        Ok(y)
    }
}

/// Per-batch detector outputs as graph values.
///
/// `points` are normalized (x, y) coordinates from soft-argmax, `vis` are
/// raw visibility logits, and `depth` raw depth readouts; all three stay
/// differentiable back to the network parameters.
pub struct KeypointSet {
    /// `[N,K,2]` normalized coordinates.
    pub points: Value,
    /// `[N,K]` visibility logits.
    pub vis: Value,
    /// `[N,K]` depth readouts.
    pub depth: Value,
}

/// Encoder–decoder keypoint detector.
///
/// Three stride-2 conv+relu stages down to 1/8 resolution, three
/// nearest-upsample+conv+relu stages back up, then three zero-initialized
/// 1x1 heads emitting K channels each: heatmaps, visibility maps, depth
/// maps. Zero heads mean an untrained detector reads out every keypoint at
/// exactly the image center.
pub struct DetectorNet {
    pub cfg: NetConfig,
    ch: [usize; 3],
}

impl DetectorNet {
    pub fn new(cfg: NetConfig) -> Result<Self, NetError> {
        if cfg.image_size % 8 != 0 || cfg.image_size == 0 {
            return Err(bad(format!(
                "detector needs an image size divisible by 8, got {}",
                cfg.image_size
            )));
        }
        if cfg.k == 0 {
            return Err(bad("detector needs at least one keypoint"));
        }
        let ch = [scaled(16, cfg.width_mult), scaled(32, cfg.width_mult), scaled(64, cfg.width_mult)];
        Ok(DetectorNet { cfg, ch })
    }

    /// Registers this net's parameters (prefix `det.`) with fresh
    /// initialization values.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<(), NetError> {
        let [c1, c2, c3] = self.ch;
        add_conv(params, rng, "det.enc1", c1, 3, 3)?;
        add_conv(params, rng, "det.enc2", c2, c1, 3)?;
        add_conv(params, rng, "det.enc3", c3, c2, 3)?;
        add_conv(params, rng, "det.dec1", c2, c3, 3)?;
        add_conv(params, rng, "det.dec2", c1, c2, 3)?;
        add_conv(params, rng, "det.dec3", c1, c1, 3)?;
        add_zero_conv(params, "det.heat", self.cfg.k, c1)?;
        add_zero_conv(params, "det.vis", self.cfg.k, c1)?;
        add_zero_conv(params, "det.depth", self.cfg.k, c1)?;
        Ok(())
    }

    /// Raw output maps: `(heatmaps, visibility maps, depth maps)`, each
    /// `[N,K,H,W]` at input resolution.
    pub fn forward(
        &self,
        p: &BoundParams,
        images: &Value,
    ) -> Result<(Value, Value, Value), NetError> {
        let shape = images.shape();
        let s = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(bad(format!("expected images [N,3,{s},{s}], got {shape:?}")));
        }
        let x1 = conv_block(p, "det.enc1", images, 2, 1, true)?;
        let x2 = conv_block(p, "det.enc2", &x1, 2, 1, true)?;
        let x3 = conv_block(p, "det.enc3", &x2, 2, 1, true)?;
        let y = conv_block(p, "det.dec1", &x3.upsample2x()?, 1, 1, true)?;
        let y = conv_block(p, "det.dec2", &y.upsample2x()?, 1, 1, true)?;
        let y = conv_block(p, "det.dec3", &y.upsample2x()?, 1, 1, true)?;
        let heat = conv_block(p, "det.heat", &y, 1, 0, false)?;
        let vis = conv_block(p, "det.vis", &y, 1, 0, false)?;
        let depth = conv_block(p, "det.depth", &y, 1, 0, false)?;
        Ok((heat, vis, depth))
    }
}

/// Runs the detector and reads out keypoints: soft-argmax over each
/// heatmap for coordinates, and the same attention weights pooling the
/// visibility and depth maps. Also returns the `[N*K, H*W]` attention
/// weights for reuse.
pub fn detect(
    net: &DetectorNet,
    p: &BoundParams,
    images: &Value,
) -> Result<(KeypointSet, Value), NetError> {
    let (heat, vis_maps, depth_maps) = net.forward(p, images)?;
    let shape = heat.shape();
    let (n, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (points, weights) = soft_argmax_batch(&heat)?;
    let vis = weighted_readout_batch(&weights, &vis_maps.reshape(&[n * k, h * w])?)?
        .reshape(&[n, k])?;
    let depth = weighted_readout_batch(&weights, &depth_maps.reshape(&[n * k, h * w])?)?
        .reshape(&[n, k])?;
    Ok((KeypointSet { points, vis, depth }, weights))
}

/// Small U-shaped reconstruction decoder: 4 input channels (masked RGB +
/// edge map), two down and two up levels with skip connections, 3 output
/// channels through a sigmoid.
pub struct DecoderNet {
    pub cfg: NetConfig,
    ch: [usize; 3],
}

impl DecoderNet {
    pub fn new(cfg: NetConfig) -> Result<Self, NetError> {
        if cfg.image_size % 4 != 0 || cfg.image_size == 0 {
            return Err(bad(format!(
                "decoder needs an image size divisible by 4, got {}",
                cfg.image_size
            )));
        }
        let ch = [scaled(16, cfg.width_mult), scaled(32, cfg.width_mult), scaled(64, cfg.width_mult)];
        Ok(DecoderNet { cfg, ch })
    }

    /// Registers this net's parameters (prefix `dec.`).
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<(), NetError> {
        let [c1, c2, c3] = self.ch;
        add_conv(params, rng, "dec.e0", c1, 4, 3)?;
        add_conv(params, rng, "dec.d1", c2, c1, 3)?;
        add_conv(params, rng, "dec.d2", c3, c2, 3)?;
        add_conv(params, rng, "dec.u1", c2, c3 + c2, 3)?;
        add_conv(params, rng, "dec.u2", c1, c2 + c1, 3)?;
        add_conv(params, rng, "dec.out", 3, c1, 1)?;
        Ok(())
    }

    /// `[N,4,H,W]` input to `[N,3,H,W]` image in `[0,1]`.
    pub fn forward(&self, p: &BoundParams, x: &Value) -> Result<Value, NetError> {
        let shape = x.shape();
        let s = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 4 || shape[2] != s || shape[3] != s {
            return Err(bad(format!("expected decoder input [N,4,{s},{s}], got {shape:?}")));
        }
        let e0 = conv_block(p, "dec.e0", x, 1, 1, true)?;
        let d1 = conv_block(p, "dec.d1", &e0, 2, 1, true)?;
        let d2 = conv_block(p, "dec.d2", &d1, 2, 1, true)?;
        let u1 = concat(&[&d2.upsample2x()?, &d1], 1)?;
        let u1 = conv_block(p, "dec.u1", &u1, 1, 1, true)?;
        let u2 = concat(&[&u1.upsample2x()?, &e0], 1)?;
        let u2 = conv_block(p, "dec.u2", &u2, 1, 1, true)?;
        Ok(conv_block(p, "dec.out", &u2, 1, 0, false)?.sigmoid()?)
    }
}

/// Concatenates the masked image with the rendered edge map and decodes a
/// full image. `masked` is `[N,3,H,W]`, `edge_maps` is `[N,1,H,W]`.
pub fn reconstruct(
    net: &DecoderNet,
    p: &BoundParams,
    edge_maps: &Value,
    masked: &Value,
) -> Result<Value, NetError> {
    let es = edge_maps.shape();
    let ms = masked.shape();
    if es.len() != 4 || ms.len() != 4 || es[1] != 1 || ms[1] != 3 || es[0] != ms[0]
        || es[2] != ms[2] || es[3] != ms[3]
    {
        return Err(bad(format!(
            "edge maps {es:?} and masked images {ms:?} must agree as [N,1,H,W] / [N,3,H,W]"
        )));
    }
    net.forward(p, &concat(&[masked, edge_maps], 1)?)
}

/// Patch-masking settings for the reconstruction task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub patch_size: usize,
    pub mask_ratio: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec { patch_size: 16, mask_ratio: 0.9 }
    }
}

/// Zeroes `round(mask_ratio · P)` of the image's P square patches, chosen
/// uniformly without replacement. Returns the masked image and the patch
/// mask (`true` = removed), row-major over patches.
pub fn mask_image(
    img: &Tensor,
    spec: &MaskSpec,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<bool>), NetError> {
    if img.shape.len() != 3 {
        return Err(bad(format!("expected a [C,H,W] image, got shape {:?}", img.shape)));
    }
    let (c, h, w) = (img.shape[0], img.shape[1], img.shape[2]);
    let ps = spec.patch_size;
    if ps == 0 || h % ps != 0 || w % ps != 0 {
        return Err(bad(format!("image {h}x{w} not divisible into {ps}x{ps} patches")));
    }
    if !(0.0..=1.0).contains(&spec.mask_ratio) {
        return Err(bad(format!("mask ratio must be in [0,1], got {}", spec.mask_ratio)));
    }
    let (ph, pw) = (h / ps, w / ps);
    let total = ph * pw;
    let m = (spec.mask_ratio * total as f64).round() as usize;
    let mut mask = vec![false; total];
    for idx in rand::seq::index::sample(rng, total, m) {
        mask[idx] = true;
    }
    let mut out = img.data.clone();
    for (pi, _) in mask.iter().enumerate().filter(|(_, &on)| on) {
        let (pr, pc) = (pi / pw, pi % pw);
        for ch in 0..c {
            for r in pr * ps..(pr + 1) * ps {
                let base = ch * h * w + r * w + pc * ps;
                out[base..base + ps].fill(0.0);
            }
        }
    }
    Ok((Tensor { shape: img.shape.clone(), data: out, requires_grad: false, grad: None }, mask))
}

/// Image descriptor used for both the perceptual reconstruction term and
/// k-means shot selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureExtractor {
    /// Grayscale average pyramid at full, 1/2 and 1/4 resolution,
    /// flattened and concatenated. Deterministic, parameter-free.
    Pyramid,
    /// One stride-2 conv layer (3→8 channels) with fixed random weights
    /// drawn from the seed, relu, then 2x average pooling; flattened.
    RandomConv { seed: u64 },
}

/// 2x2 average pooling of the trailing two axes via reshape+mean.
fn avg_pool2(v: &Value) -> Result<Value, DiffError> {
    let shape = v.shape();
    let nd = shape.len();
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    let mut mid: Vec<usize> = shape[..nd - 2].to_vec();
    mid.extend([h / 2, 2, w / 2, 2]);
    let pooled = v.reshape(&mid)?.mean_axis(nd + 1)?.mean_axis(nd - 1)?;
    let mut out: Vec<usize> = shape[..nd - 2].to_vec();
    out.extend([h / 2, w / 2]);
    pooled.reshape(&out)
}

/// Differentiable feature extraction for a single `[3,H,W]` image value.
pub fn feature_value(img: &Value, fx: &FeatureExtractor) -> Result<Value, NetError> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(bad(format!("expected a [3,H,W] image, got shape {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(bad(format!("feature extraction needs H,W divisible by 4, got {h}x{w}")));
    }
    match fx {
        FeatureExtractor::Pyramid => {
            let gray = img.mean_axis(0)?;
            let half = avg_pool2(&gray)?;
            let quarter = avg_pool2(&half)?;
            let full = gray.reshape(&[h * w])?;
            let half = half.reshape(&[h * w / 4])?;
            let quarter = quarter.reshape(&[h * w / 16])?;
            Ok(concat(&[&full, &half, &quarter], 0)?)
        }
        FeatureExtractor::RandomConv { seed } => {
            let g = img.graph().clone();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let (wt, bt) = conv_init(&mut rng, 8, 3, 3);
            let wv = g.constant(wt)?;
            let bv = g.constant(bt)?;
            let y = img.reshape(&[1, 3, h, w])?.conv2d(&wv, Some(&bv), 2, 1)?.relu()?;
            let y = avg_pool2(&y)?;
            let n = 8 * (h / 4) * (w / 4);
            Ok(y.reshape(&[n])?)
        }
    }
}

/// Non-graph convenience wrapper: runs [`feature_value`] on a scratch graph
/// so both callers see bit-identical features.
pub fn extract_features(img: &Tensor, fx: &FeatureExtractor) -> Result<Vec<f64>, NetError> {
    let g = crate::diffcore::Graph::new();
    let v = g.constant(img.clone())?;
    Ok(feature_value(&v, fx)?.tensor().data)
}
