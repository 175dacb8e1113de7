//! Patch rectangles, bilinear crop-resize, and the local/global coordinate
//! maps.
//!
//! Conventions (these matter when comparing against anything external):
//! pixel `i` occupies the continuous interval `[i, i+1)` with its center at
//! `i + 0.5`; crop taps are align-corners (`K` taps span the rect edges
//! inclusive); samples outside the map replicate the border. Crops are
//! differentiable with respect to feature values only — rect coordinates
//! never carry gradient, so cascade stages stay decoupled.

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Ordered 2-D points in input-image pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<LandmarkSet> {
        for (i, (x, y)) in points.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Input(format!(
                    "landmark {i} is not finite: ({x}, {y})"
                )));
            }
        }
        Ok(LandmarkSet { points })
    }

    /// Interleaved `[x0, y0, x1, y1, ...]`.
    pub fn from_flat(flat: &[f64]) -> Result<LandmarkSet> {
        if flat.len() % 2 != 0 {
            return Err(Error::Input(format!(
                "landmark buffer has odd length {}",
                flat.len()
            )));
        }
        LandmarkSet::new(flat.chunks(2).map(|c| (c[0], c[1])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn get(&self, i: usize) -> (f64, f64) {
        self.points[i]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|&(x, y)| [x, y]).collect()
    }
}

/// Axis-aligned supporting patch in feature-map pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchRect {
    pub left_top: (f64, f64),
    pub size: (f64, f64),
}

impl PatchRect {
    pub fn center(&self) -> (f64, f64) {
        (
            self.left_top.0 + self.size.0 / 2.0,
            self.left_top.1 + self.size.1 / 2.0,
        )
    }
}

/// Supporting patches centered on each landmark, mapped into feature-map
/// coordinates. Rects may extend past the map; sampling replicates borders.
pub fn rects_from_landmarks(
    landmarks: &LandmarkSet,
    patch_size: (f64, f64),
    image_to_feature_scale: f64,
) -> Result<Vec<PatchRect>> {
    if !(image_to_feature_scale > 0.0) {
        return Err(Error::Input(format!(
            "image_to_feature_scale must be positive, got {image_to_feature_scale}"
        )));
    }
    if !(patch_size.0 > 0.0 && patch_size.1 > 0.0) {
        return Err(Error::Input(format!(
            "patch size must be positive, got {patch_size:?}"
        )));
    }
    landmarks
        .points()
        .iter()
        .map(|&(x, y)| {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Input(format!("landmark ({x}, {y}) is not finite")));
            }
            let cx = x / image_to_feature_scale;
            let cy = y / image_to_feature_scale;
            Ok(PatchRect {
                left_top: (cx - patch_size.0 / 2.0, cy - patch_size.1 / 2.0),
                size: patch_size,
            })
        })
        .collect()
}

/// Align-corners tap positions along one axis of a rect.
fn tap_coord(origin: f64, extent: f64, j: usize, k: usize) -> f64 {
    if k == 1 {
        origin + extent / 2.0
    } else {
        origin + j as f64 * extent / (k - 1) as f64
    }
}

struct Tap {
    idx: [usize; 4],
    w: [f64; 4],
}

fn bilinear_tap(fx: f64, fy: f64, width: usize, height: usize) -> Tap {
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let ux = fx - 0.5;
    let uy = fy - 0.5;
    let x0 = ux.floor();
    let y0 = uy.floor();
    let tx = ux - x0;
    let ty = uy - y0;
    let x0c = clamp(x0 as isize, width);
    let x1c = clamp(x0 as isize + 1, width);
    let y0c = clamp(y0 as isize, height);
    let y1c = clamp(y0 as isize + 1, height);
    Tap {
        idx: [
            y0c * width + x0c,
            y0c * width + x1c,
            y1c * width + x0c,
            y1c * width + x1c,
        ],
        w: [
            (1.0 - ty) * (1.0 - tx),
            (1.0 - ty) * tx,
            ty * (1.0 - tx),
            ty * tx,
        ],
    }
}

/// Crop `rect` from a `[C, H, W]` feature map and resize to `K x K` by
/// bilinear interpolation. Differentiable with respect to the feature map
/// only.
pub fn crop_resize(feature_map: &Tensor, rect: &PatchRect, k: usize) -> Result<Tensor> {
    if k < 1 {
        return Err(Error::Contract("crop_resize needs K >= 1".into()));
    }
    let shape = feature_map.shape();
    if shape.len() != 3 {
        return Err(Error::Contract(format!(
            "crop_resize expects a [C, H, W] map, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Input(format!("crop_resize on an empty map {shape:?}")));
    }
    let mut taps = Vec::with_capacity(k * k);
    for jy in 0..k {
        let fy = tap_coord(rect.left_top.1, rect.size.1, jy, k);
        for jx in 0..k {
            let fx = tap_coord(rect.left_top.0, rect.size.0, jx, k);
            taps.push(bilinear_tap(fx, fy, w, h));
        }
    }
    let fd = feature_map.data();
    let mut data = vec![0.0; c * k * k];
    for ch in 0..c {
        let plane = &fd[ch * h * w..(ch + 1) * h * w];
        let out = &mut data[ch * k * k..(ch + 1) * k * k];
        for (o, tap) in out.iter_mut().zip(taps.iter()) {
            *o = tap.w[0] * plane[tap.idx[0]]
                + tap.w[1] * plane[tap.idx[1]]
                + tap.w[2] * plane[tap.idx[2]]
                + tap.w[3] * plane[tap.idx[3]];
        }
    }
    drop(fd);
    let pf = feature_map.clone();
    Ok(Tensor::from_op(
        vec![c, k, k],
        data,
        vec![feature_map.clone()],
        Box::new(move |g, store| {
            if let Some(buf) = store.buf_mut(&pf) {
                for ch in 0..c {
                    let plane = &mut buf[ch * h * w..(ch + 1) * h * w];
                    let grow = &g[ch * k * k..(ch + 1) * k * k];
                    for (gv, tap) in grow.iter().zip(taps.iter()) {
                        for (&i, &wt) in tap.idx.iter().zip(tap.w.iter()) {
                            plane[i] += gv * wt;
                        }
                    }
                }
            }
        }),
    ))
}

/// Patch-local fraction to input-image pixels:
/// `x = scale * (x_lt + w * t_x)`, same for y.
pub fn local_to_global(
    t: (f64, f64),
    rect: &PatchRect,
    feature_to_image_scale: f64,
) -> (f64, f64) {
    (
        feature_to_image_scale * (rect.left_top.0 + rect.size.0 * t.0),
        feature_to_image_scale * (rect.left_top.1 + rect.size.1 * t.1),
    )
}

/// Inverse of [`local_to_global`] within the same rect.
pub fn global_to_local(
    p: (f64, f64),
    rect: &PatchRect,
    feature_to_image_scale: f64,
) -> (f64, f64) {
    (
        (p.0 / feature_to_image_scale - rect.left_top.0) / rect.size.0,
        (p.1 / feature_to_image_scale - rect.left_top.1) / rect.size.1,
    )
}

/// Differentiable row-wise version of [`local_to_global`] for a `[N, 2]`
/// tensor of local coordinates, one rect per row.
pub fn local_to_global_rows(
    t: &Tensor,
    rects: &[PatchRect],
    feature_to_image_scale: f64,
) -> Result<Tensor> {
    let shape = t.shape();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != rects.len() {
        return Err(Error::Contract(format!(
            "local_to_global_rows expects [{} x 2] coordinates, got {shape:?}",
            rects.len()
        )));
    }
    let mut mul = Vec::with_capacity(t.numel());
    let mut add = Vec::with_capacity(t.numel());
    for r in rects {
        mul.push(feature_to_image_scale * r.size.0);
        mul.push(feature_to_image_scale * r.size.1);
        add.push(feature_to_image_scale * r.left_top.0);
        add.push(feature_to_image_scale * r.left_top.1);
    }
    ops::affine_const(t, &mul, &add)
}
