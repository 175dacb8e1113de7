//! Training-time augmentation: horizontal flip, grayscale, occlusion, and a
//! similarity warp (scale/rotation/translation). Image and landmarks always
//! transform together; occlusion blanks pixels but never moves ground truth.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::geometry::LandmarkSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub gray_prob: f64,
    pub occlusion_prob: f64,
    /// +/- fraction.
    pub scale_range: f64,
    /// +/- degrees.
    pub rotation_range_deg: f64,
    /// +/- pixels.
    pub translation_range: f64,
    /// Occlusion rectangle side range as fractions of the image side.
    pub occlusion_size: (f64, f64),
    /// Landmark index involution for flips; required when `flip_prob > 0`.
    pub flip_map: Option<Vec<usize>>,
    /// Landmarks that must stay in frame after the warp (the outer eye
    /// corners); violating draws are retried.
    pub keep_in_frame: Option<(usize, usize)>,
}

impl AugmentConfig {
    /// Flip 50%, gray 20%, occlusion 33%, scale +/-5%, rotation +/-30 deg,
    /// translation +/-10 px.
    pub fn standard(flip_map: Option<Vec<usize>>, keep_in_frame: Option<(usize, usize)>) -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            gray_prob: 0.2,
            occlusion_prob: 0.33,
            scale_range: 0.05,
            rotation_range_deg: 30.0,
            translation_range: 10.0,
            occlusion_size: (1.0 / 8.0, 1.0 / 3.0),
            flip_map,
            keep_in_frame,
        }
    }

    /// No-op configuration.
    pub fn identity() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            gray_prob: 0.0,
            occlusion_prob: 0.0,
            scale_range: 0.0,
            rotation_range_deg: 0.0,
            translation_range: 0.0,
            occlusion_size: (1.0 / 8.0, 1.0 / 3.0),
            flip_map: None,
            keep_in_frame: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip", self.flip_prob),
            ("gray", self.gray_prob),
            ("occlusion", self.occlusion_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Input(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        let (lo, hi) = self.occlusion_size;
        if !(lo > 0.0 && hi >= lo && hi <= 1.0) {
            return Err(Error::Input(format!(
                "occlusion size range ({lo}, {hi}) outside (0, 1]"
            )));
        }
        if self.flip_prob > 0.0 {
            let map = self.flip_map.as_ref().ok_or_else(|| {
                Error::Contract("flip enabled without a flip-pair index map".into())
            })?;
            for (k, &m) in map.iter().enumerate() {
                if m >= map.len() || map[m] != k {
                    return Err(Error::Contract(format!(
                        "flip map is not an involution at index {k}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn image_dims(image: &Tensor) -> (usize, usize) {
    (image.shape()[1], image.shape()[2])
}

/// Mirror the image left-right and relabel landmarks through `flip_map`.
pub fn horizontal_flip(sample: &Sample, flip_map: &[usize]) -> Result<Sample> {
    let (h, w) = image_dims(&sample.image);
    let src = sample.image.data();
    let mut out = vec![0.0; src.len()];
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = plane[y * w + (w - 1 - x)];
            }
        }
    }
    drop(src);
    let pts = sample.landmarks.points();
    if flip_map.len() != pts.len() {
        return Err(Error::Contract(format!(
            "flip map covers {} landmarks, sample has {}",
            flip_map.len(),
            pts.len()
        )));
    }
    let new_pts: Vec<(f64, f64)> = flip_map
        .iter()
        .map(|&m| (w as f64 - pts[m].0, pts[m].1))
        .collect();
    Ok(Sample {
        image: Tensor::from_vec(sample.image.shape(), out)?,
        landmarks: LandmarkSet::new(new_pts)?,
        tags: sample.tags.clone(),
    })
}

/// Similarity warp about the image center: scale, rotate (radians), then
/// translate. Landmarks map forward; the image is inverse-sampled with
/// bilinear taps and replicated borders.
pub fn similarity_warp(sample: &Sample, scale: f64, rotation: f64, translation: (f64, f64)) -> Result<Sample> {
    if scale <= 0.0 {
        return Err(Error::Input(format!("warp scale must be positive, got {scale}")));
    }
    let (h, w) = image_dims(&sample.image);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = rotation.sin_cos();

    let new_pts: Vec<(f64, f64)> = sample
        .landmarks
        .points()
        .iter()
        .map(|&(x, y)| {
            let ox = x - cx;
            let oy = y - cy;
            (
                cx + scale * (cos * ox - sin * oy) + translation.0,
                cy + scale * (sin * ox + cos * oy) + translation.1,
            )
        })
        .collect();

    let src = sample.image.data();
    let mut out = vec![0.0; src.len()];
    let inv = 1.0 / scale;
    for y in 0..h {
        for x in 0..w {
            // invert: remove translation, rotate back, unscale
            let qx = x as f64 + 0.5 - cx - translation.0;
            let qy = y as f64 + 0.5 - cy - translation.1;
            let sx = inv * (cos * qx + sin * qy) + cx;
            let sy = inv * (-sin * qx + cos * qy) + cy;
            let ux = sx - 0.5;
            let uy = sy - 0.5;
            let x0 = ux.floor();
            let y0 = uy.floor();
            let tx = ux - x0;
            let ty = uy - y0;
            let xi = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let xj = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
            let yi = (y0 as isize).clamp(0, h as isize - 1) as usize;
            let yj = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
            for c in 0..3 {
                let plane = &src[c * h * w..(c + 1) * h * w];
                out[c * h * w + y * w + x] = (1.0 - ty)
                    * ((1.0 - tx) * plane[yi * w + xi] + tx * plane[yi * w + xj])
                    + ty * ((1.0 - tx) * plane[yj * w + xi] + tx * plane[yj * w + xj]);
            }
        }
    }
    drop(src);
    Ok(Sample {
        image: Tensor::from_vec(sample.image.shape(), out)?,
        landmarks: LandmarkSet::new(new_pts)?,
        tags: sample.tags.clone(),
    })
}

/// Rec. 601 luma replicated across channels.
pub fn grayscale(sample: &Sample) -> Result<Sample> {
    let (h, w) = image_dims(&sample.image);
    let src = sample.image.data();
    let mut out = vec![0.0; src.len()];
    for i in 0..h * w {
        let luma = 0.299 * src[i] + 0.587 * src[h * w + i] + 0.114 * src[2 * h * w + i];
        out[i] = luma;
        out[h * w + i] = luma;
        out[2 * h * w + i] = luma;
    }
    drop(src);
    Ok(Sample {
        image: Tensor::from_vec(sample.image.shape(), out)?,
        landmarks: sample.landmarks.clone(),
        tags: sample.tags.clone(),
    })
}

/// Blank a rectangle (image only; ground truth untouched).
pub fn occlude(sample: &Sample, left_top: (usize, usize), size: (usize, usize)) -> Result<Sample> {
    let (h, w) = image_dims(&sample.image);
    let mut out = sample.image.to_vec();
    let x1 = (left_top.0 + size.0).min(w);
    let y1 = (left_top.1 + size.1).min(h);
    for c in 0..3 {
        for y in left_top.1..y1 {
            for x in left_top.0..x1 {
                out[c * h * w + y * w + x] = 0.0;
            }
        }
    }
    Ok(Sample {
        image: Tensor::from_vec(sample.image.shape(), out)?,
        landmarks: sample.landmarks.clone(),
        tags: sample.tags.clone(),
    })
}

fn in_frame(p: (f64, f64), w: usize, h: usize) -> bool {
    p.0 >= 0.0 && p.0 <= w as f64 && p.1 >= 0.0 && p.1 <= h as f64
}

/// Apply the configured augmentations. Warp draws that push the designated
/// landmarks out of frame are resampled (up to 10 times, then identity).
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    cfg.validate()?;
    let (h, w) = image_dims(&sample.image);

    let mut out = if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
        horizontal_flip(sample, cfg.flip_map.as_ref().expect("validated"))?
    } else {
        Sample {
            image: sample.image.clone(),
            landmarks: sample.landmarks.clone(),
            tags: sample.tags.clone(),
        }
    };

    if cfg.scale_range > 0.0 || cfg.rotation_range_deg > 0.0 || cfg.translation_range > 0.0 {
        let rot_range = cfg.rotation_range_deg.to_radians();
        let mut applied = false;
        for _ in 0..10 {
            let scale = 1.0
                + if cfg.scale_range > 0.0 { rng.gen_range(-cfg.scale_range..cfg.scale_range) } else { 0.0 };
            let rot = if rot_range > 0.0 { rng.gen_range(-rot_range..rot_range) } else { 0.0 };
            let t = if cfg.translation_range > 0.0 {
                (
                    rng.gen_range(-cfg.translation_range..cfg.translation_range),
                    rng.gen_range(-cfg.translation_range..cfg.translation_range),
                )
            } else {
                (0.0, 0.0)
            };
            let warped = similarity_warp(&out, scale, rot, t)?;
            let ok = match cfg.keep_in_frame {
                Some((a, b)) => {
                    in_frame(warped.landmarks.get(a), w, h) && in_frame(warped.landmarks.get(b), w, h)
                }
                None => warped.landmarks.points().iter().all(|&p| in_frame(p, w, h)),
            };
            if ok {
                out = warped;
                applied = true;
                break;
            }
        }
        let _ = applied; // falls back to the unwarped sample after 10 misses
    }

    if cfg.gray_prob > 0.0 && rng.gen_bool(cfg.gray_prob) {
        out = grayscale(&out)?;
    }

    if cfg.occlusion_prob > 0.0 && rng.gen_bool(cfg.occlusion_prob) {
        let lo = ((w as f64) * cfg.occlusion_size.0).round().max(1.0) as usize;
        let hi = ((w as f64) * cfg.occlusion_size.1).round().max(lo as f64) as usize;
        let ow = rng.gen_range(lo..=hi);
        let oh = rng.gen_range(lo..=hi);
        let ox = rng.gen_range(0..w.saturating_sub(ow).max(1));
        let oy = rng.gen_range(0..h.saturating_sub(oh).max(1));
        out = occlude(&out, (ox, oy), (ow, oh))?;
    }

    Ok(out)
}
