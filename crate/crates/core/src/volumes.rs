//! The two per-pixel depth cues: a plane-sweep matching volume scored with
//! SSIM against warped neighbor frames, and a one-hot volume quantizing a
//! monocular depth map onto the hypothesis grid.
//!
//! Volumes are parameter-free data, built once per scene in f64 arithmetic
//! and stored as f32 `[h, w, M]` tensors with channel k holding hypothesis k.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CueError, Result};
use crate::geometry::{warp_source_to_target, HypothesisSet, Intrinsics, Pose};
use crate::store;
use crate::tensor::Tensor;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Matching window of the cost volume: a plain box, no Gaussian weighting.
pub const SSIM_WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    MultiView,
    MonoOnehot,
}

/// An H×W×M stack of per-hypothesis scores. Multi-view entries live in
/// [0,1]; mono one-hot entries are {0,1} with exactly one 1 per pixel.
#[derive(Debug, Clone)]
pub struct CueVolume {
    pub data: Tensor<f32>,
    pub kind: VolumeKind,
    pub hypotheses: HypothesisSet,
}

impl CueVolume {
    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn m(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Per-pixel structural similarity of two `[h,w,c]` images over a
/// `window`×`window` box, averaged across channels and affinely mapped from
/// [-1,1] to [0,1]. Windows shrink at the image border: statistics use only
/// in-bounds taps. Inputs are expected in [0,1].
pub fn ssim_score(a: &Tensor<f32>, b: &Tensor<f32>, window: usize) -> Result<Tensor<f32>> {
    if a.shape() != b.shape() {
        return Err(CueError::Shape(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.ndim() != 3 {
        return Err(CueError::Shape(format!(
            "ssim expects [h,w,c] images, got {:?}",
            a.shape()
        )));
    }
    if window % 2 == 0 || window == 0 {
        return Err(CueError::Config(format!(
            "ssim window must be odd and positive, got {window}"
        )));
    }
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let r = (window / 2) as isize;
    let (da, db) = (a.data(), b.data());
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let y0 = (y as isize - r).max(0) as usize;
        let y1 = ((y as isize + r) as usize).min(h - 1);
        for x in 0..w {
            let x0 = (x as isize - r).max(0) as usize;
            let x1 = ((x as isize + r) as usize).min(w - 1);
            let n = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            let mut score_sum = 0.0f64;
            for ch in 0..c {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        let i = (yy * w + xx) * c + ch;
                        let (va, vb) = (da[i] as f64, db[i] as f64);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let var_a = (saa / n - ma * ma).max(0.0);
                let var_b = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
                score_sum += s;
            }
            let mapped = (score_sum / c as f64 + 1.0) / 2.0;
            out[y * w + x] = mapped.clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::from_vec(&[h, w], out)
}

/// Plane-sweep matching volume. For each hypothesis depth every source is
/// warped onto the target view, scored with SSIM, and the per-pixel scores
/// are averaged over the contributing sources. A source contributes at a
/// pixel only when its warp is valid across the whole matching window there
/// (clipped at the raster edge, the same taps the score reads): one invalid
/// tap inside the window poisons the local statistics with fill zeros, which
/// hurts exactly the hypotheses near the true depth at frame borders. Pixels
/// with no contributing source get 0 at that hypothesis.
pub fn build_cost_volume(
    target: &Tensor<f32>,
    sources: &[(Tensor<f32>, Pose)],
    k: &Intrinsics,
    hyp: &HypothesisSet,
) -> Result<CueVolume> {
    if sources.is_empty() {
        return Err(CueError::Config(
            "cost volume needs at least one source frame".into(),
        ));
    }
    for (img, _) in sources {
        if img.shape() != target.shape() {
            return Err(CueError::Shape(format!(
                "source shape {:?} does not match target {:?}",
                img.shape(),
                target.shape()
            )));
        }
    }
    let (h, w) = (target.shape()[0], target.shape()[1]);
    let m = hyp.m();
    let mut data = vec![0.0f32; h * w * m];
    for (ki, &d) in hyp.depths().iter().enumerate() {
        let mut acc = vec![0.0f64; h * w];
        let mut weight = vec![0.0f64; h * w];
        for (img, pose) in sources {
            let (warped, valid) = warp_source_to_target(img, k, pose, d)?;
            let score = ssim_score(target, &warped, SSIM_WINDOW)?;
            let (sd, vd) = (score.data(), valid.data());
            let r = SSIM_WINDOW / 2;
            for y in 0..h {
                for x in 0..w {
                    let mut whole_window = true;
                    'taps: for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                        for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                            if vd[yy * w + xx] != 1.0 {
                                whole_window = false;
                                break 'taps;
                            }
                        }
                    }
                    if whole_window {
                        let p = y * w + x;
                        acc[p] += sd[p] as f64;
                        weight[p] += 1.0;
                    }
                }
            }
        }
        for p in 0..h * w {
            if weight[p] > 0.0 {
                data[p * m + ki] = (acc[p] / weight[p]) as f32;
            }
        }
    }
    Ok(CueVolume {
        data: Tensor::from_vec(&[h, w, m], data)?,
        kind: VolumeKind::MultiView,
        hypotheses: hyp.clone(),
    })
}

/// One-hot volume of a monocular depth map on the hypothesis bin grid: the
/// unique bin `(d_{k-1}, d_k]` of each pixel (with `d_0 = 0`, and depths
/// above `d_M` clamped into the last bin) gets 1.
pub fn depth_to_onehot(d_mono: &Tensor<f32>, hyp: &HypothesisSet) -> Result<CueVolume> {
    if d_mono.ndim() != 2 && !(d_mono.ndim() == 3 && d_mono.shape()[2] == 1) {
        return Err(CueError::Shape(format!(
            "depth map must be [h,w] or [h,w,1], got {:?}",
            d_mono.shape()
        )));
    }
    let (h, w) = (d_mono.shape()[0], d_mono.shape()[1]);
    let m = hyp.m();
    let mut data = vec![0.0f32; h * w * m];
    for (p, &d) in d_mono.data().iter().enumerate() {
        let bin = hyp.bin_of(d as f64)?;
        data[p * m + bin] = 1.0;
    }
    Ok(CueVolume {
        data: Tensor::from_vec(&[h, w, m], data)?,
        kind: VolumeKind::MonoOnehot,
        hypotheses: hyp.clone(),
    })
}

/// Depth of the best-scoring hypothesis per pixel, ties broken toward the
/// nearer depth. Diagnostic decode of a volume without any learned head.
pub fn volume_argmax_depth(v: &CueVolume) -> Tensor<f32> {
    let (h, w, m) = (v.height(), v.width(), v.m());
    let depths = v.hypotheses.depths();
    let d = v.data.data();
    let mut out = vec![0.0f32; h * w];
    for p in 0..h * w {
        let row = &d[p * m..(p + 1) * m];
        let mut best = 0;
        for k in 1..m {
            // Strictly greater keeps the first (nearest) hypothesis on ties.
            if row[k] > row[best] {
                best = k;
            }
        }
        out[p] = depths[best] as f32;
    }
    Tensor::from_vec(&[h, w], out).expect("argmax output shape is consistent")
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeSidecar {
    kind: VolumeKind,
    hypothesis_depths: Vec<f64>,
    source_frames: Vec<String>,
}

/// Writes `<stem>.dft1` (tensor payload) and `<stem>.json` (kind, hypothesis
/// depths, source frame ids).
pub fn save_volume(stem: &Path, v: &CueVolume, source_frames: &[String]) -> Result<()> {
    let dft = stem.with_extension("dft1");
    store::save_tensor(&dft, &v.data)?;
    let sidecar = VolumeSidecar {
        kind: v.kind,
        hypothesis_depths: v.hypotheses.depths().to_vec(),
        source_frames: source_frames.to_vec(),
    };
    let json_path = stem.with_extension("json");
    let text = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&json_path, text).map_err(|e| CueError::io(&json_path, e))?;
    Ok(())
}

pub fn load_volume(stem: &Path) -> Result<(CueVolume, Vec<String>)> {
    let json_path = stem.with_extension("json");
    let text = std::fs::read_to_string(&json_path).map_err(|e| CueError::io(&json_path, e))?;
    let sidecar: VolumeSidecar = serde_json::from_str(&text)?;
    let data = store::load_tensor(&stem.with_extension("dft1"))?.cast_into::<f32>();
    if data.ndim() != 3 || data.shape()[2] != sidecar.hypothesis_depths.len() {
        return Err(CueError::Data(format!(
            "volume tensor {:?} does not match {} sidecar hypotheses",
            data.shape(),
            sidecar.hypothesis_depths.len()
        )));
    }
    Ok((
        CueVolume {
            data,
            kind: sidecar.kind,
            hypotheses: HypothesisSet::from_depths(sidecar.hypothesis_depths)?,
        },
        sidecar.source_frames,
    ))
}

pub fn volume_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("dft1"), stem.with_extension("json"))
}

/// 1.0 where the image carries enough contrast along the horizontal axis
/// for stereo matching: the channel-mean RMS of horizontal first
/// differences over an odd `window` must exceed `min_grad`. Horizontal is
/// the epipolar direction for the sideways camera translations used here,
/// and it is contrast along that axis which separates depth hypotheses;
/// vertical-only edges suffer the aperture problem, and texture much
/// coarser than the per-hypothesis shift step scores all hypotheses alike.
/// Border pixels use the in-bounds part of the window. Matching accuracy
/// is only meaningful on pixels this selects.
pub fn textured_mask(image: &Tensor<f32>, window: usize, min_grad: f64) -> Result<Tensor<f32>> {
    if image.ndim() != 3 && image.ndim() != 2 {
        return Err(CueError::Shape(format!(
            "textured_mask wants [h, w, c] or [h, w], got {:?}",
            image.shape()
        )));
    }
    if window % 2 == 0 || window == 0 {
        return Err(CueError::Config(format!("even texture window {window}")));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let c = if image.ndim() == 3 { image.shape()[2] } else { 1 };
    let r = (window / 2) as isize;
    let data = image.data();
    let at = |y: usize, x: usize, ch: usize| data[(y * w + x) * c + ch] as f64;
    let mut out = Tensor::<f32>::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut rms_sum = 0.0f64;
            for ch in 0..c {
                let (mut s2, mut n) = (0.0f64, 0.0f64);
                for dy in -r..=r {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in -r..r {
                        let xx = x as isize + dx;
                        if xx < 0 || xx + 1 >= w as isize {
                            continue;
                        }
                        let d = at(yy as usize, xx as usize + 1, ch)
                            - at(yy as usize, xx as usize, ch);
                        s2 += d * d;
                        n += 1.0;
                    }
                }
                if n > 0.0 {
                    rms_sum += (s2 / n).sqrt();
                }
            }
            if rms_sum / c as f64 > min_grad {
                out.data_mut()[y * w + x] = 1.0;
            }
        }
    }
    Ok(out)
}
