//! Depth-map evaluation: the seven standard metrics, the overall vs.
//! dynamic-area split, heuristic dynamic-mask estimation from photometric
//! and cue disagreement, and error-reduction reporting against the
//! monocular input.
//!
//! All statistics are accumulated in f64 regardless of raster precision.

use serde::{Deserialize, Serialize};

use crate::error::{CueError, Result};
use crate::geometry::{
    backproject, project, relative_pose, warp_with_depth_map, HypothesisSet, Intrinsics, Pose,
};
use crate::synthdata::{render_depth_map, SceneSample, SceneSpec};
use crate::tensor::Tensor;
use crate::volumes::{CueVolume, SSIM_WINDOW};

/// One metric tuple over one set of pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub n_valid: usize,
}

/// Metrics over all valid pixels plus, when the scene has any, over the
/// dynamic-mask subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall: Metrics,
    pub dynamic: Option<Metrics>,
}

/// Depth range (lo, hi] in meters that enters evaluation.
pub const EVAL_RANGE: (f64, f64) = (0.0, 80.0);

/// Metrics over the masked pixels whose ground truth lies in `range`.
/// `mask` holds flat pixel indices; pass the full index range for an
/// unmasked evaluation.
pub fn compute_metrics(
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    mask: &[usize],
    range: (f64, f64),
) -> Result<Metrics> {
    if pred.len() != gt.len() {
        return Err(CueError::Shape(format!(
            "metrics: pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (pd, gd) = (pred.data(), gt.data());
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut se, mut se_log) = (0.0f64, 0.0, 0.0, 0.0);
    let (mut c1, mut c2, mut c3) = (0usize, 0, 0);
    for &i in mask {
        if i >= gd.len() {
            return Err(CueError::Shape(format!(
                "metrics: mask index {i} outside {} pixels",
                gd.len()
            )));
        }
        let g = gd[i] as f64;
        if !(g > range.0 && g <= range.1) {
            continue;
        }
        let p = pd[i] as f64;
        if !(p > 0.0) {
            return Err(CueError::Numeric(format!(
                "metrics: nonpositive prediction {p} at pixel {i}"
            )));
        }
        n += 1;
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        se += d * d;
        let dl = p.ln() - g.ln();
        se_log += dl * dl;
        let ratio = (p / g).max(g / p);
        if ratio < 1.25 {
            c1 += 1;
        }
        if ratio < 1.25 * 1.25 {
            c2 += 1;
        }
        if ratio < 1.25 * 1.25 * 1.25 {
            c3 += 1;
        }
    }
    if n == 0 {
        return Err(CueError::Data(
            "metrics: no masked pixels with ground truth in range".into(),
        ));
    }
    let nf = n as f64;
    Ok(Metrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (se / nf).sqrt(),
        rmse_log: (se_log / nf).sqrt(),
        d1: c1 as f64 / nf,
        d2: c2 as f64 / nf,
        d3: c3 as f64 / nf,
        n_valid: n,
    })
}

/// Overall metrics over every pixel, dynamic metrics over the mask subset;
/// a scene without dynamic pixels reports the dynamic split as absent.
pub fn masked_eval(
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    dynamic_mask: &Tensor<f32>,
    range: (f64, f64),
) -> Result<MetricReport> {
    if dynamic_mask.len() != gt.len() {
        return Err(CueError::Shape(format!(
            "masked_eval: mask {:?} vs gt {:?}",
            dynamic_mask.shape(),
            gt.shape()
        )));
    }
    let all: Vec<usize> = (0..gt.len()).collect();
    let overall = compute_metrics(pred, gt, &all, range)?;
    let dyn_idx: Vec<usize> = dynamic_mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.5)
        .map(|(i, _)| i)
        .collect();
    let has_valid_dynamic = dyn_idx.iter().any(|&i| {
        let g = gt.data()[i] as f64;
        g > range.0 && g <= range.1
    });
    let dynamic = if has_valid_dynamic {
        Some(compute_metrics(pred, gt, &dyn_idx, range)?)
    } else {
        None
    };
    Ok(MetricReport { overall, dynamic })
}

/// Unweighted mean of per-scene metrics; `n_valid` sums.
pub fn average_metrics(list: &[Metrics]) -> Result<Metrics> {
    if list.is_empty() {
        return Err(CueError::Data("averaging zero metric tuples".into()));
    }
    let nf = list.len() as f64;
    let mut out = Metrics {
        abs_rel: 0.0,
        sq_rel: 0.0,
        rmse: 0.0,
        rmse_log: 0.0,
        d1: 0.0,
        d2: 0.0,
        d3: 0.0,
        n_valid: 0,
    };
    for m in list {
        out.abs_rel += m.abs_rel / nf;
        out.sq_rel += m.sq_rel / nf;
        out.rmse += m.rmse / nf;
        out.rmse_log += m.rmse_log / nf;
        out.d1 += m.d1 / nf;
        out.d2 += m.d2 / nf;
        out.d3 += m.d3 / nf;
        out.n_valid += m.n_valid;
    }
    Ok(out)
}

/// Unweighted per-scene mean of reports. The overall slot averages every
/// scene; the dynamic slot averages the scenes that have one and is `None`
/// when none do.
pub fn average_reports(list: &[MetricReport]) -> Result<MetricReport> {
    let overall: Vec<Metrics> = list.iter().map(|r| r.overall).collect();
    let dynamic: Vec<Metrics> = list.iter().filter_map(|r| r.dynamic).collect();
    Ok(MetricReport {
        overall: average_metrics(&overall)?,
        dynamic: if dynamic.is_empty() {
            None
        } else {
            Some(average_metrics(&dynamic)?)
        },
    })
}

/// Frozen operating point of `estimate_dynamic_mask`: mean photometric
/// error above this flags a pixel as photometrically inconsistent.
pub const DEFAULT_TAU_PHOTO: f64 = 0.1;
/// Frozen operating point of `estimate_dynamic_mask`: cue disagreement in
/// d_max-normalized inverse depth above this flags a pixel.
pub const DEFAULT_TAU_DEPTH: f64 = 0.2;

fn binary_open_3x3(mask: &mut Vec<bool>, h: usize, w: usize) {
    // Erosion then dilation; out-of-bounds neighbors count as unset.
    let full = |m: &[bool], y: usize, x: usize| -> bool {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    return false;
                }
                if !m[yy as usize * w + xx as usize] {
                    return false;
                }
            }
        }
        true
    };
    let eroded: Vec<bool> = (0..h * w)
        .map(|i| mask[i] && full(mask, i / w, i % w))
        .collect();
    for y in 0..h {
        for x in 0..w {
            let mut any = false;
            'scan: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        if eroded[yy as usize * w + xx as usize] {
                            any = true;
                            break 'scan;
                        }
                    }
                }
            }
            mask[y * w + x] = any;
        }
    }
}

/// Heuristic dynamic-area detector: a pixel is flagged when warping the
/// sources with the monocular depth leaves photometric error above
/// `tau_photo` AND the two cues disagree by more than `tau_depth` in
/// d_max-normalized inverse depth. A 3x3 opening removes speckle. Pixels
/// with no valid warp in any source are never flagged.
#[allow(clippy::too_many_arguments)]
pub fn estimate_dynamic_mask(
    target: &Tensor<f32>,
    sources: &[(Tensor<f32>, Pose)],
    k: &Intrinsics,
    mono_depth: &Tensor<f32>,
    multi_argmax_depth: &Tensor<f32>,
    tau_photo: f64,
    tau_depth: f64,
    d_max: f64,
) -> Result<Tensor<f32>> {
    let (h, w, c) = (target.shape()[0], target.shape()[1], target.shape()[2]);
    let n = h * w;
    if mono_depth.len() != n || multi_argmax_depth.len() != n {
        return Err(CueError::Shape(format!(
            "dynamic mask: depth maps {:?} / {:?} vs {h}x{w} image",
            mono_depth.shape(),
            multi_argmax_depth.shape()
        )));
    }
    let mut err_sum = vec![0.0f64; n];
    let mut err_cnt = vec![0.0f64; n];
    for (img, pose) in sources {
        let (warped, valid) = warp_with_depth_map(img, k, pose, mono_depth)?;
        let (wd, vd, td) = (warped.data(), valid.data(), target.data());
        for p in 0..n {
            if vd[p] == 1.0 {
                let mut e = 0.0f64;
                for ch in 0..c {
                    e += (wd[p * c + ch] as f64 - td[p * c + ch] as f64).abs();
                }
                err_sum[p] += e / c as f64;
                err_cnt[p] += 1.0;
            }
        }
    }
    let (md, ad) = (mono_depth.data(), multi_argmax_depth.data());
    let mut mask: Vec<bool> = (0..n)
        .map(|p| {
            if err_cnt[p] == 0.0 {
                return false;
            }
            let photo = err_sum[p] / err_cnt[p];
            let gap = (1.0 / md[p] as f64 - 1.0 / ad[p] as f64).abs() * d_max;
            photo > tau_photo && gap > tau_depth
        })
        .collect();
    binary_open_3x3(&mut mask, h, w);
    Tensor::from_vec(
        &[h, w],
        mask.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect(),
    )
}

/// Pixel counts of intersection and union of two binary masks (entries
/// above 0.5 count as set). Sum across scenes before dividing for a pooled
/// IoU.
pub fn mask_intersection_union(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(usize, usize)> {
    if a.len() != b.len() {
        return Err(CueError::Shape(format!(
            "mask IoU: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.data().iter().zip(b.data()) {
        let (sa, sb) = (*x > 0.5, *y > 0.5);
        if sa && sb {
            inter += 1;
        }
        if sa || sb {
            union += 1;
        }
    }
    Ok((inter, union))
}

/// One error metric's row in the reduction table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReductionRow {
    pub metric: String,
    pub mono_err: f64,
    pub final_err: f64,
    /// (mono - final) / mono; absent when the mono error is exactly 0.
    pub reduction: Option<f64>,
}

/// Relative error reduction of the fused prediction against the monocular
/// input, per error metric.
pub fn error_reduction_report(mono: &Metrics, fin: &Metrics) -> Vec<ReductionRow> {
    let rows = [
        ("abs_rel", mono.abs_rel, fin.abs_rel),
        ("sq_rel", mono.sq_rel, fin.sq_rel),
        ("rmse", mono.rmse, fin.rmse),
        ("rmse_log", mono.rmse_log, fin.rmse_log),
    ];
    rows.iter()
        .map(|(name, m, f)| ReductionRow {
            metric: name.to_string(),
            mono_err: *m,
            final_err: *f,
            reduction: if *m == 0.0 { None } else { Some((m - f) / m) },
        })
        .collect()
}

pub fn format_reduction_table(rows: &[ReductionRow]) -> String {
    let mut out = String::from(
        "metric    mono err    final err   err redu\n",
    );
    for r in rows {
        let redu = match r.reduction {
            Some(x) => format!("{:+.2}%", x * 100.0),
            None => "undefined".to_string(),
        };
        out.push_str(&format!(
            "{:<9} {:<11.4} {:<11.4} {}\n",
            r.metric, r.mono_err, r.final_err, redu
        ));
    }
    out
}

/// Marks target pixels where bin-argmax depth is a well-posed question,
/// for matcher-accuracy tallies over rendered scenes. A pixel qualifies
/// when its matching window lies fully inside the raster, carries enough
/// horizontal contrast (per `tex`, see `textured_mask`), every hypothesis
/// received at least one source score, the window's true inverse depth
/// spans at most half a bin gap (one surface at the grid's resolution; a
/// wider window has no single correct bin), and every window tap is
/// visible in every source frame. Visibility of a tap is checked by
/// projecting its world point into the source and comparing against the
/// source's own depth render, with a one-pixel margin around the bilinear
/// support so silhouette pixels whose shade blends both sides count as
/// covered. `source_frames` indexes the sample's frame triple.
pub fn matchable_static_pixels(
    spec: &SceneSpec,
    sample: &SceneSample,
    hyp: &HypothesisSet,
    vol: &CueVolume,
    tex: &Tensor<f32>,
    source_frames: &[usize],
) -> Result<Vec<bool>> {
    let (h, w) = spec.resolution;
    let k = &spec.intrinsics;
    let m = hyp.m();
    if vol.data.len() != h * w * m || tex.len() != h * w || sample.gt_depth.len() != h * w {
        return Err(CueError::Shape(format!(
            "matchable pixels: volume {:?} tex {:?} gt {:?} for {}x{} m {}",
            vol.data.shape(),
            tex.shape(),
            sample.gt_depth.shape(),
            h,
            w,
            m
        )));
    }
    let r = SSIM_WINDOW / 2;
    let gt = sample.gt_depth.data();
    let mut src_depth = Vec::new();
    let mut poses = Vec::new();
    for &f in source_frames {
        src_depth.push(render_depth_map(spec, f as f64 - 1.0)?);
        poses.push(relative_pose(&sample.poses[1], &sample.poses[f]));
    }
    let half_gap = 0.5 * hyp.inv_bin_width();
    let mut out = vec![false; h * w];
    if h < 2 * r + 1 || w < 2 * r + 1 {
        return Ok(out);
    }
    for y in r..h - r {
        'px: for x in r..w - r {
            let i = y * w + x;
            if tex.data()[i] != 1.0 {
                continue;
            }
            if (0..m).any(|b| vol.data.data()[i * m + b] == 0.0) {
                continue;
            }
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for yy in y - r..=y + r {
                for xx in x - r..=x + r {
                    let g = 1.0 / gt[yy * w + xx] as f64;
                    lo = lo.min(g);
                    hi = hi.max(g);
                }
            }
            if hi - lo > half_gap {
                continue;
            }
            for (s, pose) in poses.iter().enumerate() {
                let sd = src_depth[s].data();
                for yy in y - r..=y + r {
                    for xx in x - r..=x + r {
                        let d = gt[yy * w + xx] as f64;
                        let p = pose.apply(backproject(xx as f64, yy as f64, d, k));
                        let Some((us, vs)) = project(p, k) else {
                            continue 'px;
                        };
                        let (u0, v0) = (us.floor() as i64, vs.floor() as i64);
                        for vv in v0 - 1..=v0 + 2 {
                            for uu in u0 - 1..=u0 + 2 {
                                if vv < 0 || uu < 0 || vv >= h as i64 || uu >= w as i64 {
                                    continue 'px;
                                }
                                if (sd[vv as usize * w + uu as usize] as f64) < p[2] * 0.98 {
                                    continue 'px;
                                }
                            }
                        }
                    }
                }
            }
            out[i] = true;
        }
    }
    Ok(out)
}
