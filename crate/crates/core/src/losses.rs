//! Training objectives: the scale-invariant log loss, the virtual normal
//! loss over sampled point triplets, their weighted combination, and the
//! final two-term objective whose monocular term is a no-gradient
//! diagnostic.
//!
//! Losses build onto an existing tape so the prediction keeps its gradient
//! path. Ground truth, masks, and triplet geometry enter as constants.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CueError, Result};
use crate::geometry::Intrinsics;
use crate::tape::{CustomOp, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the scale-invariant term in the combination.
    pub beta: f64,
    /// Variance weight inside the scale-invariant loss.
    pub lambda_si: f64,
    /// Overall scale of the scale-invariant loss.
    pub alpha_si: f64,
    /// Requested triplet count; the effective count grows to 5% of the valid
    /// pixels when that is larger. 0 disables the normal term entirely.
    pub vnl_samples: usize,
    /// Minimum pairwise image distance of a triplet, pixels.
    pub vnl_min_dist: f64,
    /// Minimum interior angle of the ground-truth 3D triangle, degrees.
    pub vnl_min_angle_deg: f64,
    /// Depth range (lo, hi] in meters that counts as supervisable.
    pub valid_range: (f64, f64),
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 4.0,
            lambda_si: 0.85,
            alpha_si: 10.0,
            vnl_samples: 1000,
            vnl_min_dist: 3.0,
            vnl_min_angle_deg: 15.0,
            valid_range: (0.0, 80.0),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(CueError::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.lambda_si > 0.0 && self.lambda_si <= 1.0) {
            return Err(CueError::Config(format!(
                "lambda_si must be in (0, 1], got {}",
                self.lambda_si
            )));
        }
        if self.valid_range.0 >= self.valid_range.1 {
            return Err(CueError::Config(format!(
                "valid_range lo {} must be below hi {}",
                self.valid_range.0, self.valid_range.1
            )));
        }
        Ok(())
    }

    fn effective_triplets(&self, n_valid: usize) -> usize {
        if self.vnl_samples == 0 {
            0
        } else {
            self.vnl_samples.max(n_valid / 20)
        }
    }
}

/// Flat indices of pixels whose ground truth lies in (lo, hi].
pub fn range_mask<E: Scalar>(gt: &Tensor<E>, lo: f64, hi: f64) -> Vec<usize> {
    gt.data()
        .iter()
        .enumerate()
        .filter(|(_, d)| {
            let d = d.to_f64();
            d > lo && d <= hi
        })
        .map(|(i, _)| i)
        .collect()
}

fn check_mask_depths<E: Scalar>(
    what: &str,
    map: &Tensor<E>,
    mask: &[usize],
    n_pixels: usize,
) -> Result<()> {
    if mask.is_empty() {
        return Err(CueError::Data(format!("{what}: empty valid mask")));
    }
    let data = map.data();
    for &i in mask {
        if i >= n_pixels {
            return Err(CueError::Shape(format!(
                "{what}: mask index {i} outside {n_pixels} pixels"
            )));
        }
        if !(data[i].to_f64() > 0.0) {
            return Err(CueError::Numeric(format!(
                "{what}: nonpositive depth {} at masked pixel {i}",
                data[i]
            )));
        }
    }
    Ok(())
}

fn flat_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Scale-invariant log loss over the masked pixels:
/// `alpha * sqrt(mean(g^2) - lambda * mean(g)^2)` with `g = log pred - log gt`.
pub fn si_loss<E: Scalar>(
    tape: &mut Tape<E>,
    pred: Var,
    gt: &Tensor<E>,
    mask: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let n = flat_len(tape.value(pred).shape());
    if flat_len(gt.shape()) != n {
        return Err(CueError::Shape(format!(
            "si_loss pred {:?} vs gt {:?}",
            tape.value(pred).shape(),
            gt.shape()
        )));
    }
    check_mask_depths("si_loss pred", tape.value(pred), mask, n)?;
    check_mask_depths("si_loss gt", gt, mask, n)?;

    let idx = Rc::new(mask.to_vec());
    let log_gt: Vec<E> = mask
        .iter()
        .map(|&i| E::from_f64(gt.data()[i].to_f64().ln()))
        .collect();
    let log_gt = tape.constant(Tensor::from_vec(&[mask.len(), 1], log_gt)?)?;

    let flat = tape.reshape(pred, &[n, 1])?;
    let picked = tape.gather_rows(flat, idx)?;
    let log_pred = tape.log(picked)?;
    let g = tape.sub(log_pred, log_gt)?;
    let g2 = tape.square(g)?;
    let mean_g2 = tape.mean(g2)?;
    let mean_g = tape.mean(g)?;
    let mean_g_sq = tape.square(mean_g)?;
    let scaled = tape.scale_const(mean_g_sq, cfg.lambda_si)?;
    let diff = tape.sub(mean_g2, scaled)?;
    // Nonnegative by construction (variance + (1-lambda) * mean^2); the relu
    // only absorbs cancellation noise when pred == gt, keeping sqrt defined.
    let diff = tape.relu(diff)?;
    let root = tape.sqrt(diff)?;
    tape.scale_const(root, cfg.alpha_si)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Unit normal of the triangle (p1, p2, p3) with nonnegative z, plus the
/// sign flip applied and the unnormalized cross-product magnitude.
fn plane_normal(p: &[[f64; 3]; 3]) -> ([f64; 3], f64, f64) {
    let w = cross(sub3(p[1], p[0]), sub3(p[2], p[0]));
    let len = norm(w).max(1e-12);
    let mut n = scale3(w, 1.0 / len);
    let mut sign = 1.0;
    if n[2] < 0.0 {
        n = scale3(n, -1.0);
        sign = -1.0;
    }
    (n, sign, len)
}

/// Virtual-normal evaluation of a full depth map against fixed triplet
/// geometry. Forward gathers the three depths of each triplet, reconstructs
/// the 3D points along the stored pixel rays, and averages the L1 distance
/// between the unit plane normals of prediction and ground truth. Backward
/// is the closed-form chain through normalize, cross product, and the ray
/// reconstruction.
#[derive(Debug)]
struct VnlOp {
    /// Flat pixel index of each triplet corner.
    pixels: Vec<[usize; 3]>,
    /// Backprojection ray of each corner: P = dir * depth.
    dirs: Vec<[[f64; 3]; 3]>,
    /// Ground-truth unit normals, z >= 0.
    gt_normals: Vec<[f64; 3]>,
}

impl VnlOp {
    fn points<E: Scalar>(&self, t: usize, depth: &Tensor<E>) -> [[f64; 3]; 3] {
        let mut p = [[0.0; 3]; 3];
        for j in 0..3 {
            let d = depth.data()[self.pixels[t][j]].to_f64();
            p[j] = scale3(self.dirs[t][j], d);
        }
        p
    }
}

impl<E: Scalar> CustomOp<E> for VnlOp {
    fn name(&self) -> &'static str {
        "virtual_normal"
    }

    fn forward(&self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        let depth = inputs[0];
        let mut total = 0.0f64;
        for t in 0..self.pixels.len() {
            let (n, _, _) = plane_normal(&self.points(t, depth));
            let gt = self.gt_normals[t];
            total += (n[0] - gt[0]).abs() + (n[1] - gt[1]).abs() + (n[2] - gt[2]).abs();
        }
        Tensor::from_vec(&[1], vec![E::from_f64(total / self.pixels.len() as f64)])
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _output: &Tensor<E>,
        grad: &Tensor<E>,
    ) -> Result<Vec<Tensor<E>>> {
        let depth = inputs[0];
        let g_out = grad.data()[0].to_f64();
        let t_count = self.pixels.len() as f64;
        let mut dd = vec![0.0f64; depth.len()];
        for t in 0..self.pixels.len() {
            let p = self.points(t, depth);
            let (n, sign, len) = plane_normal(&p);
            let gt = self.gt_normals[t];
            // d|sign*u - gt|/du per component, through the flip.
            let mut g_n = [0.0; 3];
            for c in 0..3 {
                let diff = n[c] - gt[c];
                let s = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                g_n[c] = sign * s * g_out / t_count;
            }
            // Through the normalization: g_w = (g_n - n (n . g_n)) / |w|.
            let ndg = dot(n, g_n);
            let g_w = scale3(sub3(g_n, scale3(n, ndg)), 1.0 / len);
            // w = a x b with a = p2 - p1, b = p3 - p1.
            let a = sub3(p[1], p[0]);
            let b = sub3(p[2], p[0]);
            let g_a = cross(b, g_w);
            let g_b = cross(g_w, a);
            let g_p = [sub3(scale3(g_a, -1.0), g_b), g_a, g_b];
            for j in 0..3 {
                dd[self.pixels[t][j]] += dot(self.dirs[t][j], g_p[j]);
            }
        }
        let mut out = Tensor::zeros(depth.shape());
        for (o, v) in out.data_mut().iter_mut().zip(dd) {
            *o = E::from_f64(v);
        }
        Ok(vec![out])
    }
}

/// Samples triplets from the valid pixels and rejects degenerate geometry:
/// corners closer than `min_dist` pixels in the image, or a ground-truth 3D
/// triangle with an interior angle under `min_angle_deg`.
fn sample_triplets<E: Scalar>(
    gt: &Tensor<E>,
    k: &Intrinsics,
    mask: &[usize],
    target: usize,
    cfg: &LossConfig,
    seed: u64,
) -> Result<VnlOp> {
    let w = k.width;
    let dir_of = |i: usize| -> [f64; 3] {
        let (v, u) = (i / w, i % w);
        [
            (u as f64 - k.cx) / k.fx,
            (v as f64 - k.cy) / k.fy,
            1.0,
        ]
    };
    let min_cos = (cfg.vnl_min_angle_deg.to_radians()).cos();
    let min_dist_sq = cfg.vnl_min_dist * cfg.vnl_min_dist;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut op = VnlOp {
        pixels: Vec::with_capacity(target),
        dirs: Vec::with_capacity(target),
        gt_normals: Vec::with_capacity(target),
    };
    let mut attempts = 0usize;
    let max_attempts = target.saturating_mul(60).max(1000);
    'outer: while op.pixels.len() < target && attempts < max_attempts {
        attempts += 1;
        let mut px = [0usize; 3];
        for slot in px.iter_mut() {
            *slot = mask[rng.gen_range(0..mask.len())];
        }
        if px[0] == px[1] || px[0] == px[2] || px[1] == px[2] {
            continue;
        }
        for i in 0..3 {
            for j in i + 1..3 {
                let (ui, vi) = ((px[i] % w) as f64, (px[i] / w) as f64);
                let (uj, vj) = ((px[j] % w) as f64, (px[j] / w) as f64);
                let d2 = (ui - uj) * (ui - uj) + (vi - vj) * (vi - vj);
                if d2 < min_dist_sq {
                    continue 'outer;
                }
            }
        }
        let dirs = [dir_of(px[0]), dir_of(px[1]), dir_of(px[2])];
        let mut pts = [[0.0; 3]; 3];
        for j in 0..3 {
            pts[j] = scale3(dirs[j], gt.data()[px[j]].to_f64());
        }
        // Interior angles of the ground-truth triangle.
        for j in 0..3 {
            let e1 = sub3(pts[(j + 1) % 3], pts[j]);
            let e2 = sub3(pts[(j + 2) % 3], pts[j]);
            let (l1, l2) = (norm(e1), norm(e2));
            if l1 < 1e-9 || l2 < 1e-9 || dot(e1, e2) / (l1 * l2) > min_cos {
                continue 'outer;
            }
        }
        let (n, _, _) = plane_normal(&pts);
        op.pixels.push(px);
        op.dirs.push(dirs);
        op.gt_normals.push(n);
    }
    if op.pixels.is_empty() {
        return Err(CueError::Data(format!(
            "virtual normal sampling accepted 0 of {attempts} attempted triplets \
             ({} valid pixels, min_dist {} px, min_angle {} deg)",
            mask.len(),
            cfg.vnl_min_dist,
            cfg.vnl_min_angle_deg
        )));
    }
    Ok(op)
}

/// Virtual normal loss of a predicted depth map (mean L1 distance between
/// unit plane normals of prediction and ground truth over sampled triplets).
pub fn vnl_loss<E: Scalar>(
    tape: &mut Tape<E>,
    pred: Var,
    gt: &Tensor<E>,
    k: &Intrinsics,
    mask: &[usize],
    cfg: &LossConfig,
    seed: u64,
) -> Result<Var> {
    cfg.validate()?;
    let n = flat_len(tape.value(pred).shape());
    if flat_len(gt.shape()) != n || n != k.width * k.height {
        return Err(CueError::Shape(format!(
            "vnl_loss pred {:?}, gt {:?}, intrinsics {}x{}",
            tape.value(pred).shape(),
            gt.shape(),
            k.width,
            k.height
        )));
    }
    check_mask_depths("vnl_loss pred", tape.value(pred), mask, n)?;
    check_mask_depths("vnl_loss gt", gt, mask, n)?;
    let target = cfg.effective_triplets(mask.len());
    if target == 0 {
        return Err(CueError::Config(
            "vnl_loss called with vnl_samples = 0 (term disabled)".into(),
        ));
    }
    if mask.len() < 3 {
        return Err(CueError::Data(format!(
            "vnl_loss needs at least 3 valid pixels, got {}",
            mask.len()
        )));
    }
    let op = sample_triplets(gt, k, mask, target, cfg, seed)?;
    tape.custom(&[pred], Rc::new(op))
}

/// `beta * si + vnl`; the normal term is skipped when vnl_samples is 0.
pub fn combined_loss<E: Scalar>(
    tape: &mut Tape<E>,
    pred: Var,
    gt: &Tensor<E>,
    k: &Intrinsics,
    mask: &[usize],
    cfg: &LossConfig,
    seed: u64,
) -> Result<Var> {
    let si = si_loss(tape, pred, gt, mask, cfg)?;
    let si_term = tape.scale_const(si, cfg.beta)?;
    if cfg.effective_triplets(mask.len()) == 0 {
        return Ok(si_term);
    }
    let vnl = vnl_loss(tape, pred, gt, k, mask, cfg, seed)?;
    tape.add(si_term, vnl)
}

/// Loss terms of one sample: the total objective, plus both addends.
pub struct LossTerms {
    pub total: Var,
    /// Combined loss of the monocular input depth; constant, no gradient.
    pub mono_term: Var,
    /// Combined loss of the predicted depth; the optimized term.
    pub final_term: Var,
    pub si: Var,
    pub vnl: Option<Var>,
}

/// The two-term objective: the monocular depth is an input here, not a
/// network output, so its term enters as a gradient-free diagnostic and only
/// the prediction term drives optimization.
pub fn final_loss<E: Scalar>(
    tape: &mut Tape<E>,
    d_mono: &Tensor<E>,
    d_pred: Var,
    gt: &Tensor<E>,
    k: &Intrinsics,
    mask: &[usize],
    cfg: &LossConfig,
    seed: u64,
) -> Result<LossTerms> {
    let mono_var = tape.constant(d_mono.clone())?;
    let mono_term = combined_loss(tape, mono_var, gt, k, mask, cfg, seed)?;

    let si = si_loss(tape, d_pred, gt, mask, cfg)?;
    let si_term = tape.scale_const(si, cfg.beta)?;
    let (final_term, vnl) = if cfg.effective_triplets(mask.len()) == 0 {
        (si_term, None)
    } else {
        let vnl = vnl_loss(tape, d_pred, gt, k, mask, cfg, seed)?;
        (tape.add(si_term, vnl)?, Some(vnl))
    };
    let total = tape.add(mono_term, final_term)?;
    Ok(LossTerms {
        total,
        mono_term,
        final_term,
        si,
        vnl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::store::{ParamLeaves, ParamStore};
    use proptest::prelude::*;
    use rand::Rng;

    fn k8() -> Intrinsics {
        Intrinsics {
            fx: 12.0,
            fy: 12.0,
            cx: 3.5,
            cy: 3.5,
            width: 8,
            height: 8,
        }
    }

    fn full_mask(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    fn as_var(tape: &mut Tape<f64>, t: &Tensor<f64>) -> Var {
        tape.leaf(t.clone()).unwrap()
    }

    fn rand_depth(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.gen_range(lo..hi);
        }
        t
    }

    #[test]
    fn si_loss_is_zero_on_perfect_prediction() {
        let gt = rand_depth(&[8, 8, 1], 1, 2.0, 20.0);
        let mut tape = Tape::new();
        let pred = as_var(&mut tape, &gt);
        let loss = si_loss(&mut tape, pred, &gt, &full_mask(64), &LossConfig::default()).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn si_loss_of_global_scale_matches_closed_form() {
        let gt = rand_depth(&[8, 8, 1], 2, 2.0, 20.0);
        let scaled = gt.clone().map(|d| d * std::f64::consts::E);
        let mut tape = Tape::new();
        let pred = as_var(&mut tape, &scaled);
        let loss = si_loss(&mut tape, pred, &gt, &full_mask(64), &LossConfig::default()).unwrap();
        let want = 10.0 * 0.15f64.sqrt();
        let got = tape.value(loss).item().unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn si_loss_with_lambda_one_forgives_any_scale() {
        let gt = rand_depth(&[8, 8, 1], 3, 2.0, 20.0);
        let cfg = LossConfig {
            lambda_si: 1.0,
            ..LossConfig::default()
        };
        for c in [0.3, 2.0, 7.5] {
            let scaled = gt.clone().map(|d| d * c);
            let mut tape = Tape::new();
            let pred = as_var(&mut tape, &scaled);
            let loss = si_loss(&mut tape, pred, &gt, &full_mask(64), &cfg).unwrap();
            let got = tape.value(loss).item().unwrap();
            assert!(got.abs() < 1e-6, "scale {c}: {got}");
        }
    }

    #[test]
    fn si_loss_rejects_empty_mask_and_bad_depths() {
        let gt = rand_depth(&[4, 4, 1], 4, 2.0, 20.0);
        let mut tape = Tape::new();
        let pred = as_var(&mut tape, &gt);
        assert!(si_loss(&mut tape, pred, &gt, &[], &LossConfig::default()).is_err());

        let mut bad = gt.clone();
        bad.data_mut()[5] = 0.0;
        let mut tape2 = Tape::new();
        let pred2 = as_var(&mut tape2, &bad);
        assert!(si_loss(&mut tape2, pred2, &gt, &full_mask(16), &LossConfig::default()).is_err());
        let mut tape3 = Tape::new();
        let pred3 = as_var(&mut tape3, &gt);
        assert!(si_loss(&mut tape3, pred3, &bad, &full_mask(16), &LossConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn si_loss_is_nonnegative(seed in 0u64..500) {
            let gt = rand_depth(&[5, 5, 1], seed, 1.0, 30.0);
            let pred_t = rand_depth(&[5, 5, 1], seed.wrapping_add(1000), 1.0, 30.0);
            let mut tape = Tape::new();
            let pred = as_var(&mut tape, &pred_t);
            let loss = si_loss(&mut tape, pred, &gt, &full_mask(25), &LossConfig::default()).unwrap();
            prop_assert!(tape.value(loss).item().unwrap() >= 0.0);
        }
    }

    fn small_cfg() -> LossConfig {
        LossConfig {
            vnl_samples: 200,
            vnl_min_dist: 2.0,
            ..LossConfig::default()
        }
    }

    #[test]
    fn vnl_loss_is_zero_for_exact_and_scaled_geometry() {
        let k = k8();
        let gt = rand_depth(&[8, 8, 1], 5, 3.0, 10.0);
        for c in [0.5, 1.0, 2.0] {
            let pred_t = gt.clone().map(|d| d * c);
            let mut tape = Tape::new();
            let pred = as_var(&mut tape, &pred_t);
            let loss =
                vnl_loss(&mut tape, pred, &gt, &k, &full_mask(64), &small_cfg(), 9).unwrap();
            let got = tape.value(loss).item().unwrap();
            assert!(got.abs() < 1e-6, "scale {c}: {got}");
        }
    }

    #[test]
    fn vnl_loss_grows_with_plane_tilt() {
        let k = k8();
        let gt = Tensor::full(&[8, 8, 1], 6.0f64);
        let mut last = 0.0;
        for slope in [0.05, 0.15, 0.4] {
            let pred_t = Tensor::from_fn(&[8, 8, 1], |i| {
                let u = (i % 8) as f64;
                6.0 + slope * (u - 3.5)
            });
            let mut tape = Tape::new();
            let pred = as_var(&mut tape, &pred_t);
            let loss =
                vnl_loss(&mut tape, pred, &gt, &k, &full_mask(64), &small_cfg(), 9).unwrap();
            let got = tape.value(loss).item().unwrap();
            assert!(got > last, "slope {slope}: {got} not above {last}");
            last = got;
        }
    }

    #[test]
    fn vnl_loss_is_seed_deterministic() {
        let k = k8();
        let gt = rand_depth(&[8, 8, 1], 6, 3.0, 10.0);
        let pred_t = rand_depth(&[8, 8, 1], 7, 3.0, 10.0);
        let run = |seed: u64| {
            let mut tape = Tape::new();
            let pred = as_var(&mut tape, &pred_t);
            let loss =
                vnl_loss(&mut tape, pred, &gt, &k, &full_mask(64), &small_cfg(), seed).unwrap();
            tape.value(loss).item().unwrap()
        };
        assert_eq!(run(3).to_bits(), run(3).to_bits());
        assert_ne!(run(3).to_bits(), run(4).to_bits());
    }

    proptest! {
        #[test]
        fn vnl_loss_stays_inside_unit_normal_bounds(seed in 0u64..200) {
            let k = k8();
            let gt = rand_depth(&[8, 8, 1], seed, 1.0, 30.0);
            let pred_t = rand_depth(&[8, 8, 1], seed.wrapping_add(999), 1.0, 30.0);
            let mut tape = Tape::new();
            let pred = as_var(&mut tape, &pred_t);
            let loss = vnl_loss(&mut tape, pred, &gt, &k, &full_mask(64), &small_cfg(), seed)
                .unwrap();
            let got = tape.value(loss).item().unwrap();
            prop_assert!((0.0..=2.0).contains(&got), "{}", got);
        }
    }

    #[test]
    fn vnl_rejection_can_exhaust_the_mask() {
        let k = k8();
        let gt = rand_depth(&[8, 8, 1], 8, 3.0, 10.0);
        // Two pixels cannot form a triplet at all.
        let mut tape = Tape::new();
        let pred = as_var(&mut tape, &gt);
        let err = vnl_loss(&mut tape, pred, &gt, &k, &[0, 1], &small_cfg(), 1).unwrap_err();
        assert!(err.to_string().contains("3 valid pixels"), "{err}");

        // A tight cluster fails the distance screen for every draw.
        let cluster = [0usize, 1, 8, 9];
        let cfg = LossConfig {
            vnl_min_dist: 5.0,
            ..small_cfg()
        };
        let mut tape2 = Tape::new();
        let pred2 = as_var(&mut tape2, &gt);
        let err2 = vnl_loss(&mut tape2, pred2, &gt, &k, &cluster, &cfg, 1).unwrap_err();
        assert!(err2.to_string().contains("accepted 0"), "{err2}");
    }

    fn loss_graph_store(seed: u64) -> (ParamStore<f64>, Tensor<f64>) {
        let gt = rand_depth(&[8, 8, 1], seed, 3.0, 12.0);
        let mut store = ParamStore::new();
        let pred = rand_depth(&[8, 8, 1], seed.wrapping_add(1), 3.0, 12.0);
        store.insert("pred", pred).unwrap();
        (store, gt)
    }

    #[test]
    fn si_loss_gradient_matches_finite_differences() {
        let (store, gt) = loss_graph_store(21);
        let report = grad_check(
            &store,
            &|tape: &mut Tape<f64>, store: &ParamStore<f64>, leaves: &mut ParamLeaves| {
                let pred = leaves.leaf(tape, store, "pred")?;
                si_loss(tape, pred, &gt, &full_mask(64), &LossConfig::default())
            },
            24,
            7,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report}");
    }

    #[test]
    fn vnl_loss_gradient_matches_finite_differences() {
        let (store, gt) = loss_graph_store(22);
        let k = k8();
        let report = grad_check(
            &store,
            &|tape: &mut Tape<f64>, store: &ParamStore<f64>, leaves: &mut ParamLeaves| {
                let pred = leaves.leaf(tape, store, "pred")?;
                vnl_loss(tape, pred, &gt, &k, &full_mask(64), &small_cfg(), 5)
            },
            24,
            8,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report}");
    }

    #[test]
    fn combined_loss_gradient_matches_finite_differences() {
        let (store, gt) = loss_graph_store(23);
        let k = k8();
        let report = grad_check(
            &store,
            &|tape: &mut Tape<f64>, store: &ParamStore<f64>, leaves: &mut ParamLeaves| {
                let pred = leaves.leaf(tape, store, "pred")?;
                combined_loss(tape, pred, &gt, &k, &full_mask(64), &small_cfg(), 5)
            },
            24,
            9,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report}");
    }

    #[test]
    fn combined_loss_reduces_to_scaled_si_without_triplets() {
        let gt = rand_depth(&[8, 8, 1], 24, 3.0, 12.0);
        let pred_t = rand_depth(&[8, 8, 1], 25, 3.0, 12.0);
        let cfg = LossConfig {
            vnl_samples: 0,
            ..LossConfig::default()
        };
        let k = k8();
        let mut tape = Tape::new();
        let pred = as_var(&mut tape, &pred_t);
        let combined = combined_loss(&mut tape, pred, &gt, &k, &full_mask(64), &cfg, 1).unwrap();
        let si = si_loss(&mut tape, pred, &gt, &full_mask(64), &cfg).unwrap();
        let got = tape.value(combined).item().unwrap();
        let want = 4.0 * tape.value(si).item().unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn final_loss_is_zero_when_everything_matches() {
        let gt = rand_depth(&[8, 8, 1], 26, 3.0, 12.0);
        let k = k8();
        let mut tape = Tape::new();
        let pred = as_var(&mut tape, &gt);
        let terms = final_loss(
            &mut tape,
            &gt,
            pred,
            &gt,
            &k,
            &full_mask(64),
            &small_cfg(),
            2,
        )
        .unwrap();
        assert!(tape.value(terms.total).item().unwrap().abs() < 1e-9);
        assert!(tape.value(terms.mono_term).item().unwrap().abs() < 1e-9);
        assert!(tape.value(terms.final_term).item().unwrap().abs() < 1e-9);
    }

    #[test]
    fn final_loss_moves_only_through_the_prediction_term() {
        let gt = rand_depth(&[8, 8, 1], 27, 3.0, 12.0);
        let mono = rand_depth(&[8, 8, 1], 28, 3.0, 12.0);
        let pred_t = rand_depth(&[8, 8, 1], 29, 3.0, 12.0);
        let k = k8();
        let cfg = small_cfg();
        let mask = full_mask(64);

        // Gradient of the two-term total w.r.t. the prediction...
        let mut tape = Tape::new();
        let pred = tape.leaf(pred_t.clone()).unwrap();
        let terms = final_loss(&mut tape, &mono, pred, &gt, &k, &mask, &cfg, 3).unwrap();
        let grads = tape.backward(terms.total).unwrap();
        let g_total = grads.get(pred).unwrap().data().to_vec();

        // ...equals the gradient of the prediction term alone.
        let mut tape2 = Tape::new();
        let pred2 = tape2.leaf(pred_t.clone()).unwrap();
        let loss2 = combined_loss(&mut tape2, pred2, &gt, &k, &mask, &cfg, 3).unwrap();
        let grads2 = tape2.backward(loss2).unwrap();
        let g_alone = grads2.get(pred2).unwrap().data().to_vec();

        for (a, b) in g_total.iter().zip(&g_alone) {
            let denom = a.abs().max(b.abs()).max(1e-12);
            assert!((a - b).abs() / denom < 1e-8, "{a} vs {b}");
        }

        // The mono term itself changed the total's value...
        let total = tape.value(terms.total).item().unwrap();
        let final_term = tape.value(terms.final_term).item().unwrap();
        let mono_term = tape.value(terms.mono_term).item().unwrap();
        assert!((total - (mono_term + final_term)).abs() < 1e-12);
        assert!(mono_term > 0.0);
    }

    #[test]
    fn config_validation_catches_bad_weights() {
        let mut cfg = LossConfig::default();
        cfg.validate().unwrap();
        cfg.beta = 0.0;
        assert!(cfg.validate().is_err());
        cfg.beta = 4.0;
        cfg.lambda_si = 1.5;
        assert!(cfg.validate().is_err());
        cfg.lambda_si = 0.85;
        cfg.valid_range = (5.0, 5.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn range_mask_is_half_open_at_the_bottom() {
        let gt = Tensor::from_vec(&[1, 5], vec![0.0f64, 0.5, 3.0, 80.0, 81.0]).unwrap();
        assert_eq!(range_mask(&gt, 0.0, 80.0), vec![1, 2, 3]);
        assert_eq!(range_mask(&gt, 0.5, 80.0), vec![2, 3]);
    }
}
