//! Camera model, rigid poses, inverse-depth hypothesis sampling, and
//! plane-sweep warping of source frames onto the target view.
//!
//! All geometry math runs in f64 regardless of pipeline precision; image
//! payloads stay f32. Pixel coordinate (u, v) addresses the sample point of
//! pixel center (u, v) exactly, for rendering and warping alike, so a warp
//! under the identity pose reproduces the source image bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{CueError, Result};
use crate::tensor::Tensor;

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(CueError::Config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(CueError::Config(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Rigid transform mapping world coordinates to camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Pose {
            r: Pose::identity().r,
            t,
        }
    }

    /// Rotation about the y axis by `angle` radians (yaw), zero translation.
    pub fn yaw(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Pose {
            r: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
            t: [0.0; 3],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.r;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.t[2],
        ]
    }

    /// Rotates a direction (no translation).
    pub fn rotate(&self, d: [f64; 3]) -> [f64; 3] {
        let r = &self.r;
        [
            r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2],
            r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2],
            r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2],
        ]
    }

    /// `self` after `other`: (self ∘ other)(x) = self(other(x)).
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    r[i][j] += self.r[i][k] * other.r[k][j];
                }
            }
        }
        let t = self.apply(other.t);
        Pose { r, t }
    }

    pub fn inverse(&self) -> Pose {
        let mut rt = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = self.r[j][i];
            }
        }
        let ti = [
            -(rt[0][0] * self.t[0] + rt[0][1] * self.t[1] + rt[0][2] * self.t[2]),
            -(rt[1][0] * self.t[0] + rt[1][1] * self.t[1] + rt[1][2] * self.t[2]),
            -(rt[2][0] * self.t[0] + rt[2][1] * self.t[1] + rt[2][2] * self.t[2]),
        ];
        Pose { r: rt, t: ti }
    }

    /// Orthonormality and handedness, both within 1e-6.
    pub fn validate(&self) -> Result<()> {
        let r = &self.r;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(CueError::Config(format!(
                        "rotation not orthonormal: col {i}.col {j} = {dot}"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(CueError::Config(format!("rotation determinant {det} != 1")));
        }
        Ok(())
    }

    /// Row-major 4x4 matrix, as stored in scene manifests.
    pub fn to_mat4(&self) -> [f64; 16] {
        let mut m = [0.0; 16];
        for i in 0..3 {
            for j in 0..3 {
                m[i * 4 + j] = self.r[i][j];
            }
            m[i * 4 + 3] = self.t[i];
        }
        m[15] = 1.0;
        m
    }

    pub fn from_mat4(m: &[f64; 16]) -> Result<Pose> {
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(CueError::Data(
                "pose matrix bottom row must be (0,0,0,1)".into(),
            ));
        }
        let pose = Pose {
            r: [
                [m[0], m[1], m[2]],
                [m[4], m[5], m[6]],
                [m[8], m[9], m[10]],
            ],
            t: [m[3], m[7], m[11]],
        };
        pose.validate()?;
        Ok(pose)
    }
}

/// Maps target-camera coordinates into source-camera coordinates, composed
/// from the two frames' world-to-camera poses as `src ∘ target⁻¹`.
pub fn relative_pose(target_w2c: &Pose, source_w2c: &Pose) -> Pose {
    source_w2c.compose(&target_w2c.inverse())
}

/// M depth hypotheses uniform in inverse depth over `[1/d_max, 1/d_min]`,
/// endpoints included, stored ascending in depth. Doubles as the bin grid of
/// the one-hot encoding: bin k covers `(d_{k-1}, d_k]` with `d_0 = 0`, and
/// depths above `d_M` clamp into the last bin.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    depths: Vec<f64>,
}

impl HypothesisSet {
    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn m(&self) -> usize {
        self.depths.len()
    }

    pub fn d_min(&self) -> f64 {
        self.depths[0]
    }

    pub fn d_max(&self) -> f64 {
        *self.depths.last().unwrap()
    }

    /// Width of one inverse-depth bin.
    pub fn inv_bin_width(&self) -> f64 {
        (1.0 / self.d_min() - 1.0 / self.d_max()) / (self.m() - 1) as f64
    }

    /// 0-indexed bin of a positive depth: the unique k with
    /// `d ∈ (d_{k-1}, d_k]`, clamped into the last bin above `d_max`. A depth
    /// within 1e-6 relative of an edge counts as sitting on it, so depths
    /// that round-tripped through f32 storage keep their bin.
    pub fn bin_of(&self, d: f64) -> Result<usize> {
        if !(d > 0.0) {
            return Err(CueError::Numeric(format!("bin_of nonpositive depth {d}")));
        }
        let k = self
            .depths
            .partition_point(|&edge| d > edge && d - edge > edge * 1e-6);
        Ok(k.min(self.depths.len() - 1))
    }

    /// Rebuilds from explicit depths (checkpoint/manifest path); validates
    /// ordering and uniform inverse spacing.
    pub fn from_depths(depths: Vec<f64>) -> Result<Self> {
        if depths.len() < 2 {
            return Err(CueError::Config("hypothesis set needs M >= 2".into()));
        }
        if !depths.windows(2).all(|w| w[0] < w[1]) || depths[0] <= 0.0 {
            return Err(CueError::Config(
                "hypothesis depths must be positive and ascending".into(),
            ));
        }
        let hs = HypothesisSet { depths };
        let gap0 = hs.inv_bin_width();
        for w in hs.depths.windows(2) {
            let gap = 1.0 / w[0] - 1.0 / w[1];
            if (gap - gap0).abs() > 1e-9 {
                return Err(CueError::Config(format!(
                    "inverse-depth spacing not uniform: {gap} vs {gap0}"
                )));
            }
        }
        Ok(hs)
    }
}

pub fn make_hypotheses(d_min: f64, d_max: f64, m: usize) -> Result<HypothesisSet> {
    if !(d_min > 0.0) || d_min >= d_max {
        return Err(CueError::Config(format!(
            "need 0 < d_min < d_max, got {d_min}..{d_max}"
        )));
    }
    if m < 2 {
        return Err(CueError::Config(format!("need M >= 2 hypotheses, got {m}")));
    }
    let inv_hi = 1.0 / d_min;
    let inv_lo = 1.0 / d_max;
    let depths = (0..m)
        .map(|i| {
            // Exact endpoints; 1/(1/d) need not round-trip in floating point.
            if i == 0 {
                d_min
            } else if i == m - 1 {
                d_max
            } else {
                let a = i as f64 / (m - 1) as f64;
                1.0 / (inv_hi + a * (inv_lo - inv_hi))
            }
        })
        .collect();
    Ok(HypothesisSet { depths })
}

/// Camera-frame 3D point of pixel (u, v) at `depth`.
pub fn backproject(u: f64, v: f64, depth: f64, k: &Intrinsics) -> [f64; 3] {
    [
        (u - k.cx) * depth / k.fx,
        (v - k.cy) * depth / k.fy,
        depth,
    ]
}

/// Pixel coordinates of a camera-frame point, `None` behind the camera.
pub fn project(p: [f64; 3], k: &Intrinsics) -> Option<(f64, f64)> {
    if p[2] <= 0.0 {
        return None;
    }
    Some((k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy))
}

/// Nudges a coordinate onto the integer grid when it is within rounding
/// noise of it, so identity-like warps keep their border pixels valid
/// instead of demanding an out-of-bounds interpolation partner.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-6 {
        r
    } else {
        x
    }
}

/// Bilinear lookup into `img[h,w,c]` writing `c` values to `out`. Returns
/// false (and writes zeros) if any needed interpolation corner falls outside
/// the raster; border samples that sit exactly on the grid need only one
/// tap per axis and stay valid.
fn sample_bilinear(img: &Tensor<f32>, us: f64, vs: f64, out: &mut [f32]) -> bool {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let us = snap(us);
    let vs = snap(vs);
    let x0f = us.floor();
    let y0f = vs.floor();
    let fx = us - x0f;
    let fy = vs - y0f;
    let x1f = if fx == 0.0 { x0f } else { x0f + 1.0 };
    let y1f = if fy == 0.0 { y0f } else { y0f + 1.0 };
    if x0f < 0.0 || y0f < 0.0 || x1f > (w - 1) as f64 || y1f > (h - 1) as f64 {
        out.fill(0.0);
        return false;
    }
    let (x0, x1, y0, y1) = (x0f as usize, x1f as usize, y0f as usize, y1f as usize);
    let d = img.data();
    let base = |y: usize, x: usize| (y * w + x) * c;
    let (p00, p01, p10, p11) = (base(y0, x0), base(y0, x1), base(y1, x0), base(y1, x1));
    for k in 0..c {
        let top = (1.0 - fx) * d[p00 + k] as f64 + fx * d[p01 + k] as f64;
        let bot = (1.0 - fx) * d[p10 + k] as f64 + fx * d[p11 + k] as f64;
        out[k] = ((1.0 - fy) * top + fy * bot) as f32;
    }
    true
}

fn warp_impl(
    source: &Tensor<f32>,
    k: &Intrinsics,
    target_to_source: &Pose,
    depth_at: &dyn Fn(usize, usize) -> f64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if source.ndim() != 3 {
        return Err(CueError::Shape(format!(
            "warp expects [h,w,c] source, got {:?}",
            source.shape()
        )));
    }
    let (h, w, c) = (source.shape()[0], source.shape()[1], source.shape()[2]);
    let mut warped = vec![0.0f32; h * w * c];
    let mut validity = vec![0.0f32; h * w];
    for v in 0..h {
        for u in 0..w {
            let d = depth_at(u, v);
            if !(d > 0.0) {
                return Err(CueError::Numeric(format!(
                    "warp got nonpositive depth {d} at pixel ({u}, {v})"
                )));
            }
            let p_src = target_to_source.apply(backproject(u as f64, v as f64, d, k));
            let Some((us, vs)) = project(p_src, k) else {
                continue;
            };
            let px = &mut warped[(v * w + u) * c..(v * w + u + 1) * c];
            if sample_bilinear(source, us, vs, px) {
                validity[v * w + u] = 1.0;
            }
        }
    }
    Ok((
        Tensor::from_vec(&[h, w, c], warped)?,
        Tensor::from_vec(&[h, w, 1], validity)?,
    ))
}

/// Warps a source frame onto the target view assuming the whole scene sits
/// at `hypothesis_depth` (one plane of the sweep). Pixels projecting outside
/// the source or behind its camera come back as 0 with validity 0.
pub fn warp_source_to_target(
    source: &Tensor<f32>,
    k: &Intrinsics,
    target_to_source: &Pose,
    hypothesis_depth: f64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if !(hypothesis_depth > 0.0) {
        return Err(CueError::Config(format!(
            "hypothesis depth must be positive, got {hypothesis_depth}"
        )));
    }
    warp_impl(source, k, target_to_source, &|_, _| hypothesis_depth)
}

/// Same warp driven by a per-pixel depth map `[h,w]` or `[h,w,1]` (used for
/// photometric-consistency checks with ground-truth or estimated depth).
pub fn warp_with_depth_map(
    source: &Tensor<f32>,
    k: &Intrinsics,
    target_to_source: &Pose,
    depth: &Tensor<f32>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = (source.shape()[0], source.shape()[1]);
    if depth.len() != h * w {
        return Err(CueError::Shape(format!(
            "depth map {:?} does not cover {h}x{w} image",
            depth.shape()
        )));
    }
    let dd = depth.data();
    warp_impl(source, k, target_to_source, &|u, v| dd[v * w + u] as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_k() -> Intrinsics {
        Intrinsics {
            fx: 10.0,
            fy: 10.0,
            cx: 7.5,
            cy: 5.5,
            width: 16,
            height: 12,
        }
    }

    #[test]
    fn hypotheses_match_inverse_uniform_example() {
        let h = make_hypotheses(2.0, 10.0, 3).unwrap();
        let want = [2.0, 10.0 / 3.0, 10.0];
        for (d, w) in h.depths().iter().zip(want) {
            assert!((d - w).abs() < 1e-12, "{d} vs {w}");
        }
        let inv: Vec<f64> = h.depths().iter().map(|d| 1.0 / d).collect();
        for (i, w) in [0.5, 0.3, 0.1].iter().enumerate() {
            assert!((inv[i] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn hypotheses_reject_bad_ranges() {
        assert!(make_hypotheses(1.0, 1.0 + f64::EPSILON, 2).is_ok());
        assert!(make_hypotheses(1.0, 1.0, 3).is_err());
        assert!(make_hypotheses(2.0, 1.0, 3).is_err());
        assert!(make_hypotheses(0.0, 1.0, 3).is_err());
        assert!(make_hypotheses(1.0, 2.0, 1).is_err());
    }

    #[test]
    fn paper_scale_hypothesis_count_is_representable() {
        let h = make_hypotheses(2.0, 80.0, 32).unwrap();
        assert_eq!(h.m(), 32);
        assert_eq!(h.d_min(), 2.0);
        assert_eq!(h.d_max(), 80.0);
    }

    proptest! {
        #[test]
        fn inverse_gaps_are_uniform(
            d_min in 0.5f64..5.0,
            span in 1.0f64..60.0,
            m in 2usize..40,
        ) {
            let h = make_hypotheses(d_min, d_min + span, m).unwrap();
            let gap0 = h.inv_bin_width();
            for w in h.depths().windows(2) {
                let gap = 1.0 / w[0] - 1.0 / w[1];
                prop_assert!((gap - gap0).abs() < 1e-9);
            }
            // And the validator agrees.
            prop_assert!(HypothesisSet::from_depths(h.depths().to_vec()).is_ok());
        }
    }

    #[test]
    fn bin_of_follows_right_closed_edges() {
        let h = make_hypotheses(2.0, 10.0, 3).unwrap();
        assert_eq!(h.bin_of(3.0).unwrap(), 1);
        assert_eq!(h.bin_of(2.0).unwrap(), 0); // right-closed at the edge
        assert_eq!(h.bin_of(0.5).unwrap(), 0); // (0, d_1]
        assert_eq!(h.bin_of(50.0).unwrap(), 2); // clamped above d_max
        assert!(h.bin_of(0.0).is_err());
        assert!(h.bin_of(-1.0).is_err());
    }

    #[test]
    fn backproject_on_the_optical_axis() {
        let k = test_k();
        let p = backproject(k.cx, k.cy, 5.0, &k);
        assert_eq!(p, [0.0, 0.0, 5.0]);
        let q = backproject(k.cx + k.fx, k.cy, 1.0, &k);
        assert!((q[0] - 1.0).abs() < 1e-12 && q[1] == 0.0 && q[2] == 1.0);
    }

    #[test]
    fn project_backproject_round_trips() {
        let k = test_k();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let u = rng.gen_range(0.0..k.width as f64);
            let v = rng.gen_range(0.0..k.height as f64);
            let d = rng.gen_range(0.5..50.0);
            let (pu, pv) = project(backproject(u, v, d, &k), &k).unwrap();
            assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6);
        }
        assert!(project([0.0, 0.0, -1.0], &k).is_none());
        assert!(project([0.0, 0.0, 0.0], &k).is_none());
    }

    #[test]
    fn pose_compose_inverse_is_identity() {
        let a = Pose::yaw(0.3).compose(&Pose::translation([0.2, -0.1, 0.5]));
        let i = a.compose(&a.inverse());
        let p = [1.0, 2.0, 3.0];
        let q = i.apply(p);
        for (x, y) in p.iter().zip(q) {
            assert!((x - y).abs() < 1e-12);
        }
        a.validate().unwrap();
    }

    #[test]
    fn pose_mat4_round_trips_and_validates() {
        let a = Pose::yaw(-0.7).compose(&Pose::translation([4.0, 5.0, 6.0]));
        let b = Pose::from_mat4(&a.to_mat4()).unwrap();
        assert_eq!(a, b);

        let mut bad = a.to_mat4();
        bad[0] = 2.0;
        assert!(Pose::from_mat4(&bad).is_err());
        let mut shear = a.to_mat4();
        shear[12] = 1.0;
        assert!(Pose::from_mat4(&shear).is_err());
    }

    fn stripes() -> Tensor<f32> {
        // Value depends only on the column, so horizontal shifts are visible.
        Tensor::from_fn(&[12, 16, 1], |i| {
            let x = i % 16;
            (x as f32) / 16.0
        })
    }

    #[test]
    fn identity_warp_reproduces_source_exactly() {
        let k = test_k();
        let src = stripes();
        let (warped, valid) = warp_source_to_target(&src, &k, &Pose::identity(), 5.0).unwrap();
        assert_eq!(warped.data(), src.data());
        assert!(valid.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fronto_parallel_translation_shifts_columns() {
        let k = test_k();
        let src = stripes();
        // fx * tx / d = 10 * 1 / 5 = 2 columns.
        let pose = Pose::translation([1.0, 0.0, 0.0]);
        let (warped, valid) = warp_source_to_target(&src, &k, &pose, 5.0).unwrap();
        for v in 0..12 {
            for u in 0..16 {
                if u + 2 < 16 {
                    assert_eq!(valid.at3(v, u, 0), 1.0);
                    assert!((warped.at3(v, u, 0) - src.at3(v, u + 2, 0)).abs() < 1e-6);
                } else {
                    assert_eq!(valid.at3(v, u, 0), 0.0);
                    assert_eq!(warped.at3(v, u, 0), 0.0);
                }
            }
        }
    }

    #[test]
    fn huge_translation_invalidates_everything() {
        let k = test_k();
        let (warped, valid) =
            warp_source_to_target(&stripes(), &k, &Pose::translation([500.0, 0.0, 0.0]), 5.0)
                .unwrap();
        assert!(valid.data().iter().all(|&v| v == 0.0));
        assert!(warped.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn validity_shrinks_with_the_source_raster() {
        // The same warp against a cropped source can only lose pixels.
        let k = test_k();
        let src = stripes();
        let cropped = Tensor::from_fn(&[10, 14, 1], |i| {
            let (y, x) = (i / 14, i % 14);
            src.at3(y, x, 0)
        });
        let pose = Pose::translation([0.4, 0.3, 0.0]);
        let (_, full) = warp_source_to_target(&src, &k, &pose, 5.0).unwrap();
        let (_, small) = warp_with_depth_map(&cropped, &k, &pose, &Tensor::full(&[10, 14], 5.0))
            .unwrap();
        for v in 0..10 {
            for u in 0..14 {
                if small.at3(v, u, 0) == 1.0 {
                    assert_eq!(full.at3(v, u, 0), 1.0, "validity grew at ({u}, {v})");
                }
            }
        }
    }

    #[test]
    fn warp_rejects_nonpositive_depth() {
        let k = test_k();
        assert!(warp_source_to_target(&stripes(), &k, &Pose::identity(), 0.0).is_err());
        let dm = Tensor::full(&[12, 16], -1.0f32);
        assert!(warp_with_depth_map(&stripes(), &k, &Pose::identity(), &dm).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        let mut k = test_k();
        k.validate().unwrap();
        k.fx = 0.0;
        assert!(k.validate().is_err());
        k.fx = 10.0;
        k.cx = 16.0;
        assert!(k.validate().is_err());
    }
}
