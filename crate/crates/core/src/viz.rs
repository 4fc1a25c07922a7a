//! PNG rendering of results: colormapped depth maps, relative-error heat
//! maps, binary masks, and the three-panel figure the evaluator writes per
//! scene. Everything is pure pixel math over `[h, w]` tensors.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{CueError, Result};
use crate::tensor::Tensor;

/// Piecewise-linear ramp: dark blue, cyan, yellow, red. Input clamped to
/// [0, 1].
fn heat(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let stops: [(f64, [f64; 3]); 4] = [
        (0.0, [20.0, 30.0, 120.0]),
        (0.35, [40.0, 200.0, 220.0]),
        (0.7, [240.0, 220.0, 60.0]),
        (1.0, [210.0, 40.0, 30.0]),
    ];
    for w in stops.windows(2) {
        let ((a, ca), (b, cb)) = (w[0], w[1]);
        if t <= b {
            let f = if b > a { (t - a) / (b - a) } else { 0.0 };
            let mix = |i: usize| (ca[i] + f * (cb[i] - ca[i])).round() as u8;
            return Rgb([mix(0), mix(1), mix(2)]);
        }
    }
    Rgb([210, 40, 30])
}

fn expect_2d(t: &Tensor<f32>, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    match s {
        [h, w] => Ok((*h, *w)),
        [h, w, 1] => Ok((*h, *w)),
        _ => Err(CueError::Shape(format!("{what} must be [h, w], got {s:?}"))),
    }
}

/// Colormapped depth: the ramp runs over normalized inverse depth, so near
/// geometry is hot and far geometry is cold, matching how the hypothesis
/// grid allocates resolution.
pub fn depth_image(depth: &Tensor<f32>, d_min: f64, d_max: f64) -> Result<RgbImage> {
    let (h, w) = expect_2d(depth, "depth")?;
    if !(d_min > 0.0 && d_min < d_max) {
        return Err(CueError::Config(format!(
            "depth range [{d_min}, {d_max}] must be positive and increasing"
        )));
    }
    let (ilo, ihi) = (1.0 / d_max, 1.0 / d_min);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let d = depth.data()[y * w + x] as f64;
            let t = if d > 0.0 {
                (1.0 / d - ilo) / (ihi - ilo)
            } else {
                0.0
            };
            img.put_pixel(x as u32, y as u32, heat(t));
        }
    }
    Ok(img)
}

/// Relative-error heat map: |pred - gt| / gt, with `saturate` mapping to
/// the top of the ramp. Pixels with nonpositive ground truth render black.
pub fn error_image(pred: &Tensor<f32>, gt: &Tensor<f32>, saturate: f64) -> Result<RgbImage> {
    let (h, w) = expect_2d(gt, "gt")?;
    if pred.len() != gt.len() {
        return Err(CueError::Shape(format!(
            "error image: pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if !(saturate > 0.0) {
        return Err(CueError::Config(format!(
            "saturation point must be positive, got {saturate}"
        )));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = gt.data()[i] as f64;
            let px = if g > 0.0 {
                let rel = (pred.data()[i] as f64 - g).abs() / g;
                heat(rel / saturate)
            } else {
                Rgb([0, 0, 0])
            };
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    Ok(img)
}

/// Binary mask as white-on-black; entries above 0.5 count as set.
pub fn mask_image(mask: &Tensor<f32>) -> Result<RgbImage> {
    let (h, w) = expect_2d(mask, "mask")?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let on = mask.data()[y * w + x] > 0.5;
            let v = if on { 255 } else { 0 };
            img.put_pixel(x as u32, y as u32, Rgb([v, v, v]));
        }
    }
    Ok(img)
}

/// Width of the separator between panels, pixels.
pub const PANEL_GAP: u32 = 2;

/// Concatenates equally sized panels horizontally with a light separator.
pub fn panel_row(panels: &[RgbImage]) -> Result<RgbImage> {
    let first = panels
        .first()
        .ok_or_else(|| CueError::Config("panel row needs at least one panel".into()))?;
    let (w, h) = (first.width(), first.height());
    for p in panels {
        if p.width() != w || p.height() != h {
            return Err(CueError::Shape(format!(
                "panel {}x{} does not match {}x{}",
                p.width(),
                p.height(),
                w,
                h
            )));
        }
    }
    let total_w = w * panels.len() as u32 + PANEL_GAP * (panels.len() as u32 - 1);
    let mut out = RgbImage::from_pixel(total_w, h, Rgb([230, 230, 230]));
    for (i, p) in panels.iter().enumerate() {
        let x0 = i as u32 * (w + PANEL_GAP);
        for y in 0..h {
            for x in 0..w {
                out.put_pixel(x0 + x, y, *p.get_pixel(x, y));
            }
        }
    }
    Ok(out)
}

/// The per-scene evaluation figure: predicted depth, relative error against
/// ground truth (saturating at 50%), and the dynamic mask, side by side.
pub fn eval_triptych(
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    mask: &Tensor<f32>,
    d_min: f64,
    d_max: f64,
) -> Result<RgbImage> {
    let panels = [
        depth_image(pred, d_min, d_max)?,
        error_image(pred, gt, 0.5)?,
        mask_image(mask)?,
    ];
    panel_row(&panels)
}

pub fn save_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    img.save(path)
        .map_err(|e| CueError::Data(format!("writing {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[h, w], |i| 2.0 + (i % w) as f32 * 28.0 / (w - 1) as f32)
    }

    #[test]
    fn depth_image_runs_hot_to_cold_with_distance() {
        let d = ramp(4, 8);
        let img = depth_image(&d, 2.0, 30.0).unwrap();
        let near = img.get_pixel(0, 0);
        let far = img.get_pixel(7, 0);
        assert!(near[0] > far[0], "near should be redder: {near:?} vs {far:?}");
        assert!(far[2] > near[2], "far should be bluer: {near:?} vs {far:?}");
    }

    #[test]
    fn zero_error_and_saturated_error_hit_the_ramp_ends() {
        let gt = Tensor::full(&[3, 3], 10.0f32);
        let same = error_image(&gt, &gt, 0.5).unwrap();
        assert_eq!(*same.get_pixel(1, 1), heat(0.0));
        let far_off = Tensor::full(&[3, 3], 30.0f32);
        let sat = error_image(&far_off, &gt, 0.5).unwrap();
        assert_eq!(*sat.get_pixel(1, 1), heat(1.0));
    }

    #[test]
    fn mask_image_is_binary_white_on_black() {
        let m = Tensor::from_fn(&[2, 3], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let img = mask_image(&m).unwrap();
        assert_eq!(*img.get_pixel(0, 0), Rgb([255, 255, 255]));
        assert_eq!(*img.get_pixel(1, 0), Rgb([0, 0, 0]));
    }

    #[test]
    fn triptych_lays_out_three_panels_with_gaps() {
        let d = ramp(4, 6);
        let gt = ramp(4, 6);
        let m = Tensor::zeros(&[4, 6]);
        let img = eval_triptych(&d, &gt, &m, 2.0, 30.0).unwrap();
        assert_eq!(img.width(), 6 * 3 + PANEL_GAP * 2);
        assert_eq!(img.height(), 4);
        // separator column between panels keeps its fill color
        assert_eq!(*img.get_pixel(6, 0), Rgb([230, 230, 230]));
    }

    #[test]
    fn mismatched_panels_and_bad_ranges_are_rejected() {
        let a = depth_image(&ramp(2, 3), 2.0, 30.0).unwrap();
        let b = depth_image(&ramp(3, 3), 2.0, 30.0).unwrap();
        assert!(panel_row(&[a, b]).is_err());
        assert!(depth_image(&ramp(2, 3), 0.0, 30.0).is_err());
        assert!(error_image(&ramp(2, 3), &ramp(2, 4), 0.5).is_err());
    }

    #[test]
    fn png_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let img = depth_image(&ramp(4, 6), 2.0, 30.0).unwrap();
        let path = dir.path().join("depth.png");
        save_png(&path, &img).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.dimensions(), img.dimensions());
        assert_eq!(back.get_pixel(2, 2), img.get_pixel(2, 2));
    }
}
