//! Pixel-level primitives shared by augmentation and evaluation.

use ndarray::Array3;

use crate::nn::Im;

/// Bilinear resample of an (H, W, C) image to (out_h, out_w, C).
/// Identity when the sizes already match (exact copy, no resampling error).
pub fn resize_bilinear(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = img.dim();
    if h == out_h && w == out_w {
        return img.clone();
    }
    let mut out = Array3::<f64>::zeros((out_h, out_w, c));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let v00 = img[[y0, x0, ch]];
                let v01 = img[[y0, x1, ch]];
                let v10 = img[[y1, x0, ch]];
                let v11 = img[[y1, x1, ch]];
                out[[oy, ox, ch]] = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
            }
        }
    }
    out
}

/// Stacks (H, W, C) images into a (B, C, S, S) batch tensor, resizing each
/// to `size` on the way (the deterministic evaluation path).
pub fn stack_images(images: &[&Array3<f64>], size: usize) -> Im {
    let b = images.len();
    let c = images.first().map(|im| im.dim().2).unwrap_or(3);
    let mut out = Im::zeros((b, c, size, size));
    for (bi, img) in images.iter().enumerate() {
        let resized = resize_bilinear(img, size, size);
        for y in 0..size {
            for x in 0..size {
                for ch in 0..c {
                    out[[bi, ch, y, x]] = resized[[y, x, ch]];
                }
            }
        }
    }
    out
}

pub fn clamp01(img: &mut Array3<f64>) {
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

pub fn hflip(img: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| img[[y, w - 1 - x, ch]])
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn pixel_luma(img: &Array3<f64>, y: usize, x: usize) -> f64 {
    LUMA[0] * img[[y, x, 0]] + LUMA[1] * img[[y, x, 1]] + LUMA[2] * img[[y, x, 2]]
}

pub fn adjust_brightness(img: &mut Array3<f64>, factor: f64) {
    img.mapv_inplace(|v| v * factor);
    clamp01(img);
}

pub fn adjust_contrast(img: &mut Array3<f64>, factor: f64) {
    let (h, w, _) = img.dim();
    let mut mean = 0.0;
    for y in 0..h {
        for x in 0..w {
            mean += pixel_luma(img, y, x);
        }
    }
    mean /= (h * w) as f64;
    img.mapv_inplace(|v| (v - mean) * factor + mean);
    clamp01(img);
}

pub fn adjust_saturation(img: &mut Array3<f64>, factor: f64) {
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let l = pixel_luma(img, y, x);
            for ch in 0..3 {
                img[[y, x, ch]] = (img[[y, x, ch]] - l) * factor + l;
            }
        }
    }
    clamp01(img);
}

/// 3×3 binomial blur with edge clamping.
pub fn blur3(img: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let k = [0.25, 0.5, 0.25];
    let mut tmp = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sx = (x + i).saturating_sub(1).min(w - 1);
                    acc += kv * img[[y, sx, ch]];
                }
                tmp[[y, x, ch]] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sy = (y + i).saturating_sub(1).min(h - 1);
                    acc += kv * tmp[[sy, x, ch]];
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    out
}

pub fn to_grayscale(img: &mut Array3<f64>) {
    let (h, w, _) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let l = pixel_luma(img, y, x);
            for ch in 0..3 {
                img[[y, x, ch]] = l;
            }
        }
    }
}

/// HSV (h in turns, s, v in [0,1]) to RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_same_size_is_exact_copy() {
        let img = Array3::from_shape_fn((5, 7, 3), |(y, x, c)| (y * 21 + x * 3 + c) as f64 / 100.0);
        let out = resize_bilinear(&img, 5, 7);
        for (a, b) in img.iter().zip(out.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let img = Array3::from_elem((8, 8, 3), 0.4);
        let out = resize_bilinear(&img, 5, 13);
        assert!(out.iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn hflip_mirrors_columns() {
        let img = Array3::from_shape_fn((2, 3, 1), |(y, x, _)| (y * 3 + x) as f64);
        let flipped = hflip(&img);
        assert_eq!(flipped[[0, 0, 0]], 2.0);
        assert_eq!(flipped[[0, 2, 0]], 0.0);
    }

    #[test]
    fn hsv_primaries() {
        let red = hsv_to_rgb(0.0, 1.0, 1.0);
        assert_eq!(red, [1.0, 0.0, 0.0]);
        let green = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((green[1] - 1.0).abs() < 1e-12 && green[0] < 1e-12);
    }
}
