//! Pixel-level primitives shared by the synthetic world and the metrics:
//! color conversion, Laplacian response, box blur.
//!
//! Images are [C, H, W] tensors in [-1, 1]; HSV works on [0, 1] RGB with
//! hue in degrees [0, 360).

use crate::tensor::{pairwise_sum, Tensor};

/// Map [-1, 1] pixels to clamped [0, 1].
pub fn to_unit(v: f64) -> f64 {
    ((v + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Hexagonal-prism HSV from [0, 1] RGB. Hue is 0 for achromatic pixels.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let range = max - min;
    let v = max;
    if v <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let s = range / max;
    if range <= 0.0 {
        return (0.0, 0.0, v);
    }
    let mut h = if r >= g && r >= b {
        (g - b) / range
    } else if g >= b {
        (b - r) / range + 2.0
    } else {
        (r - g) / range + 4.0
    };
    h *= 60.0;
    if h < 0.0 {
        h += 360.0;
    }
    (h, s, v)
}

pub fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (v, v, v);
    }
    let h6 = (h_deg.rem_euclid(360.0)) / 60.0;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match h6 as usize {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Channel mean as a flat [H*W] grayscale buffer.
pub fn grayscale(img: &Tensor) -> Vec<f64> {
    let shape = img.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let block = h * w;
    let mut out = vec![0.0; block];
    for ch in 0..c {
        for i in 0..block {
            out[i] += img.data()[ch * block + i];
        }
    }
    for v in &mut out {
        *v /= c as f64;
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    // mirror without edge duplication: -1 -> 1, n -> n-2
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

/// 3x3 Laplacian [[0,1,0],[1,-4,1],[0,1,0]] with reflect padding.
pub fn laplacian_response(gray: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| gray[reflect(y, h) * w + reflect(x, w)];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            out.push(at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x));
        }
    }
    out
}

/// Population standard deviation of the Laplacian of the grayscale image.
pub fn laplacian_std(img: &Tensor) -> f64 {
    let shape = img.shape();
    let (h, w) = (shape[1], shape[2]);
    let resp = laplacian_response(&grayscale(img), h, w);
    let n = resp.len() as f64;
    let mean = pairwise_sum(&resp) / n;
    let sq: Vec<f64> = resp.iter().map(|v| (v - mean) * (v - mean)).collect();
    (pairwise_sum(&sq) / n).sqrt()
}

/// One 3x3 box-blur pass per channel, reflect padding.
pub fn box_blur3(img: &Tensor) -> Tensor {
    let shape = img.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let block = h * w;
    let mut data = Vec::with_capacity(c * block);
    for ch in 0..c {
        let plane = &img.data()[ch * block..(ch + 1) * block];
        let at = |y: isize, x: isize| plane[reflect(y, h) * w + reflect(x, w)];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        acc += at(y + dy, x + dx);
                    }
                }
                data.push(acc / 9.0);
            }
        }
    }
    Tensor::new(shape, data).expect("shape preserved")
}

/// Low-frequency content: two box-blur passes.
pub fn lowpass(img: &Tensor) -> Tensor {
    box_blur3(&box_blur3(img))
}
