//! Aspect-preserving resize onto a square gray canvas.

use super::data::Image;
use crate::objective::BoxXyxy;

/// Gray level of the padding, in `[0, 1]`.
pub const PAD_VALUE: f32 = 114.0 / 255.0;

/// Maps source-image coordinates to canvas coordinates:
/// `canvas = source * scale + pad`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub src_width: usize,
    pub src_height: usize,
}

impl LetterboxTransform {
    pub fn new(src_width: usize, src_height: usize, target: usize) -> Self {
        let scale = (target as f64 / src_width as f64).min(target as f64 / src_height as f64);
        let (w, h) = resized(src_width, src_height, scale);
        Self {
            scale,
            pad_x: ((target - w) / 2) as f64,
            pad_y: ((target - h) / 2) as f64,
            src_width,
            src_height,
        }
    }

    pub fn forward(&self, b: &BoxXyxy) -> BoxXyxy {
        [
            b[0] * self.scale + self.pad_x,
            b[1] * self.scale + self.pad_y,
            b[2] * self.scale + self.pad_x,
            b[3] * self.scale + self.pad_y,
        ]
    }

    pub fn inverse(&self, b: &BoxXyxy) -> BoxXyxy {
        [
            (b[0] - self.pad_x) / self.scale,
            (b[1] - self.pad_y) / self.scale,
            (b[2] - self.pad_x) / self.scale,
            (b[3] - self.pad_y) / self.scale,
        ]
    }

    /// Inverse mapping clipped to the source image.
    pub fn inverse_clipped(&self, b: &BoxXyxy) -> BoxXyxy {
        let r = self.inverse(b);
        let (w, h) = (self.src_width as f64, self.src_height as f64);
        [r[0].clamp(0.0, w), r[1].clamp(0.0, h), r[2].clamp(0.0, w), r[3].clamp(0.0, h)]
    }
}

fn resized(w: usize, h: usize, scale: f64) -> (usize, usize) {
    let r = |v: usize| ((v as f64 * scale).round() as usize).max(1);
    (r(w), r(h))
}

/// Resizes (bilinear, half-pixel centers) and pads symmetrically to a
/// `target x target` planar `[3, target, target]` buffer in `[0, 1]`.
pub fn letterbox(img: &Image, target: usize) -> (Vec<f32>, LetterboxTransform) {
    let tf = LetterboxTransform::new(img.width, img.height, target);
    let (w, h) = resized(img.width, img.height, tf.scale);
    let hw = target * target;
    let mut out = vec![PAD_VALUE; 3 * hw];
    let (px, py) = (tf.pad_x as usize, tf.pad_y as usize);
    let identity = w == img.width && h == img.height;
    let sx = img.width as f64 / w as f64;
    let sy = img.height as f64 / h as f64;
    for y in 0..h {
        for x in 0..w {
            let rgb = if identity {
                img.get(x, y).map(|v| v as f32 / 255.0)
            } else {
                bilinear(img, (x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5)
            };
            let p = (y + py) * target + x + px;
            for c in 0..3 {
                out[c * hw + p] = rgb[c];
            }
        }
    }
    (out, tf)
}

fn bilinear(img: &Image, fx: f64, fy: f64) -> [f32; 3] {
    let cx = |v: f64| v.clamp(0.0, (img.width - 1) as f64);
    let cy = |v: f64| v.clamp(0.0, (img.height - 1) as f64);
    let (fx, fy) = (cx(fx), cy(fy));
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    let mut out = [0.0f32; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let v = |x: usize, y: usize| img.get(x, y)[c] as f64 / 255.0;
        let top = v(x0, y0) * (1.0 - ax) + v(x1, y0) * ax;
        let bot = v(x0, y1) * (1.0 - ax) + v(x1, y1) * ax;
        *o = (top * (1.0 - ay) + bot * ay) as f32;
    }
    out
}
