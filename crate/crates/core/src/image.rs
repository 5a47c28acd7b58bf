//! Small RGB raster with the pixel operations the augmentation pipelines
//! need.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

pub const CHANNELS: usize = 3;

/// Row-major `height x width x 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * CHANNELS
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = self.idx(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = self.idx(x, y);
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(x, y, self.pixel(self.width - 1 - x, y));
            }
        }
        out
    }

    /// Shifts content by whole pixels; uncovered pixels take `fill`.
    pub fn translate(&self, dx: i64, dy: i64, fill: [f32; 3]) -> Image {
        let mut out = Image::filled(self.width, self.height, fill);
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                let (sx, sy) = (x - dx, y - dy);
                if sx >= 0 && sy >= 0 && (sx as usize) < self.width && (sy as usize) < self.height {
                    out.set_pixel(x as usize, y as usize, self.pixel(sx as usize, sy as usize));
                }
            }
        }
        out
    }

    /// Bilinear resample of a normalized window back to full size.
    pub fn crop_resize(&self, window: &BBox) -> Image {
        if *window == BBox::FULL {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        let mut out = Image::filled(w, h, [0.0; 3]);
        for y in 0..h {
            let v = (y as f64 + 0.5) / h as f64;
            let sy = (window.ymin + v * window.height()) * h as f64 - 0.5;
            let (y0, y1, fy) = bilinear_taps(sy, h);
            for x in 0..w {
                let u = (x as f64 + 0.5) / w as f64;
                let sx = (window.xmin + u * window.width()) * w as f64 - 0.5;
                let (x0, x1, fx) = bilinear_taps(sx, w);
                let (p00, p01, p10, p11) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
                let mut rgb = [0.0f32; 3];
                for c in 0..CHANNELS {
                    let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                    let bot = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                    rgb[c] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0) as f32;
                }
                out.set_pixel(x, y, rgb);
            }
        }
        out
    }

    /// Channel-wise affine colour change, clamped to `[0, 1]`.
    pub fn color_affine(&self, gain: [f32; 3], bias: [f32; 3]) -> Image {
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(CHANNELS) {
            for c in 0..CHANNELS {
                px[c] = (px[c] * gain[c] + bias[c]).clamp(0.0, 1.0);
            }
        }
        out
    }

    /// Mean over `cells x cells` blocks per channel, flattened as
    /// `[cell_row][cell_col][channel]`.
    pub fn pooled(&self, cells: usize) -> Vec<f64> {
        let mut out = vec![0.0f64; cells * cells * CHANNELS];
        for cy in 0..cells {
            let (y0, y1) = (cy * self.height / cells, (cy + 1) * self.height / cells);
            for cx in 0..cells {
                let (x0, x1) = (cx * self.width / cells, (cx + 1) * self.width / cells);
                let n = ((y1 - y0) * (x1 - x0)).max(1) as f64;
                let base = (cy * cells + cx) * CHANNELS;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let i = self.idx(x, y);
                        for c in 0..CHANNELS {
                            out[base + c] += self.data[i + c] as f64;
                        }
                    }
                }
                for c in 0..CHANNELS {
                    out[base + c] /= n;
                }
            }
        }
        out
    }
}

fn bilinear_taps(s: f64, n: usize) -> (usize, usize, f64) {
    let s = s.clamp(0.0, (n - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}
