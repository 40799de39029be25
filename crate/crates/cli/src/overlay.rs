//! Binary PPM overlays: the scene upscaled, with a 3×3 cross on each true
//! (green) and predicted (red) object centre.

use std::path::Path;

use anyhow::{Context, Result};
use compdiff::ImageShape;

const TRUTH: [u8; 3] = [0, 220, 0];
const PREDICTED: [u8; 3] = [255, 0, 0];

/// Nearest pixel (row, column) to a unit-square coordinate.
fn pixel(shape: ImageShape, (cx, cy): (f64, f64)) -> (usize, usize) {
    let idx = |c: f64, n: usize| ((c * n as f64).floor().max(0.0) as usize).min(n - 1);
    (idx(cy, shape.height), idx(cx, shape.width))
}

pub fn render(image: &[f32], shape: ImageShape, truth: &[(f64, f64)], predicted: &[(f64, f64)]) -> Vec<[u8; 3]> {
    let c = shape.channels;
    let mut rgb: Vec<[u8; 3]> = (0..shape.pixels())
        .map(|p| {
            let px = &image[p * c..(p + 1) * c];
            let level = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            if c >= 3 {
                [level(px[0]), level(px[1]), level(px[2])]
            } else {
                [level(px[0]); 3]
            }
        })
        .collect();
    // Predictions last so they stay visible where the marks overlap.
    for (points, colour) in [(truth, TRUTH), (predicted, PREDICTED)] {
        for &pt in points {
            let (i, j) = pixel(shape, pt);
            for (di, dj) in [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (y, x) = (i as i64 + di, j as i64 + dj);
                if y >= 0 && x >= 0 && (y as usize) < shape.height && (x as usize) < shape.width {
                    rgb[y as usize * shape.width + x as usize] = colour;
                }
            }
        }
    }
    rgb
}

pub fn write_ppm(path: &Path, rgb: &[[u8; 3]], shape: ImageShape, scale: usize) -> Result<()> {
    let (h, w) = (shape.height * scale, shape.width * scale);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            bytes.extend_from_slice(&rgb[(y / scale) * shape.width + x / scale]);
        }
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
