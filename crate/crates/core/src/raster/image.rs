//! Diagnostic PNG rendering of a map with a fixed viridis-like ramp.

use std::io::Write;

use super::Grid;
use crate::scalar::Real;

const RAMP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

fn ramp(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for k in 0..3 {
        out[k] = (RAMP[i][k] + f * (RAMP[i + 1][k] - RAMP[i][k])).round() as u8;
    }
    out
}

/// Encodes `grid` as an RGB PNG normalized to its own min/max (row 0 on top).
pub fn write_png<T: Real, W: Write>(grid: &Grid<T>, w: W) -> Result<(), png::EncodingError> {
    let (lo, hi) = (grid.min().as_f64(), grid.max().as_f64());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut enc = png::Encoder::new(w, grid.width() as u32, grid.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    let mut pixels = Vec::with_capacity(grid.width() * grid.height() * 3);
    for &v in grid.data() {
        pixels.extend_from_slice(&ramp((v.as_f64() - lo) / span));
    }
    writer.write_image_data(&pixels)?;
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_header_and_ramp_ends() {
        let g = Grid::from_fn(4, 5, |r, c| (r + c) as f64);
        let mut buf = Vec::new();
        write_png(&g, &mut buf).unwrap();
        assert_eq!(&buf[1..4], b"PNG");
        assert_eq!(ramp(0.0), [68, 1, 84]);
        assert_eq!(ramp(1.0), [253, 231, 37]);
    }
}
