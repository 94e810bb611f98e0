//! Exact Euclidean distance transforms and mask boundary extraction.
//!
//! Distances are measured between pixel centers, so a pixel adjacent to a
//! foreground pixel is at distance exactly 1. The two-pass lower-envelope
//! transform is exact here: all squared distances are integers below 2^53,
//! and parabola intersections computed in f64 can only be misordered where
//! the competing parabolas agree anyway.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const INF: f64 = 1e18;

/// Distance in pixels from every pixel center to the nearest foreground
/// pixel center. Zero on the foreground itself.
#[derive(Debug, Clone)]
pub struct DistanceField {
    pub height: usize,
    pub width: usize,
    /// Euclidean distances, row-major
    pub values: Vec<f64>,
    squared: Vec<f64>,
}

impl DistanceField {
    /// Squared distances; exact integers.
    pub fn squared(&self) -> &[f64] {
        &self.squared
    }

    /// Bilinear sample at continuous screen coordinates (x right, y down),
    /// pixel (row, col) centered at (col + 0.5, row + 0.5). Clamped at the
    /// border.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = (fx.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (fy.floor() as usize).min(self.height.saturating_sub(2));
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (dx, dy) = (fx - x0 as f64, fy - y0 as f64);
        let v00 = self.values[y0 * self.width + x0];
        let v01 = self.values[y0 * self.width + x1];
        let v10 = self.values[y1 * self.width + x0];
        let v11 = self.values[y1 * self.width + x1];
        (1.0 - dy) * ((1.0 - dx) * v00 + dx * v01) + dy * ((1.0 - dx) * v10 + dx * v11)
    }

    /// The field as an (H, W) constant tensor, for bilinear gathers on tape.
    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_vec(self.values.clone(), &[self.height, self.width])
            .expect("field dimensions are consistent")
    }
}

/// 1D squared-distance transform (lower envelope of parabolas).
fn dt1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        if f[q] >= INF {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                if k == 0 {
                    // q's parabola dominates everything so far
                    v[0] = q;
                    z[0] = -INF;
                    z[1] = INF;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = INF;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
    }
}

/// Exact Euclidean distance field of a binary mask. Errors when the mask has
/// no foreground at all, since "distance to the foreground" is undefined.
pub fn distance_field(mask: &[bool], height: usize, width: usize) -> Result<DistanceField> {
    if mask.len() != height * width {
        return Err(Error::dim(
            "distance_field",
            format!("{} mask bits for {height}x{width}", mask.len()),
        ));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Geometry(
            "distance field of an all-background mask".into(),
        ));
    }
    // pass 1: per column, squared distance along the column
    let mut g = vec![INF; height * width];
    for col in 0..width {
        let f: Vec<f64> = (0..height)
            .map(|row| if mask[row * width + col] { 0.0 } else { INF })
            .collect();
        let mut d = vec![0.0; height];
        let mut v = vec![0usize; height];
        let mut z = vec![0.0; height + 1];
        if f.iter().any(|&x| x < INF) {
            dt1d(&f, &mut d, &mut v, &mut z);
        } else {
            d.copy_from_slice(&f);
        }
        for row in 0..height {
            g[row * width + col] = d[row];
        }
    }
    // pass 2: per row, envelope over columns
    let mut squared = vec![0.0; height * width];
    let mut d = vec![0.0; width];
    let mut v = vec![0usize; width];
    let mut z = vec![0.0; width + 1];
    for row in 0..height {
        let f = &g[row * width..(row + 1) * width];
        dt1d(f, &mut d, &mut v, &mut z);
        squared[row * width..(row + 1) * width].copy_from_slice(&d);
    }
    let values = squared.iter().map(|&s| s.sqrt()).collect();
    Ok(DistanceField { height, width, values, squared })
}

/// Centers of foreground pixels that touch the background through a
/// 4-neighbor, with the image border counting as background.
pub fn boundary_pixels(mask: &[bool], height: usize, width: usize) -> Result<Vec<[f64; 2]>> {
    if mask.len() != height * width {
        return Err(Error::dim(
            "boundary_pixels",
            format!("{} mask bits for {height}x{width}", mask.len()),
        ));
    }
    let mut out = Vec::new();
    for row in 0..height {
        for col in 0..width {
            if !mask[row * width + col] {
                continue;
            }
            let exposed = row == 0
                || col == 0
                || row == height - 1
                || col == width - 1
                || !mask[(row - 1) * width + col]
                || !mask[(row + 1) * width + col]
                || !mask[row * width + col - 1]
                || !mask[row * width + col + 1];
            if exposed {
                out.push([col as f64 + 0.5, row as f64 + 0.5]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_squared(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
        let fg: Vec<(i64, i64)> = (0..h * w)
            .filter(|&p| mask[p])
            .map(|p| ((p / w) as i64, (p % w) as i64))
            .collect();
        (0..h * w)
            .map(|p| {
                let (r, c) = ((p / w) as i64, (p % w) as i64);
                fg.iter()
                    .map(|&(fr, fc)| ((r - fr).pow(2) + (c - fc).pow(2)) as f64)
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_exactly_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x45dd);
        for trial in 0..20 {
            let (h, w) = (16, 16);
            let density = 0.02 + 0.3 * (trial as f64 / 20.0);
            let mut mask: Vec<bool> = (0..h * w).map(|_| rng.random::<f64>() < density).collect();
            if !mask.iter().any(|&m| m) {
                mask[rng.random_range(0..h * w)] = true;
            }
            let field = distance_field(&mask, h, w).unwrap();
            let brute = brute_force_squared(&mask, h, w);
            for p in 0..h * w {
                assert_eq!(
                    field.squared()[p],
                    brute[p],
                    "trial {trial}, pixel ({}, {})",
                    p / w,
                    p % w
                );
            }
        }
    }

    #[test]
    fn single_foreground_pixel() {
        let (h, w) = (9, 9);
        let mut mask = vec![false; h * w];
        mask[4 * w + 4] = true;
        let field = distance_field(&mask, h, w).unwrap();
        assert_eq!(field.values[4 * w + 4], 0.0);
        assert_eq!(field.values[4 * w + 5], 1.0);
        assert_eq!(field.squared()[0], 32.0);
    }

    #[test]
    fn all_background_is_an_error() {
        let err = distance_field(&vec![false; 64], 8, 8).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }

    #[test]
    fn bilinear_sampling_interpolates_between_centers() {
        let (h, w) = (8, 8);
        let mut mask = vec![false; h * w];
        mask[3 * w + 2] = true;
        let field = distance_field(&mask, h, w).unwrap();
        // at the center of the fg pixel the distance is zero
        assert_eq!(field.sample(2.5, 3.5), 0.0);
        // halfway toward the next center, linear blend of 0 and 1
        assert!((field.sample(3.0, 3.5) - 0.5).abs() < 1e-12);
        // clamping beyond the border reproduces the corner value
        assert_eq!(field.sample(-5.0, -5.0), field.values[0]);
    }

    #[test]
    fn boundary_of_a_filled_rectangle_is_its_ring() {
        let (h, w) = (8, 10);
        let mut mask = vec![false; h * w];
        for row in 2..6 {
            for col in 3..8 {
                mask[row * w + col] = true;
            }
        }
        let boundary = boundary_pixels(&mask, h, w).unwrap();
        // 4x5 block minus its 2x3 interior
        assert_eq!(boundary.len(), 14);
        for b in &boundary {
            let (col, row) = (b[0] - 0.5, b[1] - 0.5);
            assert!(mask[(row as usize) * w + col as usize]);
        }
        // interior pixel (row 3..5, col 4..7) is not listed
        assert!(!boundary.contains(&[4.5, 3.5]));
    }

    #[test]
    fn full_mask_boundary_hugs_the_border() {
        let (h, w) = (6, 6);
        let mask = vec![true; h * w];
        let boundary = boundary_pixels(&mask, h, w).unwrap();
        assert_eq!(boundary.len(), 20);
        for b in &boundary {
            let (col, row) = ((b[0] - 0.5) as usize, (b[1] - 0.5) as usize);
            assert!(row == 0 || row == 5 || col == 0 || col == 5);
        }
    }

    #[test]
    fn single_pixel_mask_is_its_own_boundary() {
        let mut mask = vec![false; 64];
        mask[3 * 8 + 5] = true;
        let boundary = boundary_pixels(&mask, 8, 8).unwrap();
        assert_eq!(boundary, vec![[5.5, 3.5]]);
    }

    #[test]
    fn distances_grow_away_from_a_disc() {
        let (h, w) = (32, 32);
        let mask: Vec<bool> = (0..h * w)
            .map(|p| {
                let (r, c) = ((p / w) as f64, (p % w) as f64);
                (r - 15.5).powi(2) + (c - 15.5).powi(2) <= 36.0
            })
            .collect();
        let field = distance_field(&mask, h, w).unwrap();
        // ring at radius ~10 sits ~4px from the disc of radius 6
        let v = field.sample(15.5 + 10.0 + 0.5, 16.0);
        assert!((3.0..5.5).contains(&v), "distance {v}");
        // corners are the farthest points
        let corner = field.values[0];
        assert!(field.values.iter().all(|&d| d <= corner));
    }
}
