//! Per-image pixel-to-surface maps: a coarse optimizable grid of directions,
//! bilinearly interpolated to any pixel and renormalized onto the sphere.
//! One map belongs to one image; it stands in for a learned predictor while
//! keeping the cycle-consistency loss structure intact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::sample_sphere;

/// Coarse grid of unnormalized 3-vectors, row-major (H_c, W_c, 3).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PixelSurfaceMap {
    pub grid: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl PixelSurfaceMap {
    /// Random unit directions, deterministic per seed.
    pub fn init(height: usize, width: usize, seed: u64) -> Result<PixelSurfaceMap> {
        if height < 4 || width < 4 {
            return Err(Error::Argument(format!(
                "surface map: grid {height}x{width} below 4x4"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70697853);
        let grid = sample_sphere(height * width, &mut rng)
            .into_iter()
            .flatten()
            .collect();
        Ok(PixelSurfaceMap { grid, height, width })
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.len() != self.height * self.width * 3 {
            return Err(Error::dim(
                "surface map",
                format!(
                    "{} entries for a {}x{} grid",
                    self.grid.len(),
                    self.height,
                    self.width
                ),
            ));
        }
        if self.grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("surface map has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn tracked(&self, tape: &Tape) -> Result<Tensor> {
        self.validate()?;
        tape.var(self.grid.clone(), &[self.height, self.width, 3])
    }

    pub fn constant(&self) -> Tensor {
        Tensor::from_vec(self.grid.clone(), &[self.height, self.width, 3])
            .expect("grid length matches its dimensions")
    }

    /// The optimizable buffer, in the layout `tracked` exposes.
    pub fn buffer_mut(&mut self) -> &mut Vec<f64> {
        &mut self.grid
    }

    /// 8-bit false-color rendering, direction (u+1)/2 → RGB, for inspection.
    pub fn false_color(&self) -> Vec<u8> {
        self.grid
            .chunks(3)
            .flat_map(|v| {
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                [0, 1, 2].map(|k| (((v[k] / n + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8)
            })
            .collect()
    }
}

/// C[p]: unit surface direction for each query pixel. `pixels` is (N, 2)
/// image coordinates (x right, y down) on an `image_h` x `image_w` canvas;
/// the grid stretches over the full image. Differentiable in the grid.
pub fn sample_map(
    grid: &Tensor,
    pixels: &Tensor,
    image_h: usize,
    image_w: usize,
) -> Result<Tensor> {
    let gs = grid.shape();
    if gs.len() != 3 || gs[2] != 3 {
        return Err(Error::dim(
            "sample_map",
            format!("grid must be (H_c, W_c, 3), got {gs:?}"),
        ));
    }
    if pixels.shape().len() != 2 || pixels.shape()[1] != 2 {
        return Err(Error::dim(
            "sample_map",
            format!("pixels must be (N, 2), got {:?}", pixels.shape()),
        ));
    }
    if image_h == 0 || image_w == 0 {
        return Err(Error::Argument("sample_map: empty image".into()));
    }
    let n = pixels.shape()[0];
    // image pixel coordinates → grid pixel coordinates
    let to_grid = Tensor::from_vec(
        vec![gs[1] as f64 / image_w as f64, gs[0] as f64 / image_h as f64],
        &[1, 2],
    )?;
    let gp = pixels.mul(&to_grid.broadcast_to(&[n, 2])?)?;
    let raw = grid.bilinear_gather(&gp)?;
    let norms = raw.l2norm_rows()?;
    for (i, &v) in norms.data().iter().enumerate() {
        if v < 1e-8 {
            return Err(Error::Numeric(format!(
                "sample_map: interpolated direction {i} has norm {v:.3e}"
            )));
        }
    }
    let wide = norms.reshape(&[n, 1])?.broadcast_to(&[n, 3])?;
    raw.div(&wide)
}
