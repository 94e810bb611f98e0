//! Implicit texture flow: each surface point names the source-image pixel
//! whose color it copies, rather than carrying a color of its own.
//!
//! The flow is made mirror-symmetric by folding queries onto the canonical
//! hemisphere u_x >= 0 before the net sees them, so the color at u and at
//! its reflection come from the identical computation path and match
//! bit-for-bit. Points on the symmetry plane fold to themselves.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::shape::{check_unit_rows, LatentCode, MlpParams, MlpVars};

/// Flow net over (sphere point, texture latent), producing normalized image
/// coordinates through a final sigmoid.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TextureSpace {
    pub flow_net: MlpParams,
    pub latent_dim: usize,
}

impl TextureSpace {
    pub fn init(latent_dim: usize, hidden: usize, seed: u64) -> TextureSpace {
        TextureSpace {
            flow_net: MlpParams::init(3 + latent_dim, hidden, 2, false, seed ^ 0x74657874),
            latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flow_net.validate()?;
        if self.flow_net.input_width() != 3 + self.latent_dim {
            return Err(Error::Contract(format!(
                "texture space: flow input {} does not fit 3 + latent {}",
                self.flow_net.input_width(),
                self.latent_dim
            )));
        }
        if self.flow_net.output_width() != 2 {
            return Err(Error::Contract(format!(
                "texture space: flow output {} is not an image coordinate",
                self.flow_net.output_width()
            )));
        }
        Ok(())
    }

    pub fn tracked(&self, tape: &crate::autodiff::Tape) -> Result<TextureVars> {
        Ok(TextureVars { flow: self.flow_net.tracked(tape)?, latent_dim: self.latent_dim })
    }

    pub fn constant(&self) -> TextureVars {
        TextureVars { flow: self.flow_net.constants(), latent_dim: self.latent_dim }
    }
}

/// Graph-ready views of the flow parameters.
#[derive(Debug, Clone)]
pub struct TextureVars {
    pub flow: MlpVars,
    pub latent_dim: usize,
}

/// Fold each row onto the u_x >= 0 hemisphere. Rows with u_x = ±0 pass
/// through unflipped, so plane points have one consistent value.
fn fold_to_canonical(u: &Tensor) -> Result<Tensor> {
    let mut signs = Vec::with_capacity(u.len());
    for row in u.data().chunks(3) {
        let s = if row[0] < 0.0 { -1.0 } else { 1.0 };
        signs.extend_from_slice(&[s, 1.0, 1.0]);
    }
    let n = u.shape()[0];
    u.mul(&Tensor::from_vec(signs, &[n, 3])?)
}

/// Normalized source coordinates τ(u, z_t) ∈ (0,1)² for a (N, 3) batch.
pub fn eval_texture_flow(vars: &TextureVars, u: &Tensor, z: &LatentCode) -> Result<Tensor> {
    check_unit_rows("texture_flow", u)?;
    if z.len() != vars.latent_dim {
        return Err(Error::dim(
            "texture_flow",
            format!("latent length {} instead of {}", z.len(), vars.latent_dim),
        ));
    }
    let n = u.shape()[0];
    let folded = fold_to_canonical(u)?;
    let wide = z.reshape(&[1, vars.latent_dim])?.broadcast_to(&[n, vars.latent_dim])?;
    let x = Tensor::concat(&[&folded, &wide])?;
    vars.flow.forward(&x)?.sigmoid()
}

/// Colors at normalized coordinates xy ∈ [0,1]², bilinearly interpolated
/// between pixel centers and clamped at the image border. Differentiable in
/// both the image and the coordinates.
pub fn bilinear_sample(image: &Tensor, xy: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if !(s.len() == 3 && s[2] == 3 || s.len() == 2) {
        return Err(Error::dim(
            "bilinear_sample",
            format!("image must be (H, W, 3) or (H, W), got {s:?}"),
        ));
    }
    if xy.shape().len() != 2 || xy.shape()[1] != 2 {
        return Err(Error::dim(
            "bilinear_sample",
            format!("coordinates must be (N, 2), got {:?}", xy.shape()),
        ));
    }
    let n = xy.shape()[0];
    let to_px = Tensor::from_vec(vec![s[1] as f64, s[0] as f64], &[1, 2])?;
    let px = xy.mul(&to_px.broadcast_to(&[n, 2])?)?;
    image.bilinear_gather(&px)
}

/// The composed texture u → rgb for one image and latent, shaped for
/// `renderer::rasterize_color`.
pub fn texture_at<'a>(
    vars: &'a TextureVars,
    z: &'a LatentCode,
    image: &'a Tensor,
) -> impl Fn(&Tensor) -> Result<Tensor> + 'a {
    move |u| {
        let flow = eval_texture_flow(vars, u, z)?;
        bilinear_sample(image, &flow)
    }
}
