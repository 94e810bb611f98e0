//! The category shape space: mean surface, latent-conditioned deformation,
//! structural mirror symmetry, and mesh extraction.
//!
//! A surface point for sphere coordinate u and latent z is
//! φ(u, z) = φ̄(u) + δ(u, z), where both the mean net and the deformation
//! net are wrapped in the symmetrization f(u) ↦ (f(u) + R f(R u)) / 2 with
//! R the reflection across the X = 0 plane. The construction makes symmetry
//! exact in floating point, not just approximate.

pub mod hungarian;
pub mod template;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{SphereAtlas, TriMesh};

/// Latent codes are ordinary tensors of length `latent_dim`.
pub type LatentCode = Tensor;

/// One dense layer, weights in (input, output) layout.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Linear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_w: usize,
    pub out_w: usize,
}

/// A 4-layer feedforward net with tanh hidden activations.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
}

impl MlpParams {
    /// Xavier-uniform init; `zero_head` zeroes the final layer so the net
    /// starts as the constant 0 function.
    pub fn init(input: usize, hidden: usize, output: usize, zero_head: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [input, hidden, hidden, hidden, output];
        let layers = (0..4)
            .map(|l| {
                let (i, o) = (dims[l], dims[l + 1]);
                let a = (6.0 / (i + o) as f64).sqrt();
                let w = if zero_head && l == 3 {
                    vec![0.0; i * o]
                } else {
                    (0..i * o).map(|_| rng.random_range(-a..a)).collect()
                };
                Linear { w, b: vec![0.0; o], in_w: i, out_w: o }
            })
            .collect();
        MlpParams { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_w
    }

    pub fn output_width(&self) -> usize {
        self.layers[3].out_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != 4 {
            return Err(Error::Contract(format!(
                "mlp: expected 4 layers, found {}",
                self.layers.len()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.w.len() != layer.in_w * layer.out_w || layer.b.len() != layer.out_w {
                return Err(Error::Contract(format!("mlp: layer {l} extents are inconsistent")));
            }
            if l > 0 && self.layers[l - 1].out_w != layer.in_w {
                return Err(Error::Contract(format!(
                    "mlp: layer {l} input {} does not chain from {}",
                    layer.in_w,
                    self.layers[l - 1].out_w
                )));
            }
            if layer.w.iter().chain(&layer.b).any(|p| !p.is_finite()) {
                return Err(Error::Numeric(format!("mlp: layer {l} has non-finite parameters")));
            }
        }
        Ok(())
    }

    /// Tracked tensor views of every parameter buffer, in optimizer order
    /// (layer 0 weights, layer 0 bias, layer 1 weights, ...).
    pub fn tracked(&self, tape: &Tape) -> Result<MlpVars> {
        self.vars(Some(tape))
    }

    pub fn constants(&self) -> MlpVars {
        self.vars(None).expect("constant views cannot fail")
    }

    fn vars(&self, tape: Option<&Tape>) -> Result<MlpVars> {
        let mut weights = Vec::with_capacity(4);
        let mut biases = Vec::with_capacity(4);
        for layer in &self.layers {
            let ws = [layer.in_w, layer.out_w];
            let bs = [layer.out_w];
            match tape {
                Some(t) => {
                    weights.push(t.var(layer.w.clone(), &ws)?);
                    biases.push(t.var(layer.b.clone(), &bs)?);
                }
                None => {
                    weights.push(Tensor::from_vec(layer.w.clone(), &ws)?);
                    biases.push(Tensor::from_vec(layer.b.clone(), &bs)?);
                }
            }
        }
        Ok(MlpVars { weights, biases })
    }

    /// Mutable buffers in the same order `tracked` emits vars.
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(8);
        for layer in &mut self.layers {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out
    }
}

/// Tensor views of an MLP's parameters, ready to evaluate inside a graph.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl MlpVars {
    /// Parameter tensors in optimizer order (w0, b0, w1, b1, ...).
    pub fn all(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Forward pass over a (N, input) batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let expected = self.weights[0].shape()[0];
        if x.shape().len() != 2 || x.shape()[1] != expected {
            return Err(Error::dim(
                "mlp",
                format!("input {:?}, expected (N, {})", x.shape(), expected),
            ));
        }
        let n = x.shape()[0];
        let mut h = x.clone();
        for l in 0..self.weights.len() {
            let wide = self.biases[l].broadcast_to(&[n, self.biases[l].len()])?;
            h = h.matmul(&self.weights[l])?.add(&wide)?;
            if l + 1 < self.weights.len() {
                h = h.tanh()?;
            }
        }
        Ok(h)
    }
}

/// Mean net + deformation net + latent dimensionality.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ShapeSpace {
    pub mean_net: MlpParams,
    pub deform_net: MlpParams,
    pub latent_dim: usize,
}

impl ShapeSpace {
    /// Fresh space: random mean net, deformation net with a zeroed output
    /// head so every instance starts exactly at the mean shape.
    pub fn init(latent_dim: usize, hidden: usize, seed: u64) -> ShapeSpace {
        ShapeSpace {
            mean_net: MlpParams::init(3, hidden, 3, false, seed ^ 0x6d65616e),
            deform_net: MlpParams::init(3 + latent_dim, hidden, 3, true, seed ^ 0x6465666f),
            latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mean_net.validate()?;
        self.deform_net.validate()?;
        if self.mean_net.input_width() != 3
            || self.deform_net.input_width() != 3 + self.latent_dim
            || self.mean_net.output_width() != 3
            || self.deform_net.output_width() != 3
        {
            return Err(Error::Contract(format!(
                "shape space: net widths do not match latent_dim {}",
                self.latent_dim
            )));
        }
        Ok(())
    }
}

/// Evaluation-side view of a [`ShapeSpace`]: each net independently tracked
/// or constant, so deformation training can be gated while the mean trains.
#[derive(Debug, Clone)]
pub struct ShapeVars {
    pub mean: MlpVars,
    pub deform: MlpVars,
    pub latent_dim: usize,
}

impl ShapeVars {
    pub fn tracked(tape: &Tape, space: &ShapeSpace) -> Result<ShapeVars> {
        Ok(ShapeVars {
            mean: space.mean_net.tracked(tape)?,
            deform: space.deform_net.tracked(tape)?,
            latent_dim: space.latent_dim,
        })
    }

    pub fn constant(space: &ShapeSpace) -> ShapeVars {
        ShapeVars {
            mean: space.mean_net.constants(),
            deform: space.deform_net.constants(),
            latent_dim: space.latent_dim,
        }
    }
}

pub(crate) fn check_unit_rows(op: &'static str, u: &Tensor) -> Result<()> {
    if u.shape().len() != 2 || u.shape()[1] != 3 {
        return Err(Error::dim(
            op,
            format!("sphere points must be (N, 3), got {:?}", u.shape()),
        ));
    }
    for (i, row) in u.data().chunks(3).enumerate() {
        let n2 = row[0] * row[0] + row[1] * row[1] + row[2] * row[2];
        if (n2.sqrt() - 1.0).abs() > 1e-6 {
            return Err(Error::Argument(format!(
                "{op}: row {i} is not on the unit sphere (norm {})",
                n2.sqrt()
            )));
        }
    }
    Ok(())
}

/// x-negating mask as a broadcast-ready constant.
fn flip_mask(n: usize) -> Result<Tensor> {
    Tensor::from_vec(vec![-1.0, 1.0, 1.0], &[3])?.broadcast_to(&[n, 3])
}

/// (f(U) + R f(R U)) / 2 for a net evaluated on (N, 3(+d)) inputs.
/// `eval` maps sphere points to the raw net output.
fn symmetrize(
    u: &Tensor,
    eval: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let n = u.shape()[0];
    let flip = flip_mask(n)?;
    let direct = eval(u)?;
    let mirrored = eval(&u.mul(&flip)?)?.mul(&flip)?;
    direct.add(&mirrored)?.scale(0.5)
}

/// Symmetrized mean surface φ̄ at a (N, 3) batch of unit sphere points.
pub fn eval_mean(vars: &ShapeVars, u: &Tensor) -> Result<Tensor> {
    check_unit_rows("eval_mean", u)?;
    symmetrize(u, |pts| vars.mean.forward(pts))
}

/// Symmetrized deformation δ at a (N, 3) batch for one latent code.
pub fn eval_deform(vars: &ShapeVars, u: &Tensor, z: &LatentCode) -> Result<Tensor> {
    check_unit_rows("eval_deform", u)?;
    if z.len() != vars.latent_dim {
        return Err(Error::Argument(format!(
            "eval_deform: latent length {} != {}",
            z.len(),
            vars.latent_dim
        )));
    }
    let n = u.shape()[0];
    let d = z.len();
    let z_rows = z.reshape(&[1, d])?.broadcast_to(&[n, d])?;
    symmetrize(u, |pts| {
        let inp = Tensor::concat(&[pts, &z_rows])?;
        vars.deform.forward(&inp)
    })
}

/// φ(u, z) = φ̄(u) + δ(u, z) over a batch.
pub fn eval_shape(vars: &ShapeVars, u: &Tensor, z: &LatentCode) -> Result<Tensor> {
    eval_mean(vars, u)?.add(&eval_deform(vars, u, z)?)
}

/// Sample the surface at every atlas vertex into an explicit mesh.
pub fn extract_mesh(space: &ShapeSpace, z: &[f64], atlas: &SphereAtlas) -> Result<TriMesh> {
    let vars = ShapeVars::constant(space);
    let u = Tensor::from_rows(atlas.samples());
    let zt = Tensor::from_vec(z.to_vec(), &[z.len()])?;
    let verts = eval_shape(&vars, &u, &zt)?;
    let vertices = verts
        .data()
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    TriMesh::new(vertices, atlas.faces().to_vec(), atlas.samples().to_vec())
}
