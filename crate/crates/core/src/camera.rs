//! Weak perspective camera and the multi-hypothesis pose machinery.
//!
//! A camera is scale s, in-plane translation t (image units, y down) and a
//! unit quaternion; projection is s·(R·P)_{x,y} + t. After rotation, larger
//! z means closer to the viewer. [`CameraVars`] mirrors the camera as tape
//! tensors so projections stay differentiable in every field; the quaternion
//! is renormalized inside the graph, so gradients are valid slightly off the
//! unit manifold.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::math::*;

/// Quaternion as (w, x, y, z).
pub type Quat = [f64; 4];

pub fn quat_identity() -> Quat {
    [1.0, 0.0, 0.0, 0.0]
}

pub fn quat_from_axis_angle(axis: [f64; 3], angle: f64) -> Quat {
    let a = normalize3(axis);
    let (s, c) = (angle / 2.0).sin_cos();
    [c, a[0] * s, a[1] * s, a[2] * s]
}

pub fn quat_mul(a: Quat, b: Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_norm(q: Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize(q: Quat) -> Quat {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Accept small drift from the unit manifold (renormalizing), reject junk.
fn unit_or_error(op: &'static str, q: Quat) -> Result<Quat> {
    let drift = (quat_norm(q) - 1.0).abs();
    if drift >= 1e-4 {
        return Err(Error::Argument(format!(
            "{op}: quaternion norm drifted by {drift:.3e}, expected unit"
        )));
    }
    if drift > 1e-9 {
        log::warn!("{op}: renormalizing quaternion (drift {drift:.3e})");
    }
    Ok(quat_normalize(q))
}

/// Rotate `p` by unit quaternion `q` (sandwich product q p q⁻¹).
pub fn rotate(q: Quat, p: [f64; 3]) -> Result<[f64; 3]> {
    let q = unit_or_error("rotate", q)?;
    let u = [q[1], q[2], q[3]];
    let t = scale3(cross3(u, p), 2.0);
    Ok(add3(p, add3(scale3(t, q[0]), cross3(u, t))))
}

/// Angle between two rotations in [0, π], identifying q with −q.
pub fn geodesic_error(q1: Quat, q2: Quat) -> f64 {
    let dot: f64 = q1.iter().zip(&q2).map(|(a, b)| a * b).sum();
    2.0 * dot.abs().clamp(0.0, 1.0).acos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakPerspectiveCamera {
    pub scale: f64,
    pub translation: [f64; 2],
    pub rotation: Quat,
}

impl WeakPerspectiveCamera {
    pub fn new(scale: f64, translation: [f64; 2], rotation: Quat) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Argument(format!(
                "camera: scale must be positive, got {scale}"
            )));
        }
        Ok(Self { scale, translation, rotation: unit_or_error("camera", rotation)? })
    }

    pub fn identity() -> Self {
        Self { scale: 1.0, translation: [0.0, 0.0], rotation: quat_identity() }
    }

    pub fn rotate(&self, p: [f64; 3]) -> [f64; 3] {
        // constructor guarantees a unit quaternion
        rotate(self.rotation, p).expect("camera quaternion is unit")
    }

    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        let r = self.rotate(p);
        [
            self.scale * r[0] + self.translation[0],
            self.scale * r[1] + self.translation[1],
        ]
    }

    /// Serialization layout shared by checkpoints and CSV dumps.
    pub fn to_array(&self) -> [f64; 7] {
        let (t, q) = (self.translation, self.rotation);
        [self.scale, t[0], t[1], q[0], q[1], q[2], q[3]]
    }

    pub fn from_array(a: &[f64]) -> Result<Self> {
        if a.len() != 7 {
            return Err(Error::Argument(format!(
                "camera: expected 7 numbers (s, tx, ty, qw, qx, qy, qz), got {}",
                a.len()
            )));
        }
        Self::new(a[0], [a[1], a[2]], [a[3], a[4], a[5], a[6]])
    }
}

/// A bank of pose hypotheses with unnormalized likelihood logits.
#[derive(Debug, Clone)]
pub struct CameraHypothesisSet {
    pub cameras: Vec<WeakPerspectiveCamera>,
    pub logits: Vec<f64>,
}

impl CameraHypothesisSet {
    pub fn new(cameras: Vec<WeakPerspectiveCamera>, logits: Vec<f64>) -> Result<Self> {
        if cameras.is_empty() || cameras.len() != logits.len() {
            return Err(Error::Argument(format!(
                "hypothesis set: {} cameras, {} logits",
                cameras.len(),
                logits.len()
            )));
        }
        Ok(Self { cameras, logits })
    }

    /// `n` hypotheses at equispaced azimuths (about the vertical image axis)
    /// and a common elevation, sharing scale and translation; logits zero.
    pub fn azimuth_ring(
        n: usize,
        elevation: f64,
        scale: f64,
        translation: [f64; 2],
    ) -> Result<Self> {
        let tilt = quat_from_axis_angle([1.0, 0.0, 0.0], elevation);
        let cameras = (0..n)
            .map(|k| {
                let az = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                let spin = quat_from_axis_angle([0.0, 1.0, 0.0], az);
                WeakPerspectiveCamera::new(scale, translation, quat_mul(tilt, spin))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cameras, vec![0.0; n])
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let m = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// Softmax-weighted mean of a per-camera loss.
    pub fn expected_loss(
        &self,
        loss_of_camera: impl Fn(&WeakPerspectiveCamera) -> Result<f64>,
    ) -> Result<f64> {
        let p = self.probabilities();
        let mut acc = 0.0;
        for (i, cam) in self.cameras.iter().enumerate() {
            let l = loss_of_camera(cam)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!(
                    "expected_loss: hypothesis {i} produced a non-finite loss"
                )));
            }
            acc += p[i] * l;
        }
        Ok(acc)
    }
}

/// Tape-side expectation over hypothesis losses: softmax(logits) · losses.
/// Gradients flow into the logits and into each loss graph.
pub fn expected_loss_t(logits: &Tensor, losses: &[Tensor]) -> Result<Tensor> {
    if logits.shape().len() != 1 || logits.len() != losses.len() || losses.is_empty() {
        return Err(Error::dim(
            "expected_loss",
            format!("{} logits vs {} losses", logits.len(), losses.len()),
        ));
    }
    let mut cols = Vec::with_capacity(losses.len());
    for (i, l) in losses.iter().enumerate() {
        if l.len() != 1 {
            return Err(Error::dim(
                "expected_loss",
                format!("hypothesis {i} loss is not a scalar"),
            ));
        }
        if !l.item().is_finite() {
            return Err(Error::Numeric(format!(
                "expected_loss: hypothesis {i} produced a non-finite loss"
            )));
        }
        cols.push(l.reshape(&[1])?);
    }
    let stacked = Tensor::concat(&cols.iter().collect::<Vec<_>>())?;
    logits.softmax()?.mul(&stacked)?.sum()
}

/// Camera fields as tensors, optionally tracked on a tape.
#[derive(Debug, Clone)]
pub struct CameraVars {
    pub scale: Tensor,
    pub translation: Tensor,
    pub rotation: Tensor,
}

impl CameraVars {
    /// Tracked leaves initialized from `cam`; the optimizer treats each
    /// field as a free variable.
    pub fn tracked(tape: &Tape, cam: &WeakPerspectiveCamera) -> Result<Self> {
        Ok(Self {
            scale: tape.var(vec![cam.scale], &[1])?,
            translation: tape.var(cam.translation.to_vec(), &[2])?,
            rotation: tape.var(cam.rotation.to_vec(), &[4])?,
        })
    }

    /// Untracked constants (inference-only rendering).
    pub fn constant(cam: &WeakPerspectiveCamera) -> Self {
        Self {
            scale: Tensor::from_vec(vec![cam.scale], &[1]).unwrap(),
            translation: Tensor::from_vec(cam.translation.to_vec(), &[2]).unwrap(),
            rotation: Tensor::from_vec(cam.rotation.to_vec(), &[4]).unwrap(),
        }
    }

    pub fn to_camera(&self) -> Result<WeakPerspectiveCamera> {
        let q = self.rotation.data();
        WeakPerspectiveCamera::new(
            self.scale.item(),
            [self.translation.data()[0], self.translation.data()[1]],
            quat_normalize([q[0], q[1], q[2], q[3]]),
        )
    }

    /// Rotation matrix transpose built entrywise from the (renormalized)
    /// quaternion, as a (3,3) tensor; points rotate via P · Rᵀ.
    fn rotation_matrix_t(&self) -> Result<Tensor> {
        let q = self.rotation.div(&self.rotation.l2norm()?)?;
        let w = q.index_rows(&[0])?;
        let x = q.index_rows(&[1])?;
        let y = q.index_rows(&[2])?;
        let z = q.index_rows(&[3])?;
        let two = Tensor::scalar(2.0);
        let one = Tensor::scalar(1.0);
        let e = |t: &Tensor| -> Result<Tensor> { Ok(t.clone()) };
        let sq2 = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
            // 1 - 2(a² + b²)
            one.sub(&two.mul(&a.mul(a)?.add(&b.mul(b)?)?)?)
        };
        let pm = |a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor, sign: f64| -> Result<Tensor> {
            // 2(ab ± cd)
            two.mul(&a.mul(b)?.add(&c.mul(d)?.scale(sign)?)?)
        };
        // row-major R, then transposed by emission order
        let r00 = sq2(&y, &z)?;
        let r01 = pm(&x, &y, &w, &z, -1.0)?;
        let r02 = pm(&x, &z, &w, &y, 1.0)?;
        let r10 = pm(&x, &y, &w, &z, 1.0)?;
        let r11 = sq2(&x, &z)?;
        let r12 = pm(&y, &z, &w, &x, -1.0)?;
        let r20 = pm(&x, &z, &w, &y, -1.0)?;
        let r21 = pm(&y, &z, &w, &x, 1.0)?;
        let r22 = sq2(&x, &y)?;
        let rt = Tensor::concat(&[
            &e(&r00)?, &e(&r10)?, &e(&r20)?, &e(&r01)?, &e(&r11)?, &e(&r21)?, &e(&r02)?,
            &e(&r12)?, &e(&r22)?,
        ])?;
        rt.reshape(&[3, 3])
    }

    /// Rotate (N, 3) points into the camera frame.
    pub fn rotate_points(&self, points: &Tensor) -> Result<Tensor> {
        if points.shape().len() != 2 || points.shape()[1] != 3 {
            return Err(Error::dim(
                "rotate_points",
                format!("expected (N, 3), got {:?}", points.shape()),
            ));
        }
        points.matmul(&self.rotation_matrix_t()?)
    }

    /// Project camera-frame points: s·(x, y) + t.
    pub fn project_rotated(&self, rotated: &Tensor) -> Result<Tensor> {
        let n = rotated.shape()[0];
        let drop_z = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[3, 2])?;
        let xy = rotated.matmul(&drop_z)?;
        xy.mul(&self.scale)?
            .add(&self.translation.broadcast_to(&[n, 2])?)
    }

    /// Full weak perspective projection of (N, 3) canonical points.
    pub fn project_points(&self, points: &Tensor) -> Result<Tensor> {
        self.project_rotated(&self.rotate_points(points)?)
    }
}
