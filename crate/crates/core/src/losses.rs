//! Training objectives: silhouette, boundary, cycle consistency, keypoint
//! reprojection, edge-length rigidity, texture reconstruction, and the
//! foreground-sampling penalty, plus their weighted total.
//!
//! Every loss is a mean rather than a sum, so the weights below do not have
//! to be retuned when the image resolution or sample counts change. All of
//! them are nonnegative and vanish exactly at their perfect-fit condition.

use crate::autodiff::Tensor;
use crate::camera::CameraVars;
use crate::error::{Error, Result};
use crate::geometry::SphereAtlas;
use crate::renderer::field::DistanceField;
use crate::shape::{self, LatentCode, ShapeVars};
use crate::surface_map::sample_map;
use crate::texture::{self, TextureVars};

/// Temperature (in pixels) of the soft minimum in [`loss_boundary`]. The
/// soft form is what gradients see; [`hard_boundary_gap`] is the metric.
pub const SOFTMIN_BETA: f64 = 1.0;

/// How many surface points to draw (fresh each iteration) for the boundary
/// term's point set.
pub const BOUNDARY_POINT_COUNT: usize = 500;

/// Per-term weights of the total objective. The keypoint weight only
/// matters when keypoint annotations exist; [`LossWeights::without_keypoints`]
/// switches that term off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_mask: f64,
    pub w_boundary: f64,
    pub w_gcc: f64,
    pub w_kp: f64,
    pub w_rigid: f64,
    pub w_tex: f64,
    pub w_texfg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_mask: 1.0,
            w_boundary: 0.5,
            w_gcc: 0.1,
            w_kp: 1.0,
            w_rigid: 0.25,
            w_tex: 0.5,
            w_texfg: 0.1,
        }
    }
}

impl LossWeights {
    pub fn without_keypoints() -> Self {
        LossWeights { w_kp: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Argument(format!("loss weight {name} = {w} (want finite, >= 0)")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("w_mask", self.w_mask),
            ("w_boundary", self.w_boundary),
            ("w_gcc", self.w_gcc),
            ("w_kp", self.w_kp),
            ("w_rigid", self.w_rigid),
            ("w_tex", self.w_tex),
            ("w_texfg", self.w_texfg),
        ]
    }
}

/// A set of annotated keypoints: each has a fixed location on the template
/// sphere and, per image, an observed pixel position plus a visibility flag.
#[derive(Debug, Clone)]
pub struct KeypointSet {
    /// Unit directions on the template sphere, one per keypoint.
    pub canonical: Vec<[f64; 3]>,
    /// Observed pixel positions; meaningful only where `visible`.
    pub observed: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl KeypointSet {
    /// Structural checks plus image-bounds checks for the visible points.
    pub fn validate(&self, image_h: usize, image_w: usize) -> Result<()> {
        if self.observed.len() != self.canonical.len() || self.visible.len() != self.canonical.len() {
            return Err(Error::Argument(format!(
                "keypoints: {} canonical vs {} observed vs {} flags",
                self.canonical.len(),
                self.observed.len(),
                self.visible.len()
            )));
        }
        for (k, u) in self.canonical.iter().enumerate() {
            let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Argument(format!("keypoint {k}: |u| = {n}, want 1")));
            }
        }
        let (wf, hf) = (image_w as f64, image_h as f64);
        for k in 0..self.canonical.len() {
            let [x, y] = self.observed[k];
            if self.visible[k] && (!x.is_finite() || !y.is_finite() || x < 0.0 || y < 0.0 || x > wf || y > hf) {
                return Err(Error::Argument(format!(
                    "keypoint {k}: observed ({x}, {y}) outside {image_w}x{image_h} image"
                )));
            }
        }
        Ok(())
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }
}

/// Mean absolute difference between two equally sized masks. Symmetric in
/// its arguments.
pub fn loss_mask(rendered: &Tensor, target: &Tensor) -> Result<Tensor> {
    if rendered.shape() != target.shape() || rendered.is_empty() {
        return Err(Error::Argument(format!(
            "loss_mask: image sizes {:?} and {:?} differ or are empty",
            rendered.shape(),
            target.shape()
        )));
    }
    rendered.sub(target)?.abs()?.mean()
}

/// Silhouette boundary attraction. First term pulls every projected surface
/// point inside the foreground (bilinear lookup of the foreground distance
/// field); second pulls each boundary pixel toward its nearest projected
/// point, softened over all points with temperature [`SOFTMIN_BETA`] so
/// every nearby point receives gradient.
pub fn loss_boundary(
    points: &Tensor,
    cam: &CameraVars,
    field: &DistanceField,
    boundary: &[[f64; 2]],
) -> Result<Tensor> {
    if points.shape().len() != 2 || points.shape()[1] != 3 || points.shape()[0] == 0 {
        return Err(Error::dim(
            "loss_boundary",
            format!("expected a nonempty (N, 3) point set, got {:?}", points.shape()),
        ));
    }
    let proj = cam.project_points(points)?;
    let inside = field.as_tensor().bilinear_gather(&proj)?.mean()?;
    if boundary.is_empty() {
        log::warn!("loss_boundary: no boundary pixels; the attraction term is skipped");
        return Ok(inside);
    }
    let (b, n) = (boundary.len(), points.shape()[0]);
    let pe = proj.reshape(&[1, n, 2])?.broadcast_to(&[b, n, 2])?;
    let be = Tensor::from_rows(boundary).reshape(&[b, 1, 2])?.broadcast_to(&[b, n, 2])?;
    let d = pe.sub(&be)?.l2norm_rows()?;
    let weights = d.scale(-1.0 / SOFTMIN_BETA)?.softmax()?;
    let soft_min = weights.mul(&d)?.sum_axis(1)?.mean()?;
    inside.add(&soft_min)
}

/// The hard counterpart of [`loss_boundary`]'s second term: mean over
/// boundary pixels of the true minimum distance to a projected point. This
/// is the reported metric; the softened term above upper-bounds it.
pub fn hard_boundary_gap(projected: &[[f64; 2]], boundary: &[[f64; 2]]) -> f64 {
    if projected.is_empty() || boundary.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for b in boundary {
        let mut best = f64::INFINITY;
        for p in projected {
            best = best.min(((p[0] - b[0]).powi(2) + (p[1] - b[1]).powi(2)).sqrt());
        }
        acc += best;
    }
    acc / boundary.len() as f64
}

/// Geometric cycle consistency: a foreground pixel p names a surface point
/// through the per-image map, the shape places it in 3D, and the camera
/// should send it back to p. Mean reprojection distance over the given
/// foreground pixels; gradients reach the map grid, the shape nets, and the
/// camera.
pub fn loss_gcc(
    grid: &Tensor,
    vars: &ShapeVars,
    z: &LatentCode,
    cam: &CameraVars,
    fg_pixels: &[[f64; 2]],
    image_h: usize,
    image_w: usize,
) -> Result<Tensor> {
    if fg_pixels.is_empty() {
        log::warn!("loss_gcc: empty foreground; returning zero");
        return Ok(Tensor::scalar(0.0));
    }
    let px = Tensor::from_rows(fg_pixels);
    let u = sample_map(grid, &px, image_h, image_w)?;
    let surf = shape::eval_shape(vars, &u, z)?;
    let proj = cam.project_points(&surf)?;
    proj.sub(&px)?.l2norm_rows()?.mean()
}

/// Mean reprojection distance of the visible keypoints: each canonical
/// sphere location is pushed through the shape and camera and compared
/// against its annotation.
pub fn loss_kp(kps: &KeypointSet, vars: &ShapeVars, z: &LatentCode, cam: &CameraVars) -> Result<Tensor> {
    if kps.observed.len() != kps.canonical.len() || kps.visible.len() != kps.canonical.len() {
        return Err(Error::Argument(format!(
            "loss_kp: {} canonical vs {} observed vs {} flags",
            kps.canonical.len(),
            kps.observed.len(),
            kps.visible.len()
        )));
    }
    let mut canon = Vec::new();
    let mut seen = Vec::new();
    for k in 0..kps.canonical.len() {
        if kps.visible[k] {
            canon.push(kps.canonical[k]);
            seen.push(kps.observed[k]);
        }
    }
    if canon.is_empty() {
        log::warn!("loss_kp: no visible keypoints; returning zero");
        return Ok(Tensor::scalar(0.0));
    }
    let u = Tensor::from_rows(&canon);
    let proj = cam.project_points(&shape::eval_shape(vars, &u, z)?)?;
    proj.sub(&Tensor::from_rows(&seen))?.l2norm_rows()?.mean()
}

/// Every atlas edge (i, j) with i < j, in lexicographic order.
pub fn atlas_edges(atlas: &SphereAtlas) -> Vec<[usize; 2]> {
    let mut edges = Vec::new();
    for i in 0..atlas.len() {
        for &j in atlas.neighborhood(i).expect("index is in range") {
            if i < j {
                edges.push([i, j]);
            }
        }
    }
    edges
}

/// Mean absolute edge-length change of `points` relative to `reference`
/// over the given edges. Edges are deduplicated by orientation and summed
/// in sorted order, so the value is bit-identical no matter how the edge
/// list is permuted or oriented.
pub fn rigidity_gap(points: &Tensor, reference: &Tensor, edges: &[[usize; 2]]) -> Result<Tensor> {
    if points.shape() != reference.shape() || points.shape().len() != 2 || points.shape()[1] != 3 {
        return Err(Error::dim(
            "rigidity_gap",
            format!("want matching (N, 3) sets, got {:?} and {:?}", points.shape(), reference.shape()),
        ));
    }
    if edges.is_empty() {
        return Err(Error::Argument("rigidity_gap: no edges given".to_string()));
    }
    let n = points.shape()[0];
    let mut order: Vec<[usize; 2]> = edges.iter().map(|e| [e[0].min(e[1]), e[0].max(e[1])]).collect();
    order.sort_unstable();
    for e in &order {
        if e[1] >= n || e[0] == e[1] {
            return Err(Error::Argument(format!("rigidity_gap: bad edge ({}, {}) for {n} points", e[0], e[1])));
        }
    }
    let heads: Vec<usize> = order.iter().map(|e| e[0]).collect();
    let tails: Vec<usize> = order.iter().map(|e| e[1]).collect();
    let len = |t: &Tensor| -> Result<Tensor> {
        t.index_rows(&heads)?.sub(&t.index_rows(&tails)?)?.l2norm_rows()
    };
    len(points)?.sub(&len(reference)?)?.abs()?.mean()
}

/// Deformation rigidity: mean absolute change of atlas edge lengths between
/// the deformed surface φ(·, z) and the mean surface φ̄. Zero whenever the
/// deformation is a global isometry of the mean shape.
pub fn loss_rigid(vars: &ShapeVars, z: &LatentCode, atlas: &SphereAtlas) -> Result<Tensor> {
    let u = Tensor::from_rows(atlas.samples());
    let deformed = shape::eval_shape(vars, &u, z)?;
    let mean = shape::eval_mean(vars, &u)?;
    rigidity_gap(&deformed, &mean, &atlas_edges(atlas))
}

/// Foreground-masked L1 color difference, summed over a three-level image
/// pyramid (full, half, quarter resolution) so that blurry low-frequency
/// agreement is rewarded before fine detail locks in. The mask is a fixed
/// weighting; gradients flow through the images only.
pub fn loss_texture(rendered: &Tensor, image: &Tensor, fg_mask: &Tensor) -> Result<Tensor> {
    let s = rendered.shape();
    if s.len() != 3 || s[2] != 3 || image.shape() != s || fg_mask.shape() != &s[..2] {
        return Err(Error::Argument(format!(
            "loss_texture: rendered {:?}, image {:?} and mask {:?} do not line up as (H, W, 3) + (H, W)",
            s,
            image.shape(),
            fg_mask.shape()
        )));
    }
    let (h, w) = (s[0], s[1]);
    if h < 8 || w < 8 {
        return Err(Error::Argument(format!("loss_texture: {h}x{w} image is too small for a 3-level pyramid")));
    }
    if fg_mask.data().iter().all(|&m| m == 0.0) {
        log::warn!("loss_texture: empty foreground; returning zero");
        return Ok(Tensor::scalar(0.0));
    }
    let mut r = rendered.clone();
    let mut i = image.clone();
    let mut m = fg_mask.reshape(&[h, w, 1])?;
    let mut total = Tensor::scalar(0.0);
    for level in 0..3 {
        if level > 0 {
            r = r.avg_pool2()?;
            i = i.avg_pool2()?;
            m = m.avg_pool2()?;
        }
        let ms: f64 = m.data().iter().sum();
        let mb = m.broadcast_to(r.shape())?;
        let masked = r.sub(&i)?.abs()?.mul(&mb)?.sum()?;
        total = total.add(&masked.scale(1.0 / (3.0 * ms))?)?;
    }
    Ok(total)
}

/// Penalty for texture flow targets that land outside the foreground: mean
/// foreground distance (in pixels) at each sample's flow coordinates.
pub fn loss_texture_fg(
    vars: &TextureVars,
    z: &LatentCode,
    sphere_samples: &Tensor,
    field: &DistanceField,
) -> Result<Tensor> {
    let flow = texture::eval_texture_flow(vars, sphere_samples, z)?;
    let n = flow.shape()[0];
    let to_px = Tensor::from_vec(vec![field.width as f64, field.height as f64], &[1, 2])?
        .broadcast_to(&[n, 2])?;
    field.as_tensor().bilinear_gather(&flow.mul(&to_px)?)?.mean()
}

/// Evaluated loss terms, in the fixed order the total and the training log
/// use. A term is `None` when it was never computed (zero weight, or no
/// data behind it).
#[derive(Debug, Clone, Default)]
pub struct LossComponents {
    pub mask: Option<Tensor>,
    pub boundary: Option<Tensor>,
    pub gcc: Option<Tensor>,
    pub kp: Option<Tensor>,
    pub rigid: Option<Tensor>,
    pub tex: Option<Tensor>,
    pub texfg: Option<Tensor>,
}

impl LossComponents {
    /// Name and current value of every term, for logging.
    pub fn named(&self) -> [(&'static str, Option<f64>); 7] {
        let v = |t: &Option<Tensor>| t.as_ref().map(Tensor::item);
        [
            ("mask", v(&self.mask)),
            ("boundary", v(&self.boundary)),
            ("gcc", v(&self.gcc)),
            ("kp", v(&self.kp)),
            ("rigid", v(&self.rigid)),
            ("tex", v(&self.tex)),
            ("texfg", v(&self.texfg)),
        ]
    }
}

/// Σ wᵢ·Lᵢ over the evaluated components. Zero-weight terms are ignored
/// entirely (callers skip computing them); a non-finite term is an error
/// naming the offender.
pub fn total_loss(parts: &LossComponents, weights: &LossWeights) -> Result<Tensor> {
    weights.validate()?;
    let terms: [(&'static str, &Option<Tensor>, f64); 7] = [
        ("mask", &parts.mask, weights.w_mask),
        ("boundary", &parts.boundary, weights.w_boundary),
        ("gcc", &parts.gcc, weights.w_gcc),
        ("kp", &parts.kp, weights.w_kp),
        ("rigid", &parts.rigid, weights.w_rigid),
        ("tex", &parts.tex, weights.w_tex),
        ("texfg", &parts.texfg, weights.w_texfg),
    ];
    let mut total: Option<Tensor> = None;
    for (name, part, weight) in terms {
        if weight == 0.0 {
            continue;
        }
        let Some(value) = part else {
            log::warn!("total_loss: {name} has weight {weight} but was never evaluated; skipping");
            continue;
        };
        if value.len() != 1 {
            return Err(Error::dim("total_loss", format!("{name} is not a scalar: {:?}", value.shape())));
        }
        if !value.item().is_finite() {
            return Err(Error::Numeric(format!("total_loss: component {name} is {}", value.item())));
        }
        let term = value.scale(weight)?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use crate::camera::{quat_from_axis_angle, rotate, WeakPerspectiveCamera};
    use crate::geometry::{icosphere, sample_sphere};
    use crate::renderer::field::{boundary_pixels, distance_field};
    use crate::shape::ShapeSpace;
    use crate::surface_map::PixelSurfaceMap;
    use crate::texture::TextureSpace;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_cam(scale: f64, t: [f64; 2]) -> WeakPerspectiveCamera {
        WeakPerspectiveCamera::new(scale, t, [1.0, 0.0, 0.0, 0.0]).unwrap()
    }

    /// All layer weights zero, so the net computes `bias` for every input.
    fn constant_net(net: &mut crate::shape::MlpParams, bias: &[f64]) {
        for layer in &mut net.layers {
            layer.w.iter_mut().for_each(|v| *v = 0.0);
            layer.b.iter_mut().for_each(|v| *v = 0.0);
        }
        net.layers[3].b.copy_from_slice(bias);
    }

    fn random_mask(h: usize, w: usize, density: f64, seed: u64) -> Vec<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask: Vec<bool> = (0..h * w).map(|_| rng.random::<f64>() < density).collect();
        if !mask.iter().any(|&m| m) {
            mask[h / 2 * w + w / 2] = true;
        }
        mask
    }

    #[test]
    fn default_weights_are_valid() {
        LossWeights::default().validate().unwrap();
        assert_eq!(LossWeights::without_keypoints().w_kp, 0.0);
        assert!(LossWeights { w_gcc: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossWeights { w_tex: f64::NAN, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn keypoint_validation_catches_bad_sets() {
        let good = KeypointSet {
            canonical: vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]],
            observed: vec![[3.0, 4.0], [60.0, 60.0]],
            visible: vec![true, true],
        };
        good.validate(64, 64).unwrap();
        let short = KeypointSet { observed: vec![[3.0, 4.0]], ..good.clone() };
        assert!(short.validate(64, 64).is_err());
        let skewed = KeypointSet { canonical: vec![[0.0, 0.0, 2.0], [1.0, 0.0, 0.0]], ..good.clone() };
        assert!(skewed.validate(64, 64).is_err());
        let outside = KeypointSet { observed: vec![[3.0, 4.0], [90.0, 60.0]], ..good.clone() };
        assert!(outside.validate(64, 64).is_err());
        // the same point is fine once hidden
        let hidden = KeypointSet {
            observed: vec![[3.0, 4.0], [90.0, 60.0]],
            visible: vec![true, false],
            ..good
        };
        hidden.validate(64, 64).unwrap();
        assert_eq!(hidden.visible_count(), 1);
    }

    #[test]
    fn mask_loss_examples() {
        let a = Tensor::from_vec(vec![1.0; 64], &[8, 8]).unwrap();
        let b = Tensor::from_vec(vec![0.0; 64], &[8, 8]).unwrap();
        assert_eq!(loss_mask(&a, &a).unwrap().item(), 0.0);
        assert_eq!(loss_mask(&a, &b).unwrap().item(), 1.0);
        let mut half = vec![0.0; 64];
        half[..32].iter_mut().for_each(|v| *v = 1.0);
        let h = Tensor::from_vec(half, &[8, 8]).unwrap();
        assert_eq!(loss_mask(&a, &h).unwrap().item(), 0.5);
        let tiny = Tensor::from_vec(vec![0.0; 16], &[4, 4]).unwrap();
        assert!(loss_mask(&a, &tiny).is_err());
    }

    #[test]
    fn mask_loss_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::from_vec((0..256).map(|_| rng.random()).collect(), &[16, 16]).unwrap();
        let b = Tensor::from_vec((0..256).map(|_| rng.random()).collect(), &[16, 16]).unwrap();
        assert_eq!(loss_mask(&a, &b).unwrap().item(), loss_mask(&b, &a).unwrap().item());
    }

    #[test]
    fn mask_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target = Tensor::from_vec((0..256).map(|_| rng.random()).collect(), &[16, 16]).unwrap();
        let start = Tensor::from_vec((0..256).map(|_| rng.random()).collect(), &[16, 16]).unwrap();
        let err = grad_check(|x| loss_mask(x, &target), &start, 1e-6).unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn boundary_first_term_reads_the_distance_field() {
        // lone foreground pixel (row 2, col 2); a point projecting to
        // (6.5, 2.5) sits exactly 4 pixels away
        let mut mask = vec![false; 64];
        mask[2 * 8 + 2] = true;
        let field = distance_field(&mask, 8, 8).unwrap();
        let cam = CameraVars::constant(&identity_cam(1.0, [0.0, 0.0]));
        let p = Tensor::from_rows(&[[6.5, 2.5, 0.0]]);
        let skipped = loss_boundary(&p, &cam, &field, &[]).unwrap();
        assert_eq!(skipped.item(), 4.0);
        // the boundary of a lone pixel is that pixel; its soft distance to
        // the single projected point is exact
        let full = loss_boundary(&p, &cam, &field, &[[2.5, 2.5]]).unwrap();
        assert_eq!(full.item(), 8.0);
    }

    #[test]
    fn matched_points_cost_nothing() {
        // two foreground pixels far apart; projections land dead on their
        // centers, so both terms vanish (the far cross-distances are damped
        // to below 1e-20 by the soft-min weights)
        let mut mask = vec![false; 64 * 64];
        mask[2 * 64 + 2] = true;
        mask[50 * 64 + 50] = true;
        let field = distance_field(&mask, 64, 64).unwrap();
        let boundary = boundary_pixels(&mask, 64, 64).unwrap();
        assert_eq!(boundary.len(), 2);
        let cam = CameraVars::constant(&identity_cam(1.0, [0.0, 0.0]));
        let p = Tensor::from_rows(&[[2.5, 2.5, 0.3], [50.5, 50.5, -0.4]]);
        let loss = loss_boundary(&p, &cam, &field, &boundary).unwrap();
        assert!(loss.item() < 1e-9, "loss {}", loss.item());
    }

    #[test]
    fn soft_attraction_upper_bounds_the_hard_gap() {
        let mask = random_mask(16, 16, 0.12, 7);
        let field = distance_field(&mask, 16, 16).unwrap();
        let boundary = boundary_pixels(&mask, 16, 16).unwrap();
        let cam = CameraVars::constant(&identity_cam(4.0, [8.0, 8.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<[f64; 3]> = (0..12).map(|_| [rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0]).collect();
        let pt = Tensor::from_rows(&pts);
        let loss = loss_boundary(&pt, &cam, &field, &boundary).unwrap();
        let proj: Vec<[f64; 2]> = pts.iter().map(|p| [4.0 * p[0] + 8.0, 4.0 * p[1] + 8.0]).collect();
        let first: f64 = proj.iter().map(|p| field.sample(p[0], p[1])).sum::<f64>() / proj.len() as f64;
        let hard = hard_boundary_gap(&proj, &boundary);
        assert!(loss.item() - first + 1e-12 >= hard, "soft {} < hard {hard}", loss.item() - first);
    }

    #[test]
    fn boundary_gradient_matches_finite_differences() {
        let mask = random_mask(16, 16, 0.2, 9);
        let field = distance_field(&mask, 16, 16).unwrap();
        let boundary = boundary_pixels(&mask, 16, 16).unwrap();
        let q = quat_from_axis_angle([0.3, 1.0, 0.2], 0.4);
        let cam = CameraVars::constant(&WeakPerspectiveCamera::new(5.0, [8.0, 8.0], q).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pts: Vec<[f64; 3]> = (0..5).map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect();
        let err = grad_check(|x| loss_boundary(x, &cam, &field, &boundary), &Tensor::from_rows(&pts), 1e-5).unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn constant_map_and_shape_give_the_closed_form() {
        // the rigged shape collapses every surface point to a = (0, 0.25, -0.5)
        // (a_x = 0 keeps the mirror average at a), so each foreground pixel
        // pays its distance to q = s*(a_x, a_y) + t
        let mut space = ShapeSpace::init(2, 8, 11);
        constant_net(&mut space.mean_net, &[0.0, 0.25, -0.5]);
        constant_net(&mut space.deform_net, &[0.0, 0.0, 0.0]);
        let vars = ShapeVars::constant(&space);
        let z = Tensor::from_vec(vec![0.0, 0.0], &[2]).unwrap();
        let cam = CameraVars::constant(&identity_cam(2.0, [3.0, 4.0]));
        let grid = PixelSurfaceMap::init(4, 4, 3).unwrap();
        let mut flat = grid.clone();
        flat.buffer_mut().chunks_mut(3).for_each(|c| c.copy_from_slice(&[0.0, 0.0, 1.0]));
        let fg = [[1.5, 2.5], [9.5, 4.5], [3.5, 3.5]];
        let loss = loss_gcc(&flat.constant(), &vars, &z, &cam, &fg, 16, 16).unwrap();
        let q = [3.0, 4.5];
        let want: f64 = fg.iter().map(|p| ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt()).sum::<f64>() / 3.0;
        assert!((loss.item() - want).abs() < 1e-12);
        // a single foreground pixel at q itself closes the cycle exactly
        let zero = loss_gcc(&flat.constant(), &vars, &z, &cam, &[q], 16, 16).unwrap();
        assert_eq!(zero.item(), 0.0);
    }

    #[test]
    fn cycle_loss_matches_per_pixel_reevaluation() {
        let space = ShapeSpace::init(2, 8, 12);
        let vars = ShapeVars::constant(&space);
        let z = Tensor::from_vec(vec![0.3, -0.2], &[2]).unwrap();
        let cam = CameraVars::constant(&WeakPerspectiveCamera::new(5.0, [8.0, 8.0], quat_from_axis_angle([0.0, 1.0, 0.0], 0.5)).unwrap());
        let map = PixelSurfaceMap::init(6, 6, 13).unwrap();
        let grid = map.constant();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let fg: Vec<[f64; 2]> = (0..10).map(|_| [rng.random::<f64>() * 16.0, rng.random::<f64>() * 16.0]).collect();
        let batched = loss_gcc(&grid, &vars, &z, &cam, &fg, 16, 16).unwrap().item();
        let mut acc = 0.0;
        for p in &fg {
            acc += loss_gcc(&grid, &vars, &z, &cam, &[*p], 16, 16).unwrap().item();
        }
        assert!((batched - acc / 10.0).abs() < 1e-9, "batched {batched} vs mean {}", acc / 10.0);
    }

    #[test]
    fn cycle_gradients_reach_every_input() {
        let tape = Tape::new();
        let mut space = ShapeSpace::init(2, 8, 15);
        // a fresh deformation head is zero, which correctly blocks all
        // gradient into z; open it up so the whole path is exercised
        let mut wr = ChaCha8Rng::seed_from_u64(15);
        space.deform_net.layers[3].w.iter_mut().for_each(|v| *v = wr.random_range(-0.3..0.3));
        let vars = ShapeVars::tracked(&tape, &space).unwrap();
        let z = tape.var(vec![0.1, 0.2], &[2]).unwrap();
        let cam_p = WeakPerspectiveCamera::new(4.0, [8.0, 8.0], quat_from_axis_angle([1.0, 0.0, 0.0], 0.3)).unwrap();
        let cam = CameraVars::tracked(&tape, &cam_p).unwrap();
        let map = PixelSurfaceMap::init(4, 4, 16).unwrap();
        let grid = map.tracked(&tape).unwrap();
        let fg = [[2.5, 3.5], [10.5, 8.5], [7.5, 12.5]];
        let loss = loss_gcc(&grid, &vars, &z, &cam, &fg, 16, 16).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let nonzero = |t: &Tensor| grads.wrt(t).data().iter().any(|&g| g != 0.0);
        assert!(nonzero(&grid), "no gradient into the map grid");
        assert!(nonzero(&vars.mean.weights[0]), "no gradient into the shape net");
        assert!(nonzero(&cam.translation) && nonzero(&cam.scale), "no gradient into the camera");
        assert!(nonzero(&z), "no gradient into the latent code");
    }

    #[test]
    fn empty_foreground_costs_nothing() {
        let space = ShapeSpace::init(2, 8, 17);
        let vars = ShapeVars::constant(&space);
        let z = Tensor::from_vec(vec![0.0, 0.0], &[2]).unwrap();
        let cam = CameraVars::constant(&identity_cam(1.0, [0.0, 0.0]));
        let grid = PixelSurfaceMap::init(4, 4, 18).unwrap().constant();
        let loss = loss_gcc(&grid, &vars, &z, &cam, &[], 16, 16).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn keypoints_at_their_reprojections_cost_nothing() {
        let space = ShapeSpace::init(2, 8, 19);
        let vars = ShapeVars::constant(&space);
        let z = Tensor::from_vec(vec![0.4, -0.1], &[2]).unwrap();
        let cam = CameraVars::constant(&WeakPerspectiveCamera::new(6.0, [12.0, 10.0], quat_from_axis_angle([0.2, 0.9, 0.1], 0.8)).unwrap());
        let canonical = vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];
        let u = Tensor::from_rows(&canonical);
        let proj = cam.project_points(&shape::eval_shape(&vars, &u, &z).unwrap()).unwrap();
        let observed: Vec<[f64; 2]> = proj.data().chunks(2).map(|c| [c[0], c[1]]).collect();
        let kps = KeypointSet { canonical, observed, visible: vec![true; 3] };
        assert_eq!(loss_kp(&kps, &vars, &z, &cam).unwrap().item(), 0.0);
    }

    #[test]
    fn a_three_four_offset_costs_five() {
        let space = ShapeSpace::init(2, 8, 20);
        let vars = ShapeVars::constant(&space);
        let z = Tensor::from_vec(vec![0.0, 0.3], &[2]).unwrap();
        let cam = CameraVars::constant(&identity_cam(3.0, [8.0, 8.0]));
        let canonical = vec![[0.0, 0.6, 0.8]];
        let u = Tensor::from_rows(&canonical);
        let p = cam.project_points(&shape::eval_shape(&vars, &u, &z).unwrap()).unwrap();
        let kps = KeypointSet {
            canonical,
            observed: vec![[p.data()[0] + 3.0, p.data()[1] + 4.0]],
            visible: vec![true],
        };
        let loss = loss_kp(&kps, &vars, &z, &cam).unwrap();
        assert!((loss.item() - 5.0).abs() < 1e-12, "loss {}", loss.item());
    }

    #[test]
    fn hidden_keypoints_are_ignored() {
        let space = ShapeSpace::init(2, 8, 21);
        let vars = ShapeVars::constant(&space);
        let z = Tensor::from_vec(vec![0.2, 0.2], &[2]).unwrap();
        let cam = CameraVars::constant(&identity_cam(5.0, [8.0, 8.0]));
        let one = KeypointSet {
            canonical: vec![[0.0, 0.0, 1.0]],
            observed: vec![[3.0, 2.0]],
            visible: vec![true],
        };
        let padded = KeypointSet {
            canonical: vec![[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
            observed: vec![[3.0, 2.0], [5000.0, -900.0]],
            visible: vec![true, false],
        };
        assert_eq!(
            loss_kp(&one, &vars, &z, &cam).unwrap().item(),
            loss_kp(&padded, &vars, &z, &cam).unwrap().item()
        );
        let none = KeypointSet { visible: vec![false, false], ..padded };
        assert_eq!(loss_kp(&none, &vars, &z, &cam).unwrap().item(), 0.0);
    }

    #[test]
    fn keypoint_gradient_matches_finite_differences() {
        let space = ShapeSpace::init(2, 8, 22);
        let vars = ShapeVars::constant(&space);
        let z = Tensor::from_vec(vec![0.1, -0.3], &[2]).unwrap();
        let kps = KeypointSet {
            canonical: vec![[0.0, 0.0, 1.0], [0.6, 0.8, 0.0]],
            observed: vec![[4.0, 5.0], [11.0, 7.0]],
            visible: vec![true, true],
        };
        let base = WeakPerspectiveCamera::new(5.0, [8.0, 8.0], quat_from_axis_angle([0.0, 0.0, 1.0], 0.2)).unwrap();
        let scale = Tensor::from_vec(vec![base.scale], &[1]).unwrap();
        let rot = Tensor::from_vec(base.rotation.to_vec(), &[4]).unwrap();
        let err = grad_check(
            |t| {
                let cam = CameraVars { scale: scale.clone(), translation: t.clone(), rotation: rot.clone() };
                loss_kp(&kps, &vars, &z, &cam)
            },
            &Tensor::from_vec(vec![8.0, 8.0], &[2]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn zero_deformation_is_perfectly_rigid() {
        // a fresh space has a zeroed deformation head, so φ = φ̄ bit for bit
        let space = ShapeSpace::init(2, 8, 23);
        let vars = ShapeVars::constant(&space);
        let z = Tensor::from_vec(vec![0.7, -0.4], &[2]).unwrap();
        let atlas = icosphere(1).unwrap();
        assert_eq!(loss_rigid(&vars, &z, &atlas).unwrap().item(), 0.0);
    }

    #[test]
    fn global_rigid_motion_keeps_edge_lengths() {
        let space = ShapeSpace::init(2, 8, 24);
        let vars = ShapeVars::constant(&space);
        let atlas = icosphere(1).unwrap();
        let u = Tensor::from_rows(atlas.samples());
        let mean = shape::eval_mean(&vars, &u).unwrap();
        let q = quat_from_axis_angle([1.0, 2.0, 3.0], 0.7);
        let moved: Vec<[f64; 3]> = mean
            .data()
            .chunks(3)
            .map(|p| {
                let r = rotate(q, [p[0], p[1], p[2]]).unwrap();
                [r[0] + 0.3, r[1] - 0.2, r[2] + 0.5]
            })
            .collect();
        let gap = rigidity_gap(&Tensor::from_rows(&moved), &mean, &atlas_edges(&atlas)).unwrap();
        assert!(gap.item() < 1e-10, "gap {}", gap.item());
    }

    #[test]
    fn doubling_the_shape_costs_the_mean_edge_length() {
        let space = ShapeSpace::init(2, 8, 25);
        let vars = ShapeVars::constant(&space);
        let atlas = icosphere(1).unwrap();
        let u = Tensor::from_rows(atlas.samples());
        let mean = shape::eval_mean(&vars, &u).unwrap();
        let gap = rigidity_gap(&mean.scale(2.0).unwrap(), &mean, &atlas_edges(&atlas)).unwrap();
        // independent accumulation of the mean edge length
        let d = mean.data();
        let edges = atlas_edges(&atlas);
        let want: f64 = edges
            .iter()
            .map(|e| {
                let (a, b) = (&d[3 * e[0]..3 * e[0] + 3], &d[3 * e[1]..3 * e[1] + 3]);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            })
            .sum::<f64>()
            / edges.len() as f64;
        assert!((gap.item() - want).abs() < 1e-12, "gap {} vs mean edge {want}", gap.item());
    }

    #[test]
    fn edge_order_never_changes_the_loss() {
        let space = ShapeSpace::init(2, 8, 26);
        let vars = ShapeVars::constant(&space);
        let atlas = icosphere(1).unwrap();
        let u = Tensor::from_rows(atlas.samples());
        let mean = shape::eval_mean(&vars, &u).unwrap();
        let points = mean.scale(1.3).unwrap();
        let edges = atlas_edges(&atlas);
        let mut shuffled = edges.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        // flip orientations too
        for e in shuffled.iter_mut().step_by(3) {
            e.swap(0, 1);
        }
        let a = rigidity_gap(&points, &mean, &edges).unwrap().item();
        let b = rigidity_gap(&points, &mean, &shuffled).unwrap().item();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn rigidity_gradient_matches_finite_differences() {
        let mut space = ShapeSpace::init(2, 8, 28);
        // the zeroed head makes the gap identically 0 (a kink of |·|);
        // nudge it so the probe sits on smooth ground
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        space.deform_net.layers[3].w.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        let atlas = icosphere(1).unwrap();
        let z = Tensor::from_vec(vec![0.5, -0.2], &[2]).unwrap();
        let probe = Tensor::from_vec(space.deform_net.layers[3].w.clone(), &[8, 3]).unwrap();
        let err = grad_check(
            |w| {
                let mut vars = ShapeVars::constant(&space);
                vars.deform.weights[3] = w.clone();
                loss_rigid(&vars, &z, &atlas)
            },
            &probe,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn texture_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let img: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random()).collect();
        let image = Tensor::from_vec(img.clone(), &[16, 16, 3]).unwrap();
        // foreground: left half, aligned with all pyramid cells
        let mask_v: Vec<f64> = (0..256).map(|i| if i % 16 < 8 { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::from_vec(mask_v, &[16, 16]).unwrap();
        assert_eq!(loss_texture(&image, &image, &mask).unwrap().item(), 0.0);
        let lifted = image.add_scalar(0.1).unwrap();
        let offset = loss_texture(&lifted, &image, &mask).unwrap().item();
        assert!((offset - 0.3).abs() < 1e-12, "offset {offset}");
        // trashing the background half changes nothing
        let trashed: Vec<f64> = img
            .iter()
            .enumerate()
            .map(|(i, &v)| if (i / 3) % 16 >= 8 { 1.0 - v } else { v })
            .collect();
        let noisy = Tensor::from_vec(trashed, &[16, 16, 3]).unwrap();
        assert_eq!(loss_texture(&noisy, &image, &mask).unwrap().item(), 0.0);
    }

    #[test]
    fn empty_foreground_texture_is_free() {
        let image = Tensor::zeros(&[16, 16, 3]);
        let other = Tensor::from_vec(vec![0.7; 16 * 16 * 3], &[16, 16, 3]).unwrap();
        let mask = Tensor::zeros(&[16, 16]);
        assert_eq!(loss_texture(&other, &image, &mask).unwrap().item(), 0.0);
        let bad = Tensor::zeros(&[8, 16, 3]);
        assert!(loss_texture(&bad, &image, &mask).is_err());
    }

    #[test]
    fn texture_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let image = Tensor::from_vec((0..16 * 16 * 3).map(|_| rng.random()).collect(), &[16, 16, 3]).unwrap();
        let start = Tensor::from_vec((0..16 * 16 * 3).map(|_| rng.random()).collect(), &[16, 16, 3]).unwrap();
        let mask_v: Vec<f64> = (0..256).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::from_vec(mask_v, &[16, 16]).unwrap();
        let err = grad_check(|x| loss_texture(x, &image, &mask), &start, 1e-6).unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn flow_inside_the_foreground_is_free() {
        // foreground covers everything, so its distance field is 0 wherever
        // the flow can land
        let field = distance_field(&vec![true; 256], 16, 16).unwrap();
        let space = TextureSpace::init(2, 8, 32);
        let vars = space.constant();
        let z = Tensor::from_vec(vec![0.3, 0.1], &[2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let u = Tensor::from_rows(&sample_sphere(40, &mut rng));
        assert_eq!(loss_texture_fg(&vars, &z, &u, &field).unwrap().item(), 0.0);
    }

    #[test]
    fn stray_flow_pays_its_distance() {
        // rig the flow to the constant (0.6875, 0.3125): pixel (5.5, 2.5),
        // three pixels right of the lone foreground pixel at (row 2, col 2)
        let mut space = TextureSpace::init(2, 8, 34);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        constant_net(&mut space.flow_net, &[logit(0.6875), logit(0.3125)]);
        let vars = space.constant();
        let z = Tensor::from_vec(vec![0.0, 0.0], &[2]).unwrap();
        let mut mask = vec![false; 64];
        mask[2 * 8 + 2] = true;
        let field = distance_field(&mask, 8, 8).unwrap();
        let u = Tensor::from_rows(&[[0.0, 0.0, 1.0]]);
        let loss = loss_texture_fg(&vars, &z, &u, &field).unwrap();
        assert!((loss.item() - 3.0).abs() < 1e-9, "loss {}", loss.item());
    }

    #[test]
    fn stray_flow_gradient_matches_finite_differences() {
        let mask = random_mask(16, 16, 0.3, 35);
        let field = distance_field(&mask, 16, 16).unwrap();
        let space = TextureSpace::init(2, 8, 36);
        let z = Tensor::from_vec(vec![0.2, -0.1], &[2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let u = Tensor::from_rows(&sample_sphere(15, &mut rng));
        let probe = Tensor::from_vec(space.flow_net.layers[0].w.clone(), &[5, 8]).unwrap();
        let err = grad_check(
            |w| {
                let mut vars = space.constant();
                vars.flow.weights[0] = w.clone();
                loss_texture_fg(&vars, &z, &u, &field)
            },
            &probe,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn total_mixes_the_terms_linearly() {
        let parts = LossComponents {
            mask: Some(Tensor::scalar(0.25)),
            rigid: Some(Tensor::scalar(0.5)),
            ..Default::default()
        };
        let zeroed = LossWeights { w_mask: 0.0, w_boundary: 0.0, w_gcc: 0.0, w_kp: 0.0, w_rigid: 0.0, w_tex: 0.0, w_texfg: 0.0 };
        assert_eq!(total_loss(&parts, &zeroed).unwrap().item(), 0.0);
        let only_mask = LossWeights { w_mask: 1.0, ..zeroed };
        assert_eq!(total_loss(&parts, &only_mask).unwrap().item(), 0.25);
        let both = LossWeights { w_mask: 1.0, w_rigid: 2.0, ..zeroed };
        let doubled = LossWeights { w_mask: 2.0, w_rigid: 4.0, ..zeroed };
        let t1 = total_loss(&parts, &both).unwrap().item();
        let t2 = total_loss(&parts, &doubled).unwrap().item();
        assert_eq!(t2.to_bits(), (2.0 * t1).to_bits());
    }

    #[test]
    fn total_skips_what_was_never_evaluated() {
        // w_kp stays at its default but no keypoint term exists; the total
        // quietly covers the rest
        let parts = LossComponents { mask: Some(Tensor::scalar(0.4)), ..Default::default() };
        let got = total_loss(&parts, &LossWeights::default()).unwrap();
        assert_eq!(got.item(), 0.4);
    }

    #[test]
    fn non_finite_components_are_named() {
        let parts = LossComponents {
            mask: Some(Tensor::scalar(0.1)),
            gcc: Some(Tensor::scalar(f64::NAN)),
            ..Default::default()
        };
        let err = total_loss(&parts, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("gcc"), "message: {err}");
        let inf = LossComponents { tex: Some(Tensor::scalar(f64::INFINITY)), ..Default::default() };
        assert!(total_loss(&inf, &LossWeights::default()).is_err());
    }

    #[test]
    fn total_keeps_the_graph_alive() {
        // the total must stay differentiable through each weighted term
        let tape = Tape::new();
        let x = tape.var(vec![0.3], &[1]).unwrap();
        let parts = LossComponents {
            mask: Some(x.square().unwrap().sum().unwrap()),
            ..Default::default()
        };
        let total = total_loss(&parts, &LossWeights::default()).unwrap();
        let g = tape.backward(&total).unwrap().wrt(&x);
        assert!((g.data()[0] - 0.6).abs() < 1e-12);
    }
}
