//! End-to-end fitting. A collection of segmented views is explained by one
//! shared shape space, per-instance latent codes, per-view cameras and
//! per-view surface maps, all optimized jointly by gradient descent. There
//! is no encoder anywhere: every per-image quantity is a free variable.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Tensor};
use crate::camera::{
    expected_loss_t, quat_from_axis_angle, quat_mul, quat_normalize, CameraHypothesisSet,
    CameraVars, WeakPerspectiveCamera,
};
use crate::error::{Error, Result};
use crate::geometry::{icosphere, sample_sphere, SphereAtlas, TriMesh};
use crate::losses::{
    atlas_edges, loss_boundary, loss_gcc, loss_kp, loss_mask, loss_texture, loss_texture_fg,
    total_loss, rigidity_gap, KeypointSet, LossComponents, LossWeights, BOUNDARY_POINT_COUNT,
};
use crate::optim::{Adam, AdamState};
use crate::renderer::field::{boundary_pixels, distance_field, DistanceField};
use crate::renderer::hard::{rasterize_surface_coords, shade_buffers};
use crate::renderer::{rasterize_color_t, rasterize_mask_t, SoftRasterConfig};
use crate::shape::{self, extract_mesh, MlpVars, ShapeSpace, ShapeVars};
use crate::surface_map::PixelSurfaceMap;
use crate::texture::{texture_at, TextureSpace, TextureVars};

/// Cameras whose scale collapses under a bad gradient step are pinned here
/// instead of invalidating the projection.
const MIN_CAMERA_SCALE: f64 = 1e-3;

/// Sphere samples per pass for the texture-flow foreground penalty.
const TEXFG_SAMPLES: usize = 64;

/// Number of keypoints planted on synthetic data.
const SYNTH_KEYPOINTS: usize = 12;

#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Optimization epochs; every view is visited once per epoch.
    pub iterations: usize,
    pub lr_nets: f64,
    pub lr_texture: f64,
    pub lr_latents: f64,
    pub lr_cameras: f64,
    pub lr_maps: f64,
    /// The deformation head and the shape latents stay frozen for this
    /// fraction of the run, so the shared mean settles first. Only applies
    /// when the networks are being trained; frozen-space fits skip the gate.
    pub delta_enable_fraction: f64,
    /// Camera hypotheses per view at the start.
    pub hypotheses: usize,
    /// Epoch at which each view keeps only its cheapest hypothesis. Set it
    /// at or past `iterations` to keep the full set to the end.
    pub prune_after: usize,
    /// Elevation of the initial azimuth ring, radians.
    pub hypothesis_elevation: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Icosphere subdivision level used for rendering and rigidity.
    pub atlas_level: usize,
    /// Side length of the square per-view surface map grid.
    pub map_size: usize,
    /// Foreground pixels drawn per pass for the cycle term.
    pub gcc_pixel_cap: usize,
    /// Boundary pixels drawn per pass for the attraction term.
    pub boundary_pixel_cap: usize,
    /// Surface samples projected into the distance field per pass.
    pub boundary_sample_count: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 240,
            lr_nets: 1e-4,
            lr_texture: 1e-4,
            lr_latents: 1e-2,
            lr_cameras: 1e-2,
            lr_maps: 1e-2,
            delta_enable_fraction: 0.33,
            hypotheses: 8,
            prune_after: 60,
            hypothesis_elevation: 0.3,
            weights: LossWeights::default(),
            seed: 0,
            atlas_level: 2,
            map_size: 32,
            gcc_pixel_cap: 128,
            boundary_pixel_cap: 160,
            boundary_sample_count: BOUNDARY_POINT_COUNT,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Argument("fit config: iterations must be positive".into()));
        }
        for (name, lr) in [
            ("lr_nets", self.lr_nets),
            ("lr_texture", self.lr_texture),
            ("lr_latents", self.lr_latents),
            ("lr_cameras", self.lr_cameras),
            ("lr_maps", self.lr_maps),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Argument(format!(
                    "fit config: {name} must be finite and positive, got {lr}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.delta_enable_fraction) {
            return Err(Error::Argument(format!(
                "fit config: delta_enable_fraction must lie in [0, 1], got {}",
                self.delta_enable_fraction
            )));
        }
        if self.hypotheses == 0 {
            return Err(Error::Argument("fit config: at least one camera hypothesis".into()));
        }
        if !self.hypothesis_elevation.is_finite() {
            return Err(Error::Argument("fit config: hypothesis_elevation must be finite".into()));
        }
        if self.atlas_level > 5 {
            return Err(Error::Argument(format!(
                "fit config: atlas_level {} is past the supported range (max 5)",
                self.atlas_level
            )));
        }
        if self.map_size < 4 {
            return Err(Error::Argument("fit config: map_size must be at least 4".into()));
        }
        if self.gcc_pixel_cap == 0 || self.boundary_pixel_cap == 0 || self.boundary_sample_count == 0
        {
            return Err(Error::Argument("fit config: sampling caps must be positive".into()));
        }
        self.weights.validate()
    }

    /// First epoch at which the deformation half of the shape is trained.
    pub fn delta_gate(&self) -> usize {
        (self.delta_enable_fraction * self.iterations as f64).ceil() as usize
    }
}

/// One segmented observation. `image` is row-major RGB in [0, 1] and `mask`
/// marks its foreground pixels.
#[derive(Debug, Clone)]
pub struct Instance {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    pub mask: Vec<bool>,
    pub keypoints: Option<KeypointSet>,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Argument(format!(
                "instance '{}': images below 8x8 are not supported, got {}x{}",
                self.id, self.height, self.width
            )));
        }
        if self.image.len() != self.height * self.width * 3 {
            return Err(Error::Argument(format!(
                "instance '{}': image buffer holds {} floats, expected {}",
                self.id,
                self.image.len(),
                self.height * self.width * 3
            )));
        }
        if self.mask.len() != self.height * self.width {
            return Err(Error::Argument(format!(
                "instance '{}': mask holds {} entries, expected {}",
                self.id,
                self.mask.len(),
                self.height * self.width
            )));
        }
        if !self.image.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Argument(format!(
                "instance '{}': image values must lie in [0, 1]",
                self.id
            )));
        }
        if !self.mask.iter().any(|&b| b) {
            return Err(Error::Argument(format!("instance '{}': empty mask", self.id)));
        }
        if let Some(kps) = &self.keypoints {
            kps.validate(self.height, self.width)?;
        }
        Ok(())
    }

    /// Centers of the foreground pixels in row-major order.
    pub fn fg_pixels(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.mask[r * self.width + c] {
                    out.push([c as f64 + 0.5, r as f64 + 0.5]);
                }
            }
        }
        out
    }
}

/// Family of deformations applied to a template when generating synthetic
/// data: per-axis scales plus a quadratic/cubic bend of y along z. The x
/// axis is only ever scaled, so the mirror symmetry of the template
/// survives every draw.
#[derive(Debug, Clone)]
pub struct DeformSpec {
    pub scale_min: f64,
    pub scale_max: f64,
    pub bend_quadratic: f64,
    pub bend_cubic: f64,
}

impl Default for DeformSpec {
    fn default() -> Self {
        DeformSpec { scale_min: 0.7, scale_max: 1.3, bend_quadratic: 0.15, bend_cubic: 0.08 }
    }
}

impl DeformSpec {
    /// The degenerate family containing only the template itself.
    pub fn identity() -> Self {
        DeformSpec { scale_min: 1.0, scale_max: 1.0, bend_quadratic: 0.0, bend_cubic: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale_min.is_finite()
            && self.scale_max.is_finite()
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.bend_quadratic.is_finite()
            && self.bend_quadratic >= 0.0
            && self.bend_cubic.is_finite()
            && self.bend_cubic >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("deform spec out of range: {self:?}")))
        }
    }

    /// Draw order is fixed (sx, sy, sz, quadratic, cubic) so datasets are
    /// reproducible. Zero-width ranges skip the draw instead of sampling a
    /// degenerate interval.
    fn sample(&self, rng: &mut ChaCha8Rng) -> ([f64; 3], f64, f64) {
        let mut scales = [1.0; 3];
        for s in &mut scales {
            *s = if self.scale_min == self.scale_max {
                self.scale_min
            } else {
                rng.random_range(self.scale_min..self.scale_max)
            };
        }
        let quad = if self.bend_quadratic == 0.0 {
            0.0
        } else {
            rng.random_range(-self.bend_quadratic..self.bend_quadratic)
        };
        let cubic = if self.bend_cubic == 0.0 {
            0.0
        } else {
            rng.random_range(-self.bend_cubic..self.bend_cubic)
        };
        (scales, quad, cubic)
    }
}

fn deform_mesh(template: &TriMesh, scales: [f64; 3], quad: f64, cubic: f64) -> TriMesh {
    let mut out = template.clone();
    for v in &mut out.vertices {
        let z = scales[2] * v[2];
        v[0] *= scales[0];
        v[1] = scales[1] * v[1] + quad * z * z + cubic * z * z * z;
        v[2] = z;
    }
    out
}

/// A rendered dataset plus everything needed to score a fit against it.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub views: Vec<Instance>,
    /// views[i] observes meshes[groups[i]].
    pub groups: Vec<usize>,
    pub cameras: Vec<WeakPerspectiveCamera>,
    pub meshes: Vec<TriMesh>,
    pub canonical_keypoints: Vec<[f64; 3]>,
    /// Template vertex index behind each keypoint.
    pub keypoint_vertices: Vec<usize>,
}

/// Renders `n_instances` random deformations of the template under random
/// cameras, `n_views` each. Images are shaded by sphere coordinate, masks
/// come from hard coverage, and keypoint annotations carry occlusion-aware
/// visibility. The same seed always reproduces the same bytes.
pub fn generate_synthetic(
    template: &TriMesh,
    n_instances: usize,
    n_views: usize,
    height: usize,
    width: usize,
    spec: &DeformSpec,
    seed: u64,
) -> Result<SyntheticSet> {
    template.validate()?;
    spec.validate()?;
    if n_instances == 0 || n_views == 0 {
        return Err(Error::Argument("synthetic: need at least one instance and view".into()));
    }
    if height < 16 || width < 16 {
        return Err(Error::Argument(format!(
            "synthetic: images below 16x16 leave no room for a silhouette, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let meshes: Vec<TriMesh> = (0..n_instances)
        .map(|_| {
            let (scales, quad, cubic) = spec.sample(&mut rng);
            deform_mesh(template, scales, quad, cubic)
        })
        .collect();

    let kp_count = SYNTH_KEYPOINTS.min(template.vertices.len());
    let keypoint_vertices = choose_distinct(template.vertices.len(), kp_count, &mut rng);
    let canonical_keypoints: Vec<[f64; 3]> =
        keypoint_vertices.iter().map(|&i| template.sphere_coords[i]).collect();

    let raster = SoftRasterConfig::for_size(height, width)?;
    let half = 0.5 * (height.min(width)) as f64;

    let mut views = Vec::with_capacity(n_instances * n_views);
    let mut groups = Vec::with_capacity(n_instances * n_views);
    let mut cameras = Vec::with_capacity(n_instances * n_views);

    for i in 0..n_instances {
        let mesh = &meshes[i];
        let radius = mesh
            .vertices
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0_f64, f64::max);
        if radius <= 0.0 {
            return Err(Error::Geometry("synthetic: degenerate instance mesh".into()));
        }
        for v in 0..n_views {
            let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
            // Elevations stay in a positive band. A mirror-symmetric shape
            // seen under weak perspective has an exact silhouette impostor
            // at the negated elevation, so synthetic ground truth keeps a
            // margin from the equator where the two would meet.
            let elevation = rng.random_range(0.15..0.45);
            let spin = quat_from_axis_angle([0.0, 1.0, 0.0], azimuth);
            let tilt = quat_from_axis_angle([1.0, 0.0, 0.0], elevation);
            let rot = quat_normalize(quat_mul(tilt, spin));
            let scale = 0.6 * half / radius * rng.random_range(0.9..1.1);
            let tx = width as f64 * 0.5 + rng.random_range(-0.08 * half..0.08 * half);
            let ty = height as f64 * 0.5 + rng.random_range(-0.08 * half..0.08 * half);
            let cam = WeakPerspectiveCamera::new(scale, [tx, ty], rot)?;

            let mut buf = rasterize_surface_coords(mesh, &cam, &raster)?;
            shade_buffers(&mut buf, |u| {
                [0.5 * (u[0] + 1.0), 0.5 * (u[1] + 1.0), 0.5 * (u[2] + 1.0)]
            });
            let mask = buf.mask_bits();
            if !mask.iter().any(|&b| b) {
                return Err(Error::Geometry(format!(
                    "synthetic: instance {i} view {v} projected outside the image"
                )));
            }

            let mut observed = Vec::with_capacity(kp_count);
            let mut visible = Vec::with_capacity(kp_count);
            for &vi in &keypoint_vertices {
                let p = mesh.vertices[vi];
                let xy = cam.project(p);
                let z = cam.rotate(p)[2];
                observed.push(xy);
                let col = xy[0].floor();
                let row = xy[1].floor();
                let in_bounds =
                    col >= 0.0 && row >= 0.0 && (col as usize) < width && (row as usize) < height;
                let vis = in_bounds && {
                    let px = row as usize * width + col as usize;
                    // Visible means the surface the pixel sees is this very
                    // point, up to a small depth slack for interpolation.
                    buf.valid[px] && z >= buf.depth[px] - 0.05 * radius * scale.max(1.0) / scale
                };
                visible.push(vis);
            }

            views.push(Instance {
                id: format!("inst{i:02}_view{v:02}"),
                height,
                width,
                image: buf.color,
                mask,
                keypoints: Some(KeypointSet {
                    canonical: canonical_keypoints.clone(),
                    observed,
                    visible,
                }),
            });
            groups.push(i);
            cameras.push(cam);
        }
    }

    Ok(SyntheticSet { views, groups, cameras, meshes, canonical_keypoints, keypoint_vertices })
}

/// First `k` entries of a seeded partial shuffle of 0..n.
fn choose_distinct(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for j in 0..k.min(n) {
        let r = rng.random_range(j..n);
        idx.swap(j, r);
    }
    idx.truncate(k.min(n));
    idx
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for j in (1..order.len()).rev() {
        let r = rng.random_range(0..=j);
        order.swap(j, r);
    }
}

fn subsample<T: Copy>(items: &[T], cap: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    let picked = choose_distinct(items.len(), cap, rng);
    picked.into_iter().map(|i| items[i]).collect()
}

fn argmin_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Everything a finished (or checkpointed) fit owns. Optimizer moments are
/// deliberately not part of it; a resumed fit restarts them.
#[derive(Debug, Clone)]
pub struct FitState {
    pub shape: ShapeSpace,
    pub texture: TextureSpace,
    /// Instance ids of the fitted views, in view order.
    pub ids: Vec<String>,
    /// Per-group shape latents.
    pub z_shape: Vec<Vec<f64>>,
    pub z_texture: Vec<Vec<f64>>,
    /// Per-view camera hypotheses; a single survivor after pruning.
    pub cameras: Vec<CameraHypothesisSet>,
    pub maps: Vec<PixelSurfaceMap>,
    /// views[i] shares latents z_*[groups[i]].
    pub groups: Vec<usize>,
}

impl FitState {
    pub fn group_count(&self) -> usize {
        self.z_shape.len()
    }

    pub fn view_index(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|i| i == id)
            .ok_or_else(|| Error::Argument(format!("fit state: no view named '{id}'")))
    }

    /// Highest-probability hypothesis of a view; ties keep the first.
    pub fn best_camera(&self, view: usize) -> Result<&WeakPerspectiveCamera> {
        let set = self
            .cameras
            .get(view)
            .ok_or_else(|| Error::Argument(format!("fit state: no view {view}")))?;
        let mut best = 0;
        for (i, &l) in set.logits.iter().enumerate() {
            if l > set.logits[best] {
                best = i;
            }
        }
        Ok(&set.cameras[best])
    }

    pub fn group_mesh(&self, group: usize, atlas: &SphereAtlas) -> Result<TriMesh> {
        let z = self
            .z_shape
            .get(group)
            .ok_or_else(|| Error::Argument(format!("fit state: no group {group}")))?;
        extract_mesh(&self.shape, z, atlas)
    }

    pub fn view_mesh(&self, view: usize, atlas: &SphereAtlas) -> Result<TriMesh> {
        let g = *self
            .groups
            .get(view)
            .ok_or_else(|| Error::Argument(format!("fit state: no view {view}")))?;
        self.group_mesh(g, atlas)
    }
}

/// Per-epoch mean of each loss component, NaN where a component was not
/// evaluated that epoch.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub iteration: usize,
    pub total: f64,
    pub mask: f64,
    pub boundary: f64,
    pub gcc: f64,
    pub kp: f64,
    pub rigid: f64,
    pub tex: f64,
    pub texfg: f64,
}

impl TraceRow {
    fn values(&self) -> [f64; 8] {
        [self.total, self.mask, self.boundary, self.gcc, self.kp, self.rigid, self.tex, self.texfg]
    }
}

/// CSV dump of a fit trace; unevaluated cells are left empty.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iteration,total,mask,boundary,gcc,kp,rigid,tex,texfg\n");
    for row in rows {
        out.push_str(&row.iteration.to_string());
        for v in row.values() {
            out.push(',');
            if v.is_finite() {
                out.push_str(&format!("{v}"));
            }
        }
        out.push('\n');
    }
    out
}

pub struct FitOutcome {
    pub state: FitState,
    pub trace: Vec<TraceRow>,
}

/// Fits a single view. With `train_spaces` false the shared networks are
/// frozen and only the latents, cameras and the surface map move, which is
/// the test-time mode; the deformation gate does not apply there.
pub fn fit_instance(
    instance: &Instance,
    shape: &ShapeSpace,
    texture: &TextureSpace,
    train_spaces: bool,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    Engine::new(std::slice::from_ref(instance), vec![0], shape.clone(), texture.clone(), train_spaces, cfg)?
        .run()
}

/// Joint fit over a collection. `groups` maps each view to its instance;
/// by default every view is its own instance.
pub fn fit_collection(
    views: &[Instance],
    groups: Option<&[usize]>,
    shape: &ShapeSpace,
    texture: &TextureSpace,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    if views.is_empty() {
        return Err(Error::Argument("fit: no views".into()));
    }
    let groups = match groups {
        Some(g) => {
            if g.len() != views.len() {
                return Err(Error::Argument(format!(
                    "fit: {} group ids for {} views",
                    g.len(),
                    views.len()
                )));
            }
            let count = g.iter().max().unwrap() + 1;
            let mut seen = vec![false; count];
            for &id in g {
                seen[id] = true;
            }
            if seen.iter().any(|&s| !s) {
                return Err(Error::Argument(
                    "fit: group ids must cover 0..max without holes".into(),
                ));
            }
            g.to_vec()
        }
        None => (0..views.len()).collect(),
    };
    Engine::new(views, groups, shape.clone(), texture.clone(), true, cfg)?.run()
}

/// Per-view constants derived from an instance once, before the loop.
struct ViewData {
    mask: Tensor,
    image: Tensor,
    field: DistanceField,
    boundary: Vec<[f64; 2]>,
    fg: Vec<[f64; 2]>,
    raster: SoftRasterConfig,
}

struct NetGrads {
    mean: Vec<Vec<f64>>,
    deform: Vec<Vec<f64>>,
    flow: Vec<Vec<f64>>,
}

/// Loss components of the pass, already plain numbers, for the trace.
struct PassRecord {
    total: f64,
    parts: [Option<f64>; 7],
}

#[derive(Default)]
struct RowAcc {
    total: f64,
    count: usize,
    sums: [f64; 7],
    counts: [usize; 7],
}

impl RowAcc {
    fn add(&mut self, rec: &PassRecord) {
        self.total += rec.total;
        self.count += 1;
        for (i, p) in rec.parts.iter().enumerate() {
            if let Some(v) = p {
                self.sums[i] += v;
                self.counts[i] += 1;
            }
        }
    }

    fn finish(&self, iteration: usize) -> TraceRow {
        let mean = |i: usize| {
            if self.counts[i] == 0 {
                f64::NAN
            } else {
                self.sums[i] / self.counts[i] as f64
            }
        };
        TraceRow {
            iteration,
            total: self.total / self.count.max(1) as f64,
            mask: mean(0),
            boundary: mean(1),
            gcc: mean(2),
            kp: mean(3),
            rigid: mean(4),
            tex: mean(5),
            texfg: mean(6),
        }
    }
}

struct Engine<'a> {
    views: &'a [Instance],
    groups: Vec<usize>,
    cfg: &'a FitConfig,
    train_nets: bool,
    gate: usize,

    u_atlas: Tensor,
    faces: Vec<[usize; 3]>,
    samples: Vec<[f64; 3]>,
    edges: Vec<[usize; 2]>,
    data: Vec<ViewData>,
    shape: ShapeSpace,
    texture: TextureSpace,
    z_shape: Vec<Vec<f64>>,
    z_texture: Vec<Vec<f64>>,
    cameras: Vec<CameraHypothesisSet>,
    maps: Vec<PixelSurfaceMap>,
    opt_nets: Adam,
    opt_texture: Adam,
    opt_latents: Adam,
    opt_cameras: Adam,
    opt_maps: Adam,
    m_mean: Vec<AdamState>,
    m_deform: Vec<AdamState>,
    m_flow: Vec<AdamState>,
    m_z_shape: Vec<AdamState>,
    m_z_texture: Vec<AdamState>,
    m_scale: Vec<Vec<AdamState>>,
    m_trans: Vec<Vec<AdamState>>,
    m_rot: Vec<Vec<AdamState>>,
    m_logits: Vec<AdamState>,
    m_maps: Vec<AdamState>,
}

impl<'a> Engine<'a> {
    fn new(
        views: &'a [Instance],
        groups: Vec<usize>,
        shape: ShapeSpace,
        texture: TextureSpace,
        train_nets: bool,
        cfg: &'a FitConfig,
    ) -> Result<Engine<'a>> {
        cfg.validate()?;
        for inst in views {
            inst.validate()?;
        }
        shape.mean_net.validate()?;
        shape.deform_net.validate()?;
        if shape.latent_dim == 0 || texture.latent_dim == 0 {
            return Err(Error::Argument("fit: latent dimensions must be positive".into()));
        }

        let atlas = icosphere(cfg.atlas_level)?;
        let u_atlas = Tensor::from_rows(atlas.samples());
        let faces = atlas.faces().to_vec();
        let samples = atlas.samples().to_vec();
        let edges = atlas_edges(&atlas);

        let data: Vec<ViewData> = views
            .iter()
            .map(|inst| {
                let floats: Vec<f64> =
                    inst.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                Ok(ViewData {
                    mask: Tensor::from_vec(floats, &[inst.height, inst.width])?,
                    image: Tensor::from_vec(
                        inst.image.clone(),
                        &[inst.height, inst.width, 3],
                    )?,
                    field: distance_field(&inst.mask, inst.height, inst.width)?,
                    boundary: boundary_pixels(&inst.mask, inst.height, inst.width)?,
                    fg: inst.fg_pixels(),
                    raster: SoftRasterConfig::for_size(inst.height, inst.width)?,
                })
            })
            .collect::<Result<_>>()?;

        // Scale hypotheses so the mean shape's silhouette roughly covers the
        // observed foreground, and center them on it.
        let mean_radius = {
            let vars = ShapeVars::constant(&shape);
            let pts = shape::eval_mean(&vars, &u_atlas)?;
            let d = pts.data();
            let n = pts.shape()[0];
            let mut acc = 0.0;
            for r in 0..n {
                let (x, y, z) = (d[3 * r], d[3 * r + 1], d[3 * r + 2]);
                acc += (x * x + y * y + z * z).sqrt();
            }
            (acc / n as f64).max(1e-6)
        };
        let cameras: Vec<CameraHypothesisSet> = views
            .iter()
            .map(|inst| {
                let fg_count = inst.mask.iter().filter(|&&b| b).count() as f64;
                let r_mask = (fg_count / std::f64::consts::PI).sqrt();
                let scale = (r_mask / mean_radius).max(MIN_CAMERA_SCALE);
                let mut cx = 0.0;
                let mut cy = 0.0;
                for (i, &b) in inst.mask.iter().enumerate() {
                    if b {
                        cx += (i % inst.width) as f64 + 0.5;
                        cy += (i / inst.width) as f64 + 0.5;
                    }
                }
                CameraHypothesisSet::azimuth_ring(
                    cfg.hypotheses,
                    cfg.hypothesis_elevation,
                    scale,
                    [cx / fg_count, cy / fg_count],
                )
            })
            .collect::<Result<_>>()?;

        let group_count = groups.iter().max().map_or(0, |m| m + 1);
        let maps: Vec<PixelSurfaceMap> = views
            .iter()
            .enumerate()
            .map(|(v, _)| PixelSurfaceMap::init(cfg.map_size, cfg.map_size, cfg.seed ^ v as u64))
            .collect::<Result<_>>()?;

        let mut engine = Engine {
            views,
            cfg,
            train_nets,
            gate: cfg.delta_gate(),
            u_atlas,
            faces,
            samples,
            edges,
            data,
            z_shape: vec![vec![0.0; shape.latent_dim]; group_count],
            z_texture: vec![vec![0.0; texture.latent_dim]; group_count],
            maps,
            opt_nets: Adam::new(cfg.lr_nets),
            opt_texture: Adam::new(cfg.lr_texture),
            opt_latents: Adam::new(cfg.lr_latents),
            opt_cameras: Adam::new(cfg.lr_cameras),
            opt_maps: Adam::new(cfg.lr_maps),
            m_mean: net_states(&shape.mean_net),
            m_deform: net_states(&shape.deform_net),
            m_flow: net_states(&texture.flow_net),
            m_z_shape: (0..group_count).map(|_| AdamState::new(shape.latent_dim)).collect(),
            m_z_texture: (0..group_count).map(|_| AdamState::new(texture.latent_dim)).collect(),
            m_scale: cameras.iter().map(|s| states(s.cameras.len(), 1)).collect(),
            m_trans: cameras.iter().map(|s| states(s.cameras.len(), 2)).collect(),
            m_rot: cameras.iter().map(|s| states(s.cameras.len(), 4)).collect(),
            m_logits: cameras.iter().map(|s| AdamState::new(s.cameras.len())).collect(),
            m_maps: (0..views.len())
                .map(|_| AdamState::new(cfg.map_size * cfg.map_size * 3))
                .collect(),
            cameras,

            groups,
            shape,
            texture,
        };
        engine.maps.iter_mut().try_for_each(|m| m.validate())?;
        Ok(engine)
    }

    fn run(mut self) -> Result<FitOutcome> {
        let n = self.views.len();
        let mut trace = Vec::with_capacity(self.cfg.iterations);
        let mut order_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x6f72_6465_7268_6173);
        for it in 0..self.cfg.iterations {
            if it == self.cfg.prune_after {
                self.prune(it)?;
            }
            let mut order: Vec<usize> = (0..n).collect();
            shuffle(&mut order, &mut order_rng);
            let mut acc: Vec<Option<NetGrads>> = (0..n).map(|_| None).collect();
            let mut row = RowAcc::default();
            for &v in &order {
                let (rec, net) = self.view_pass(v, it)?;
                row.add(&rec);
                acc[v] = net;
            }
            if self.train_nets {
                self.step_nets(acc)?;
            }
            trace.push(row.finish(it));
        }
        let state = FitState {
            shape: self.shape,
            texture: self.texture,
            ids: self.views.iter().map(|v| v.id.clone()).collect(),
            z_shape: self.z_shape,
            z_texture: self.z_texture,
            cameras: self.cameras,
            maps: self.maps,
            groups: self.groups,
        };
        Ok(FitOutcome { state, trace })
    }

    /// One optimization pass over one view: forward through every camera
    /// hypothesis, expected loss over hypotheses, backward, and immediate
    /// steps on everything except the shared networks (those accumulate
    /// across the epoch). Sampling is seeded by (seed, iteration, view) so
    /// the visit order never changes what a pass computes.
    fn view_pass(&mut self, v: usize, it: usize) -> Result<(PassRecord, Option<NetGrads>)> {
        let cfg = self.cfg;
        let w = &cfg.weights;
        let g = self.groups[v];
        let gate_open = !self.train_nets || it >= self.gate;
        let pruned = self.cameras[v].cameras.len() == 1;
        let tex_on = pruned && (w.w_tex > 0.0 || w.w_texfg > 0.0);
        let latent = self.shape.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed
                ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(it as u64 + 1)
                ^ 0xd1b5_4a32_d192_ed03u64.wrapping_mul(v as u64 + 1),
        );

        let tape = Tape::new();
        let svars = ShapeVars {
            mean: if self.train_nets {
                self.shape.mean_net.tracked(&tape)?
            } else {
                self.shape.mean_net.constants()
            },
            deform: if self.train_nets && gate_open {
                self.shape.deform_net.tracked(&tape)?
            } else {
                self.shape.deform_net.constants()
            },
            latent_dim: latent,
        };
        // Before the gate the latent is pinned at zero and nothing flows
        // into the deformation head; a fresh head keeps its output at zero
        // there, so early epochs see the shared mean alone.
        let z_s = if gate_open {
            tape.var(self.z_shape[g].clone(), &[latent])?
        } else {
            Tensor::zeros(&[latent])
        };

        let tex_vars: Option<(TextureVars, Tensor)> = if tex_on {
            let flow = if self.train_nets {
                self.texture.flow_net.tracked(&tape)?
            } else {
                self.texture.flow_net.constants()
            };
            let zt = tape.var(self.z_texture[g].clone(), &[self.texture.latent_dim])?;
            Some((TextureVars { flow, latent_dim: self.texture.latent_dim }, zt))
        } else {
            None
        };

        let d = &self.data[v];
        let inst = &self.views[v];
        let k_count = self.cameras[v].cameras.len();
        let logits_t = tape.var(self.cameras[v].logits.clone(), &[k_count])?;
        let cam_vars: Vec<CameraVars> = self.cameras[v]
            .cameras
            .iter()
            .map(|c| CameraVars::tracked(&tape, c))
            .collect::<Result<_>>()?;

        // Geometry shared by every hypothesis.
        let verts3 = shape::eval_shape(&svars, &self.u_atlas, &z_s)?;
        let rigid = if w.w_rigid > 0.0 {
            let mean_pts = shape::eval_mean(&svars, &self.u_atlas)?;
            Some(rigidity_gap(&verts3, &mean_pts, &self.edges)?)
        } else {
            None
        };
        let boundary_geom = if w.w_boundary > 0.0 {
            let u_b = Tensor::from_rows(&sample_sphere(cfg.boundary_sample_count, &mut rng));
            let p3 = shape::eval_shape(&svars, &u_b, &z_s)?;
            let px = subsample(&d.boundary, cfg.boundary_pixel_cap, &mut rng);
            Some((p3, px))
        } else {
            None
        };
        let grid = if w.w_gcc > 0.0 { Some(self.maps[v].tracked(&tape)?) } else { None };
        let gcc_geom = if let Some(grid_t) = &grid {
            let px = subsample(&d.fg, cfg.gcc_pixel_cap, &mut rng);
            let px_t = Tensor::from_rows(&px);
            let u = crate::surface_map::sample_map(grid_t, &px_t, inst.height, inst.width)?;
            let surf = shape::eval_shape(&svars, &u, &z_s)?;
            Some((surf, px_t))
        } else {
            None
        };
        let texfg = match (&tex_vars, w.w_texfg > 0.0) {
            (Some((tv, zt)), true) => {
                let u_fg = Tensor::from_rows(&sample_sphere(TEXFG_SAMPLES, &mut rng));
                Some(loss_texture_fg(tv, zt, &u_fg, &d.field)?)
            }
            _ => None,
        };

        // Camera-dependent terms, one bundle per hypothesis.
        let per_cam_weights = LossWeights { w_rigid: 0.0, w_texfg: 0.0, ..w.clone() };
        let mut hyp_losses = Vec::with_capacity(k_count);
        let mut hyp_parts: Vec<LossComponents> = Vec::with_capacity(k_count);
        for cam in &cam_vars {
            let mut parts = LossComponents::default();
            let rotated = cam.rotate_points(&verts3)?;
            let proj = cam.project_rotated(&rotated)?;
            let depth: Vec<f64> = rotated.data().iter().skip(2).step_by(3).copied().collect();
            if w.w_mask > 0.0 {
                let rendered = rasterize_mask_t(&proj, &depth, &self.faces, &d.raster)?;
                parts.mask = Some(loss_mask(&rendered, &d.mask)?);
            }
            if let Some((p3, px)) = &boundary_geom {
                parts.boundary = Some(loss_boundary(p3, cam, &d.field, px)?);
            }
            if let Some((surf, px_t)) = &gcc_geom {
                let reproj = cam.project_points(surf)?;
                parts.gcc = Some(reproj.sub(px_t)?.l2norm_rows()?.mean()?);
            }
            if w.w_kp > 0.0 {
                if let Some(kps) = &inst.keypoints {
                    if kps.visible_count() > 0 {
                        parts.kp = Some(loss_kp(kps, &svars, &z_s, cam)?);
                    }
                }
            }
            if let (Some((tv, zt)), true) = (&tex_vars, w.w_tex > 0.0) {
                let pd = proj.data();
                let v2: Vec<[f64; 2]> =
                    (0..pd.len() / 2).map(|i| [pd[2 * i], pd[2 * i + 1]]).collect();
                let shade = texture_at(tv, zt, &d.image);
                let color =
                    rasterize_color_t(&v2, &depth, &self.faces, &self.samples, shade, &d.raster)?;
                parts.tex = Some(loss_texture(&color, &d.image, &d.mask)?);
            }
            hyp_losses.push(total_loss(&parts, &per_cam_weights)?);
            hyp_parts.push(parts);
        }

        let expected = expected_loss_t(&logits_t, &hyp_losses)?;
        let mut total = expected;
        if let Some(r) = &rigid {
            total = total.add(&r.scale(w.w_rigid)?)?;
        }
        if let Some(t) = &texfg {
            total = total.add(&t.scale(w.w_texfg)?)?;
        }
        let total_value = total.item();
        if !total_value.is_finite() {
            return Err(Error::Numeric(format!(
                "fit: non-finite loss at iteration {it} on view '{}'",
                inst.id
            )));
        }

        let grads = tape.backward(&total)?;

        // The trace reports the currently favored hypothesis.
        let fav = {
            let logits = &self.cameras[v].logits;
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best
        };
        let item_of = |t: &Option<Tensor>| t.as_ref().map(|x| x.item());
        let rec = PassRecord {
            total: total_value,
            parts: [
                item_of(&hyp_parts[fav].mask),
                item_of(&hyp_parts[fav].boundary),
                item_of(&hyp_parts[fav].gcc),
                item_of(&hyp_parts[fav].kp),
                item_of(&rigid),
                item_of(&hyp_parts[fav].tex),
                item_of(&texfg),
            ],
        };

        // Immediate steps for everything owned by this view or group.
        if gate_open && z_s.shape() == [latent] && grads.slot(&z_s).is_some() {
            let gz = grads.wrt(&z_s);
            self.opt_latents.step(&mut self.m_z_shape[g], &mut self.z_shape[g], gz.data())?;
        }
        if let Some((_, zt)) = &tex_vars {
            let gz = grads.wrt(zt);
            self.opt_latents.step(&mut self.m_z_texture[g], &mut self.z_texture[g], gz.data())?;
        }
        if let Some(grid_t) = &grid {
            let gm = grads.wrt(grid_t);
            self.opt_maps.step(&mut self.m_maps[v], self.maps[v].buffer_mut(), gm.data())?;
        }
        for (k, cam) in cam_vars.iter().enumerate() {
            let gs = grads.wrt(&cam.scale);
            let gt = grads.wrt(&cam.translation);
            let gr = grads.wrt(&cam.rotation);
            let c = &mut self.cameras[v].cameras[k];
            let mut sbuf = [c.scale];
            self.opt_cameras.step(&mut self.m_scale[v][k], &mut sbuf, gs.data())?;
            c.scale = sbuf[0].max(MIN_CAMERA_SCALE);
            self.opt_cameras.step(&mut self.m_trans[v][k], &mut c.translation, gt.data())?;
            self.opt_cameras.step(&mut self.m_rot[v][k], &mut c.rotation, gr.data())?;
            c.rotation = quat_normalize(c.rotation);
        }
        let gl = grads.wrt(&logits_t);
        self.opt_cameras.step(&mut self.m_logits[v], &mut self.cameras[v].logits, gl.data())?;

        let net = if self.train_nets {
            Some(NetGrads {
                mean: collect_grads(&svars.mean, &grads),
                deform: collect_grads(&svars.deform, &grads),
                flow: match &tex_vars {
                    Some((tv, _)) => collect_grads(&tv.flow, &grads),
                    None => zero_like(&self.texture.flow_net),
                },
            })
        } else {
            None
        };
        Ok((rec, net))
    }

    /// Mean of the per-view network gradients, reduced in view-index order
    /// so the result never depends on the epoch's visit order.
    fn step_nets(&mut self, acc: Vec<Option<NetGrads>>) -> Result<()> {
        let n = acc.len() as f64;
        let mut sum: Option<NetGrads> = None;
        for entry in acc {
            let entry = entry.ok_or_else(|| {
                Error::Contract("fit: a training epoch skipped a view".into())
            })?;
            match &mut sum {
                None => sum = Some(entry),
                Some(s) => {
                    add_into(&mut s.mean, &entry.mean);
                    add_into(&mut s.deform, &entry.deform);
                    add_into(&mut s.flow, &entry.flow);
                }
            }
        }
        let mut sum = sum.expect("fit: empty epoch");
        for group in [&mut sum.mean, &mut sum.deform, &mut sum.flow] {
            for buf in group.iter_mut() {
                for v in buf.iter_mut() {
                    *v /= n;
                }
            }
        }
        for (i, buf) in self.shape.mean_net.buffers_mut().into_iter().enumerate() {
            self.opt_nets.step(&mut self.m_mean[i], buf, &sum.mean[i])?;
        }
        for (i, buf) in self.shape.deform_net.buffers_mut().into_iter().enumerate() {
            self.opt_nets.step(&mut self.m_deform[i], buf, &sum.deform[i])?;
        }
        for (i, buf) in self.texture.flow_net.buffers_mut().into_iter().enumerate() {
            self.opt_texture.step(&mut self.m_flow[i], buf, &sum.flow[i])?;
        }
        Ok(())
    }

    /// Keeps each view's cheapest hypothesis, judged by a fresh forward
    /// pass over the camera-dependent terms with everything frozen.
    fn prune(&mut self, it: usize) -> Result<()> {
        for v in 0..self.views.len() {
            if self.cameras[v].cameras.len() <= 1 {
                continue;
            }
            let losses = self.hypothesis_losses(v, it)?;
            let best = argmin_index(&losses);
            let kept = self.cameras[v].cameras[best].clone();
            self.cameras[v] = CameraHypothesisSet::new(vec![kept], vec![0.0])?;
            self.m_scale[v] = vec![std::mem::replace(&mut self.m_scale[v][best], AdamState::new(1))];
            self.m_trans[v] = vec![std::mem::replace(&mut self.m_trans[v][best], AdamState::new(2))];
            self.m_rot[v] = vec![std::mem::replace(&mut self.m_rot[v][best], AdamState::new(4))];
            self.m_logits[v] = AdamState::new(1);
        }
        Ok(())
    }

    /// Frozen-state geometry loss of every hypothesis of one view.
    fn hypothesis_losses(&mut self, v: usize, it: usize) -> Result<Vec<f64>> {
        let cfg = self.cfg;
        let w = &cfg.weights;
        let g = self.groups[v];
        let d = &self.data[v];
        let inst = &self.views[v];
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_756e_6570_6173u64 ^ (v as u64) << 17);

        let svars = ShapeVars::constant(&self.shape);
        let z_s = Tensor::from_vec(self.z_shape[g].clone(), &[self.shape.latent_dim])?;
        let verts3 = shape::eval_shape(&svars, &self.u_atlas, &z_s)?;
        let boundary_geom = if w.w_boundary > 0.0 {
            let u_b = Tensor::from_rows(&sample_sphere(cfg.boundary_sample_count, &mut rng));
            let p3 = shape::eval_shape(&svars, &u_b, &z_s)?;
            let px = subsample(&d.boundary, cfg.boundary_pixel_cap, &mut rng);
            Some((p3, px))
        } else {
            None
        };
        let gcc_geom = if w.w_gcc > 0.0 {
            let grid_t = self.maps[v].constant();
            let px = subsample(&d.fg, cfg.gcc_pixel_cap, &mut rng);
            let px_t = Tensor::from_rows(&px);
            let u = crate::surface_map::sample_map(&grid_t, &px_t, inst.height, inst.width)?;
            let surf = shape::eval_shape(&svars, &u, &z_s)?;
            Some((surf, px_t))
        } else {
            None
        };
        let per_cam_weights = LossWeights { w_rigid: 0.0, w_texfg: 0.0, ..w.clone() };

        let mut out = Vec::with_capacity(self.cameras[v].cameras.len());
        for c in &self.cameras[v].cameras {
            let cam = CameraVars::constant(c);
            let mut parts = LossComponents::default();
            let rotated = cam.rotate_points(&verts3)?;
            let proj = cam.project_rotated(&rotated)?;
            let depth: Vec<f64> = rotated.data().iter().skip(2).step_by(3).copied().collect();
            if w.w_mask > 0.0 {
                let rendered = rasterize_mask_t(&proj, &depth, &self.faces, &d.raster)?;
                parts.mask = Some(loss_mask(&rendered, &d.mask)?);
            }
            if let Some((p3, px)) = &boundary_geom {
                parts.boundary = Some(loss_boundary(p3, &cam, &d.field, px)?);
            }
            if let Some((surf, px_t)) = &gcc_geom {
                let reproj = cam.project_points(surf)?;
                parts.gcc = Some(reproj.sub(px_t)?.l2norm_rows()?.mean()?);
            }
            if w.w_kp > 0.0 {
                if let Some(kps) = &inst.keypoints {
                    if kps.visible_count() > 0 {
                        parts.kp = Some(loss_kp(kps, &svars, &z_s, &cam)?);
                    }
                }
            }
            let value = total_loss(&parts, &per_cam_weights)?.item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "fit: non-finite hypothesis loss while pruning at iteration {it} on view '{}'",
                    inst.id
                )));
            }
            out.push(value);
        }
        Ok(out)
    }
}

fn states(k: usize, len: usize) -> Vec<AdamState> {
    (0..k).map(|_| AdamState::new(len)).collect()
}

/// One Adam state per parameter buffer, matching `buffers_mut` order.
fn net_states(net: &crate::shape::MlpParams) -> Vec<AdamState> {
    net.layers
        .iter()
        .flat_map(|l| [AdamState::new(l.w.len()), AdamState::new(l.b.len())])
        .collect()
}

fn collect_grads(vars: &MlpVars, grads: &Gradients) -> Vec<Vec<f64>> {
    vars.all().iter().map(|t| grads.wrt(t).data().to_vec()).collect()
}

fn zero_like(net: &crate::shape::MlpParams) -> Vec<Vec<f64>> {
    net.layers
        .iter()
        .flat_map(|l| [vec![0.0; l.w.len()], vec![0.0; l.b.len()]])
        .collect()
}

fn add_into(acc: &mut [Vec<f64>], src: &[Vec<f64>]) {
    for (a, s) in acc.iter_mut().zip(src) {
        for (x, y) in a.iter_mut().zip(s) {
            *x += y;
        }
    }
}

/// Optimizes one view's surface map against a frozen shape and camera and
/// returns the final mean reprojection distance in pixels. This is the
/// map-only refinement mode; nothing else moves.
#[allow(clippy::too_many_arguments)]
pub fn fit_surface_map(
    map: &mut PixelSurfaceMap,
    space: &ShapeSpace,
    z: &[f64],
    cam: &WeakPerspectiveCamera,
    fg: &[[f64; 2]],
    image_h: usize,
    image_w: usize,
    iterations: usize,
    lr: f64,
) -> Result<f64> {
    if fg.is_empty() {
        return Err(Error::Argument("surface map fit: no foreground pixels".into()));
    }
    if z.len() != space.latent_dim {
        return Err(Error::Argument(format!(
            "surface map fit: latent of length {}, space expects {}",
            z.len(),
            space.latent_dim
        )));
    }
    if iterations == 0 || !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Argument("surface map fit: bad iteration count or rate".into()));
    }
    let vars = ShapeVars::constant(space);
    let z_t = Tensor::from_vec(z.to_vec(), &[z.len()])?;
    let cvars = CameraVars::constant(cam);
    let opt = Adam::new(lr);
    let mut state = AdamState::new(map.buffer_mut().len());
    for it in 0..iterations {
        let tape = Tape::new();
        let grid = map.tracked(&tape)?;
        let loss = loss_gcc(&grid, &vars, &z_t, &cvars, fg, image_h, image_w)?;
        if !loss.item().is_finite() {
            return Err(Error::Numeric(format!(
                "surface map fit: non-finite loss at iteration {it}"
            )));
        }
        let grads = tape.backward(&loss)?;
        let g = grads.wrt(&grid);
        opt.step(&mut state, map.buffer_mut(), g.data())?;
    }
    Ok(loss_gcc(&map.constant(), &vars, &z_t, &cvars, fg, image_h, image_w)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::icosphere;
    use crate::shape::ShapeSpace;
    use crate::texture::TextureSpace;

    fn sphere_template(level: usize) -> TriMesh {
        let atlas = icosphere(level).unwrap();
        TriMesh::new(
            atlas.samples().to_vec(),
            atlas.faces().to_vec(),
            atlas.samples().to_vec(),
        )
        .unwrap()
    }

    fn tiny_config() -> FitConfig {
        FitConfig {
            iterations: 3,
            hypotheses: 2,
            prune_after: 1,
            atlas_level: 1,
            map_size: 8,
            gcc_pixel_cap: 24,
            boundary_pixel_cap: 24,
            boundary_sample_count: 32,
            weights: LossWeights::without_keypoints(),
            ..FitConfig::default()
        }
    }

    fn tiny_synth(n_instances: usize, n_views: usize, seed: u64) -> SyntheticSet {
        generate_synthetic(
            &sphere_template(2),
            n_instances,
            n_views,
            24,
            24,
            &DeformSpec::identity(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn config_rejects_nonsense() {
        let mut cfg = FitConfig::default();
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = FitConfig::default();
        cfg.lr_nets = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = FitConfig::default();
        cfg.delta_enable_fraction = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = FitConfig::default();
        cfg.hypotheses = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = FitConfig::default();
        cfg.map_size = 2;
        assert!(cfg.validate().is_err());
        assert!(FitConfig::default().validate().is_ok());
    }

    #[test]
    fn the_gate_opens_at_a_third() {
        let mut cfg = FitConfig::default();
        cfg.iterations = 240;
        cfg.delta_enable_fraction = 0.33;
        assert_eq!(cfg.delta_gate(), 80);
        cfg.delta_enable_fraction = 1.0;
        assert_eq!(cfg.delta_gate(), 240);
        cfg.delta_enable_fraction = 0.0;
        assert_eq!(cfg.delta_gate(), 0);
    }

    #[test]
    fn instances_are_validated() {
        let mut inst = Instance {
            id: "x".into(),
            height: 16,
            width: 16,
            image: vec![0.0; 16 * 16 * 3],
            mask: vec![false; 16 * 16],
            keypoints: None,
        };
        assert!(inst.validate().is_err(), "empty mask must be rejected");
        inst.mask[5] = true;
        assert!(inst.validate().is_ok());
        inst.image.pop();
        assert!(inst.validate().is_err(), "short image buffer must be rejected");
    }

    #[test]
    fn identity_deformation_reproduces_the_template() {
        let template = sphere_template(1);
        let set = generate_synthetic(&template, 2, 1, 24, 24, &DeformSpec::identity(), 7).unwrap();
        for mesh in &set.meshes {
            assert_eq!(mesh.vertices, template.vertices);
            assert_eq!(mesh.faces, template.faces);
        }
    }

    #[test]
    fn deformations_keep_the_mirror_symmetry_plane() {
        // The deformation family touches x only through a scale, so a
        // vertex and its mirror image stay mirror images.
        let template = sphere_template(1);
        let set = generate_synthetic(&template, 3, 1, 24, 24, &DeformSpec::default(), 11).unwrap();
        for mesh in &set.meshes {
            for (v, u) in mesh.vertices.iter().zip(&template.vertices) {
                let mirrored_u = [-u[0], u[1], u[2]];
                // find the template vertex that mirrors u, then check the
                // deformed pair mirrors the same way
                if let Some(j) = template
                    .vertices
                    .iter()
                    .position(|t| t == &mirrored_u)
                {
                    let m = mesh.vertices[j];
                    assert_eq!(m[0], -v[0]);
                    assert_eq!(m[1], v[1]);
                    assert_eq!(m[2], v[2]);
                }
            }
        }
    }

    #[test]
    fn the_same_seed_renders_the_same_dataset() {
        let a = tiny_synth(2, 2, 3);
        let b = tiny_synth(2, 2, 3);
        assert_eq!(a.groups, b.groups);
        for (x, y) in a.views.iter().zip(&b.views) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.mask, y.mask);
            let xb: Vec<u64> = x.image.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.image.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        for (x, y) in a.cameras.iter().zip(&b.cameras) {
            assert_eq!(x.to_array().map(f64::to_bits), y.to_array().map(f64::to_bits));
        }
    }

    #[test]
    fn rendered_masks_match_a_point_in_triangle_oracle() {
        let set = tiny_synth(1, 2, 19);
        for (view, cam) in set.views.iter().zip(&set.cameras) {
            let mesh = &set.meshes[0];
            let projected: Vec<[f64; 2]> =
                mesh.vertices.iter().map(|&p| cam.project(p)).collect();
            for r in 0..view.height {
                for c in 0..view.width {
                    let px = [c as f64 + 0.5, r as f64 + 0.5];
                    let covered = mesh.faces.iter().any(|f| {
                        let (a, b, q) = (projected[f[0]], projected[f[1]], projected[f[2]]);
                        let e0 = cross2(sub2(b, a), sub2(px, a));
                        let e1 = cross2(sub2(q, b), sub2(px, b));
                        let e2 = cross2(sub2(a, q), sub2(px, q));
                        (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0)
                            || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
                    });
                    assert_eq!(
                        view.mask[r * view.width + c],
                        covered,
                        "mask disagrees with the oracle at ({r}, {c}) in {}",
                        view.id
                    );
                }
            }
        }
    }

    fn sub2(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
        [a[0] - b[0], a[1] - b[1]]
    }

    fn cross2(a: [f64; 2], b: [f64; 2]) -> f64 {
        a[0] * b[1] - a[1] * b[0]
    }

    #[test]
    fn keypoints_project_exactly_and_some_are_visible() {
        let set = tiny_synth(1, 3, 23);
        let mut any_visible = false;
        for (view, cam) in set.views.iter().zip(&set.cameras) {
            let kps = view.keypoints.as_ref().unwrap();
            for (j, &vi) in set.keypoint_vertices.iter().enumerate() {
                let expect = cam.project(set.meshes[0].vertices[vi]);
                assert_eq!(kps.observed[j], expect);
                any_visible |= kps.visible[j];
            }
        }
        assert!(any_visible, "three views of a sphere should expose some keypoint");
    }

    #[test]
    fn group_ids_with_holes_are_rejected() {
        let set = tiny_synth(2, 1, 29);
        let shape = ShapeSpace::init(4, 16, 5);
        let texture = TextureSpace::init(4, 16, 6);
        let cfg = tiny_config();
        // two views labeled 0 and 2: group 1 is missing
        let err = fit_collection(&set.views, Some(&[0, 2]), &shape, &texture, &cfg);
        assert!(err.is_err());
        let err = fit_collection(&set.views, Some(&[0]), &shape, &texture, &cfg);
        assert!(err.is_err(), "length mismatch must be rejected");
    }

    #[test]
    fn a_closed_gate_never_touches_the_deformation_head() {
        let set = tiny_synth(2, 1, 31);
        let shape = ShapeSpace::init(4, 16, 5);
        let texture = TextureSpace::init(4, 16, 6);
        let before: Vec<Vec<u64>> = shape
            .deform_net
            .clone()
            .buffers_mut()
            .into_iter()
            .map(|b| b.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut cfg = tiny_config();
        cfg.delta_enable_fraction = 1.0;
        let out =
            fit_collection(&set.views, Some(&set.groups), &shape, &texture, &cfg).unwrap();
        let after: Vec<Vec<u64>> = out
            .state
            .shape
            .deform_net
            .clone()
            .buffers_mut()
            .into_iter()
            .map(|b| b.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after, "deformation head moved before its gate");
        let mean_before: Vec<f64> = shape.mean_net.layers[0].w.clone();
        let mean_after: Vec<f64> = out.state.shape.mean_net.layers[0].w.clone();
        assert_ne!(mean_before, mean_after, "the mean net should have trained");
        for z in &out.state.z_shape {
            assert!(z.iter().all(|&v| v == 0.0), "latents moved before the gate");
        }
    }

    #[test]
    fn an_open_gate_trains_the_deformation_head() {
        let set = tiny_synth(2, 1, 37);
        let shape = ShapeSpace::init(4, 16, 5);
        let texture = TextureSpace::init(4, 16, 6);
        let mut cfg = tiny_config();
        cfg.delta_enable_fraction = 0.0;
        let out =
            fit_collection(&set.views, Some(&set.groups), &shape, &texture, &cfg).unwrap();
        let before: Vec<f64> = shape.deform_net.layers[0].w.clone();
        let after: Vec<f64> = out.state.shape.deform_net.layers[0].w.clone();
        assert_ne!(before, after, "open gate, yet the deformation head is untouched");
    }

    #[test]
    fn fits_are_bit_reproducible() {
        let set = tiny_synth(2, 1, 41);
        let shape = ShapeSpace::init(4, 16, 5);
        let texture = TextureSpace::init(4, 16, 6);
        let cfg = tiny_config();
        let a = fit_collection(&set.views, Some(&set.groups), &shape, &texture, &cfg).unwrap();
        let b = fit_collection(&set.views, Some(&set.groups), &shape, &texture, &cfg).unwrap();
        let ta: Vec<u64> = a.trace.iter().map(|r| r.total.to_bits()).collect();
        let tb: Vec<u64> = b.trace.iter().map(|r| r.total.to_bits()).collect();
        assert_eq!(ta, tb);
        for (x, y) in a.state.z_shape.iter().zip(&b.state.z_shape) {
            let xb: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn pruning_leaves_one_hypothesis_per_view() {
        let set = tiny_synth(1, 2, 43);
        let shape = ShapeSpace::init(4, 16, 5);
        let texture = TextureSpace::init(4, 16, 6);
        let cfg = tiny_config();
        let out = fit_collection(&set.views, Some(&set.groups), &shape, &texture, &cfg).unwrap();
        for set in &out.state.cameras {
            assert_eq!(set.cameras.len(), 1);
            assert_eq!(set.logits.len(), 1);
        }
    }

    #[test]
    fn argmin_breaks_ties_toward_the_first() {
        assert_eq!(argmin_index(&[3.0, 1.0, 1.0, 2.0]), 1);
        assert_eq!(argmin_index(&[0.5]), 0);
    }

    #[test]
    fn a_frozen_space_fit_still_descends() {
        let set = tiny_synth(1, 1, 47);
        let shape = ShapeSpace::init(4, 16, 5);
        let texture = TextureSpace::init(4, 16, 6);
        let mut cfg = tiny_config();
        cfg.iterations = 25;
        cfg.prune_after = 5;
        let out = fit_instance(&set.views[0], &shape, &texture, false, &cfg).unwrap();
        assert_eq!(out.trace.len(), 25);
        let first = out.trace.first().unwrap().total;
        let last = out.trace.last().unwrap().total;
        assert!(last < first, "no descent: {first} -> {last}");
        // frozen means frozen
        let before: Vec<f64> = shape.mean_net.layers[0].w.clone();
        let after: Vec<f64> = out.state.shape.mean_net.layers[0].w.clone();
        assert_eq!(before, after);
    }

    #[test]
    fn the_trace_csv_leaves_gaps_for_skipped_terms() {
        let rows = vec![TraceRow {
            iteration: 0,
            total: 1.5,
            mask: 1.0,
            boundary: f64::NAN,
            gcc: 0.25,
            kp: f64::NAN,
            rigid: 0.0,
            tex: f64::NAN,
            texfg: f64::NAN,
        }];
        let csv = trace_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "iteration,total,mask,boundary,gcc,kp,rigid,tex,texfg");
        assert_eq!(lines.next().unwrap(), "0,1.5,1,,0.25,,0,,");
    }

    #[test]
    fn surface_map_fit_reduces_the_cycle_gap() {
        let set = tiny_synth(1, 1, 53);
        let shape = ShapeSpace::init(4, 16, 5);
        let mut map = PixelSurfaceMap::init(8, 8, 0).unwrap();
        let inst = &set.views[0];
        let fg = inst.fg_pixels();
        let fg = &fg[..fg.len().min(40)];
        let z = vec![0.0; 4];
        let vars = ShapeVars::constant(&shape);
        let z_t = Tensor::from_vec(z.clone(), &[4]).unwrap();
        let cvars = CameraVars::constant(&set.cameras[0]);
        let before = loss_gcc(
            &map.constant(),
            &vars,
            &z_t,
            &cvars,
            fg,
            inst.height,
            inst.width,
        )
        .unwrap()
        .item();
        let after = fit_surface_map(
            &mut map,
            &shape,
            &z,
            &set.cameras[0],
            fg,
            inst.height,
            inst.width,
            30,
            5e-2,
        )
        .unwrap();
        assert!(after < before, "no improvement: {before} -> {after}");
    }

    #[test]
    fn surface_map_fit_rejects_empty_foreground() {
        let shape = ShapeSpace::init(4, 16, 5);
        let mut map = PixelSurfaceMap::init(8, 8, 0).unwrap();
        let err = fit_surface_map(
            &mut map,
            &shape,
            &[0.0; 4],
            &WeakPerspectiveCamera::identity(),
            &[],
            16,
            16,
            5,
            1e-2,
        );
        assert!(err.is_err());
    }
}
