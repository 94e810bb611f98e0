//! Fit quality metrics: keypoint reprojection accuracy, keypoint transfer
//! through the fitted 3D surface, and volumetric overlap against ground
//! truth meshes. Everything here is read-only over a finished fit.

use crate::camera::CameraVars;
use crate::error::{Error, Result};
use crate::geometry::{voxel_iou, voxelize, SphereAtlas, TriMesh};
use crate::pipeline::{FitState, Instance};
use crate::renderer::hard::{rasterize_surface_coords, RenderBuffers};
use crate::renderer::SoftRasterConfig;
use crate::shape::{self, ShapeVars};
use crate::autodiff::Tensor;

/// PCK thresholds are this fraction of max(H, W) unless a caller says
/// otherwise. The normalization basis is restated in every report.
pub const DEFAULT_PCK_FRACTION: f64 = 0.1;

/// A keypoint whose pixel carries no surface sample looks this far around
/// itself for one; past that it counts as a miss.
pub const TRANSFER_FALLBACK_RADIUS: f64 = 5.0;

pub const DEFAULT_IOU_RESOLUTION: usize = 32;

/// One metric over a set of instances (or instance pairs). `mean` is the
/// arithmetic mean of `values` by construction.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metric: String,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Absolute threshold in pixels for PCK metrics, grid resolution for
    /// volumetric overlap.
    pub threshold: f64,
    /// Raw measurements behind the values (keypoints, transfers, voxels
    /// are each their own unit; see `basis`).
    pub count: usize,
    /// Human-readable statement of the normalization used.
    pub basis: String,
}

impl EvalReport {
    pub fn new(
        metric: impl Into<String>,
        labels: Vec<String>,
        values: Vec<f64>,
        threshold: f64,
        count: usize,
        basis: impl Into<String>,
    ) -> Result<EvalReport> {
        if labels.len() != values.len() {
            return Err(Error::Argument(format!(
                "eval report: {} labels for {} values",
                labels.len(),
                values.len()
            )));
        }
        if values.is_empty() {
            return Err(Error::Argument("eval report: no values".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("eval report: non-finite value".into()));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Ok(EvalReport {
            metric: metric.into(),
            labels,
            values,
            mean,
            threshold,
            count,
            basis: basis.into(),
        })
    }

    /// One row per instance plus a trailing mean row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,label,value\n");
        for (label, value) in self.labels.iter().zip(&self.values) {
            out.push_str(&format!("{},{},{}\n", self.metric, label, value));
        }
        out.push_str(&format!("{},mean,{}\n", self.metric, self.mean));
        out
    }

    /// The block printed on stdout after an evaluation run.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "[{}] mean {:.4} over {} values ({} measurements, {})\n",
            self.metric,
            self.mean,
            self.values.len(),
            self.count,
            self.basis
        );
        for (label, value) in self.labels.iter().zip(&self.values) {
            out.push_str(&format!("  {label}: {value:.4}\n"));
        }
        out
    }
}

/// Reprojects canonical keypoint locations through a view's fitted shape
/// and its favored camera.
pub fn reprojected_keypoints(
    state: &FitState,
    view: usize,
    canonical: &[[f64; 3]],
) -> Result<Vec<[f64; 2]>> {
    if canonical.is_empty() {
        return Ok(Vec::new());
    }
    let g = *state
        .groups
        .get(view)
        .ok_or_else(|| Error::Argument(format!("eval: no view {view}")))?;
    let vars = ShapeVars::constant(&state.shape);
    let z = Tensor::from_vec(state.z_shape[g].clone(), &[state.shape.latent_dim])?;
    let u = Tensor::from_rows(canonical);
    let pts = shape::eval_shape(&vars, &u, &z)?;
    let cam = CameraVars::constant(state.best_camera(view)?);
    let proj = cam.project_points(&pts)?;
    let d = proj.data();
    Ok((0..canonical.len()).map(|i| [d[2 * i], d[2 * i + 1]]).collect())
}

/// Percentage of visible keypoints reprojected within
/// `threshold_frac * max(H, W)` of their annotation, per view.
pub fn pck_reproject(
    state: &FitState,
    instances: &[Instance],
    threshold_frac: f64,
) -> Result<EvalReport> {
    check_fraction(threshold_frac)?;
    check_alignment(state, instances)?;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut count = 0usize;
    let mut basis = String::new();
    for (v, inst) in instances.iter().enumerate() {
        let Some(kps) = &inst.keypoints else { continue };
        if kps.visible_count() == 0 {
            continue;
        }
        let norm = threshold_frac * inst.height.max(inst.width) as f64;
        if basis.is_empty() {
            basis = format!(
                "threshold {threshold_frac} * max(H, W) = {norm:.2} px on {}x{}",
                inst.height, inst.width
            );
        }
        let proj = reprojected_keypoints(state, v, &kps.canonical)?;
        let mut hits = 0usize;
        let mut visible = 0usize;
        for (i, ok) in kps.visible.iter().enumerate() {
            if !ok {
                continue;
            }
            visible += 1;
            let dx = proj[i][0] - kps.observed[i][0];
            let dy = proj[i][1] - kps.observed[i][1];
            if (dx * dx + dy * dy).sqrt() <= norm {
                hits += 1;
            }
        }
        count += visible;
        labels.push(inst.id.clone());
        values.push(100.0 * hits as f64 / visible as f64);
    }
    if values.is_empty() {
        return Err(Error::Argument("eval: no view has visible keypoints".into()));
    }
    let threshold = threshold_frac
        * instances.iter().map(|i| i.height.max(i.width)).max().unwrap_or(0) as f64;
    EvalReport::new("pck_reproject", labels, values, threshold, count, basis)
}

/// Hard render of a view's fitted surface coordinates, the substrate for
/// keypoint transfer.
pub fn render_view_coords(
    state: &FitState,
    view: usize,
    atlas: &SphereAtlas,
    height: usize,
    width: usize,
) -> Result<RenderBuffers> {
    let mesh = state.view_mesh(view, atlas)?;
    let cam = state.best_camera(view)?;
    rasterize_surface_coords(&mesh, cam, &SoftRasterConfig::for_size(height, width)?)
}

/// Carries a source keypoint to the target view: read the sphere coordinate
/// under the keypoint's pixel (nearest covered pixel within the fallback
/// radius), then answer the target pixel whose rendered coordinate points
/// the most in the same direction. `None` marks a source pixel with no
/// coverage in reach; callers score it as a miss.
pub fn transfer_keypoints(
    src: &RenderBuffers,
    tgt: &RenderBuffers,
    points: &[[f64; 2]],
) -> Result<Vec<Option<[f64; 2]>>> {
    if !tgt.valid.iter().any(|&v| v) {
        return Err(Error::Geometry("transfer: target render has no coverage".into()));
    }
    let mut out = Vec::with_capacity(points.len());
    for &[x, y] in points {
        let Some(query) = nearest_valid_coord(src, x, y, TRANSFER_FALLBACK_RADIUS) else {
            out.push(None);
            continue;
        };
        if query[0] == 0.0 {
            // on the symmetry plane both mirror images score identically;
            // the row-major scan below picks a stable winner
            log::debug!("transfer: query lies on the symmetry plane");
        }
        let mut best = 0usize;
        let mut best_dot = f64::NEG_INFINITY;
        for (i, &ok) in tgt.valid.iter().enumerate() {
            if !ok {
                continue;
            }
            let u = tgt.surface_coords[i];
            let dot = u[0] * query[0] + u[1] * query[1] + u[2] * query[2];
            if dot > best_dot {
                best_dot = dot;
                best = i;
            }
        }
        let r = best / tgt.width;
        let c = best % tgt.width;
        out.push(Some([c as f64 + 0.5, r as f64 + 0.5]));
    }
    Ok(out)
}

/// Sphere coordinate of the covered pixel nearest to (x, y), or None when
/// none lies within `radius` of it.
fn nearest_valid_coord(buf: &RenderBuffers, x: f64, y: f64, radius: f64) -> Option<[f64; 3]> {
    let reach = radius.ceil() as isize + 1;
    let c0 = x.floor() as isize;
    let r0 = y.floor() as isize;
    let mut best: Option<(f64, [f64; 3])> = None;
    for r in (r0 - reach).max(0)..=(r0 + reach).min(buf.height as isize - 1) {
        for c in (c0 - reach).max(0)..=(c0 + reach).min(buf.width as isize - 1) {
            let i = r as usize * buf.width + c as usize;
            if !buf.valid[i] {
                continue;
            }
            let dx = c as f64 + 0.5 - x;
            let dy = r as f64 + 0.5 - y;
            let d = (dx * dx + dy * dy).sqrt();
            if d <= radius && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, buf.surface_coords[i]));
            }
        }
    }
    best.map(|(_, u)| u)
}

/// Keypoint transfer accuracy over every ordered pair of views that share
/// at least one mutually visible keypoint. A transferred point scores when
/// it lands within `threshold_frac * max(H, W)` of the target annotation;
/// dropped queries score as misses.
pub fn pck_transfer(
    state: &FitState,
    instances: &[Instance],
    atlas: &SphereAtlas,
    threshold_frac: f64,
) -> Result<EvalReport> {
    check_fraction(threshold_frac)?;
    check_alignment(state, instances)?;
    let renders: Vec<Option<RenderBuffers>> = instances
        .iter()
        .enumerate()
        .map(|(v, inst)| match &inst.keypoints {
            Some(kps) if kps.visible_count() > 0 => {
                render_view_coords(state, v, atlas, inst.height, inst.width).map(Some)
            }
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;

    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut count = 0usize;
    let mut basis = String::new();
    for i in 0..instances.len() {
        let (Some(src), Some(src_kps)) = (&renders[i], &instances[i].keypoints) else { continue };
        for j in 0..instances.len() {
            if i == j {
                continue;
            }
            let (Some(tgt), Some(tgt_kps)) = (&renders[j], &instances[j].keypoints) else {
                continue;
            };
            let shared: Vec<usize> = (0..src_kps.canonical.len())
                .filter(|&k| src_kps.visible[k] && tgt_kps.visible[k])
                .collect();
            if shared.is_empty() {
                continue;
            }
            let pts: Vec<[f64; 2]> = shared.iter().map(|&k| src_kps.observed[k]).collect();
            let preds = transfer_keypoints(src, tgt, &pts)?;
            let norm =
                threshold_frac * instances[j].height.max(instances[j].width) as f64;
            if basis.is_empty() {
                basis = format!(
                    "threshold {threshold_frac} * max(H, W) = {norm:.2} px on {}x{}",
                    instances[j].height, instances[j].width
                );
            }
            let mut hits = 0usize;
            for (&k, pred) in shared.iter().zip(&preds) {
                if let Some(p) = pred {
                    let dx = p[0] - tgt_kps.observed[k][0];
                    let dy = p[1] - tgt_kps.observed[k][1];
                    if (dx * dx + dy * dy).sqrt() <= norm {
                        hits += 1;
                    }
                }
            }
            count += shared.len();
            labels.push(format!("{}->{}", instances[i].id, instances[j].id));
            values.push(100.0 * hits as f64 / shared.len() as f64);
        }
    }
    if values.is_empty() {
        return Err(Error::Argument(
            "eval: no ordered pair shares a visible keypoint".into(),
        ));
    }
    let threshold = threshold_frac
        * instances.iter().map(|i| i.height.max(i.width)).max().unwrap_or(0) as f64;
    EvalReport::new("pck_transfer", labels, values, threshold, count, basis)
}

/// Mean voxel overlap between fitted and ground-truth meshes, pair by
/// pair, on a shared grid spanning both. Frames are assumed aligned; no
/// registration happens here.
pub fn reconstruction_iou(
    fit: &[TriMesh],
    gt: &[TriMesh],
    resolution: usize,
) -> Result<EvalReport> {
    if fit.len() != gt.len() {
        return Err(Error::Argument(format!(
            "eval: {} fitted meshes against {} references",
            fit.len(),
            gt.len()
        )));
    }
    if fit.is_empty() {
        return Err(Error::Argument("eval: no meshes".into()));
    }
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (i, (f, g)) in fit.iter().zip(gt).enumerate() {
        let bounds = f.bounds().union(&g.bounds()).padded(0.05);
        let a = voxelize(f, resolution, &bounds)?;
        let b = voxelize(g, resolution, &bounds)?;
        labels.push(format!("inst{i:02}"));
        values.push(voxel_iou(&a, &b)?);
    }
    let count = fit.len();
    EvalReport::new(
        "reconstruction_iou",
        labels,
        values,
        resolution as f64,
        count,
        format!("voxel grid {resolution}^3 in a shared frame, no alignment"),
    )
}

fn check_fraction(frac: f64) -> Result<()> {
    if frac.is_finite() && frac >= 0.0 {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "eval: threshold fraction must be finite and nonnegative, got {frac}"
        )))
    }
}

/// Instances must line up with the fitted views, index by index.
fn check_alignment(state: &FitState, instances: &[Instance]) -> Result<()> {
    if instances.len() != state.groups.len() {
        return Err(Error::Argument(format!(
            "eval: {} instances for a fit over {} views",
            instances.len(),
            state.groups.len()
        )));
    }
    for (v, inst) in instances.iter().enumerate() {
        if state.ids.get(v).is_some_and(|id| *id != inst.id) {
            return Err(Error::Argument(format!(
                "eval: instance {v} is '{}' but the fit saw '{}'",
                inst.id, state.ids[v]
            )));
        }
    }
    Ok(())
}
