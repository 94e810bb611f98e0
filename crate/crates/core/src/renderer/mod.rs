//! Differentiable soft rasterization, plus the hard buffers and mask fields
//! the losses and evaluators need.
//!
//! Occupancy of a pixel p is O(p) = 1 − Π_f (1 − σ(ε_f · d²(p, f) / sigma)),
//! with d the screen distance from p to the boundary of projected face f and
//! ε_f = +1 inside / −1 outside. Faces farther than the sigmoid's numeric
//! support are skipped; because 1 − h rounds to exactly 1.0 there, skipping
//! is bit-identical to the full product. Color uses the same coverage terms,
//! sharpened along depth by a softmax with temperature `gamma`, composited
//! over the background with O as alpha. Color gradients flow into the
//! texture function only; mask gradients flow into vertices (and through
//! them, camera and shape).
//!
//! Pixel (row, col) sits at continuous coordinates (col + 0.5, row + 0.5);
//! after the camera rotation, larger z is closer to the viewer.

pub mod field;
pub mod hard;

use crate::autodiff::{CustomOp, Tensor};
use crate::camera::WeakPerspectiveCamera;
use crate::error::{Error, Result};
use crate::geometry::TriMesh;
use crate::math::normalize3;

/// Sigmoid support cutoff: beyond x = 40, 1 − σ(x·...) rounds to 1.0.
const CUTOFF: f64 = 40.0;

#[derive(Debug, Clone)]
pub struct SoftRasterConfig {
    pub height: usize,
    pub width: usize,
    /// Screen-space softness in pixels².
    pub sigma: f64,
    /// Depth-softmax temperature for color aggregation.
    pub gamma: f64,
    pub background: [f64; 3],
}

impl SoftRasterConfig {
    /// Defaults tied to image size: sigma = 1e-4·W², gamma = 1e-4.
    pub fn for_size(height: usize, width: usize) -> Result<SoftRasterConfig> {
        let cfg = SoftRasterConfig {
            height,
            width,
            sigma: 1e-4 * (width * width) as f64,
            gamma: 1e-4,
            background: [0.0, 0.0, 0.0],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Argument(format!(
                "raster config: image {}x{} below 8x8",
                self.height, self.width
            )));
        }
        if !(self.sigma > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::Argument(
                "raster config: sigma and gamma must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Screen-space positions and camera-frame depths of mesh vertices.
pub fn project_mesh(mesh: &TriMesh, cam: &WeakPerspectiveCamera) -> (Vec<[f64; 2]>, Vec<f64>) {
    let mut verts = Vec::with_capacity(mesh.vertices.len());
    let mut depth = Vec::with_capacity(mesh.vertices.len());
    for &v in &mesh.vertices {
        let r = cam.rotate(v);
        verts.push([
            cam.scale * r[0] + cam.translation[0],
            cam.scale * r[1] + cam.translation[1],
        ]);
        depth.push(r[2]);
    }
    (verts, depth)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One (pixel, face) coverage record with everything both the mask backward
/// pass and the color pass need.
struct Contrib {
    pixel: u32,
    face: u32,
    h: f64,
    /// index of the closest edge (vertex pair within the face)
    edge: u8,
    /// parameter of the closest point along that edge
    t: f64,
    /// p − c, pixel minus closest boundary point
    pc: [f64; 2],
    /// +1 inside, −1 outside
    sign: f64,
    /// clamped, renormalized barycentric coordinates
    bary: [f64; 3],
    /// barycentric-interpolated camera-frame depth
    depth: f64,
}

struct RasterScene {
    contribs: Vec<Contrib>,
    prod_nonzero: Vec<f64>,
    zero_count: Vec<u32>,
    occupancy: Vec<f64>,
}

fn point_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64, [f64; 2]) {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
    let pc = [p[0] - c[0], p[1] - c[1]];
    (pc[0] * pc[0] + pc[1] * pc[1], t, pc)
}

fn cross2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Rasterize every face's soft coverage into per-pixel records.
fn collect(
    verts: &[[f64; 2]],
    depth: &[f64],
    faces: &[[usize; 3]],
    cfg: &SoftRasterConfig,
) -> RasterScene {
    let (hh, ww) = (cfg.height, cfg.width);
    let n_px = hh * ww;
    let reach = (CUTOFF * cfg.sigma).sqrt();
    let mut scene = RasterScene {
        contribs: Vec::new(),
        prod_nonzero: vec![1.0; n_px],
        zero_count: vec![0; n_px],
        occupancy: vec![0.0; n_px],
    };
    for (fi, f) in faces.iter().enumerate() {
        let tri = [verts[f[0]], verts[f[1]], verts[f[2]]];
        let zs = [depth[f[0]], depth[f[1]], depth[f[2]]];
        let minx = tri.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min) - reach;
        let maxx = tri.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max) + reach;
        let miny = tri.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min) - reach;
        let maxy = tri.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max) + reach;
        // columns c with c+0.5 in [minx, maxx], rows likewise
        let c0 = (minx - 0.5).ceil().max(0.0) as usize;
        let c1 = ((maxx - 0.5).floor().min((ww - 1) as f64)) as isize;
        let r0 = (miny - 0.5).ceil().max(0.0) as usize;
        let r1 = ((maxy - 0.5).floor().min((hh - 1) as f64)) as isize;
        if c1 < c0 as isize || r1 < r0 as isize || maxx < 0.0 || maxy < 0.0 {
            continue;
        }
        for row in r0..=(r1 as usize) {
            let py = row as f64 + 0.5;
            for col in c0..=(c1 as usize) {
                let px = col as f64 + 0.5;
                let p = [px, py];
                // closest boundary point over the three edges, first wins ties
                let mut best = (f64::INFINITY, 0.0, [0.0, 0.0]);
                let mut edge = 0u8;
                for e in 0..3 {
                    let cand = point_segment(p, tri[e], tri[(e + 1) % 3]);
                    if cand.0 < best.0 {
                        best = cand;
                        edge = e as u8;
                    }
                }
                // inside iff the three edge crosses share a sign
                let w0 = cross2(
                    [tri[1][0] - tri[0][0], tri[1][1] - tri[0][1]],
                    [p[0] - tri[0][0], p[1] - tri[0][1]],
                );
                let w1 = cross2(
                    [tri[2][0] - tri[1][0], tri[2][1] - tri[1][1]],
                    [p[0] - tri[1][0], p[1] - tri[1][1]],
                );
                let w2 = cross2(
                    [tri[0][0] - tri[2][0], tri[0][1] - tri[2][1]],
                    [p[0] - tri[2][0], p[1] - tri[2][1]],
                );
                let inside = (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0)
                    || (w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0);
                let sign = if inside { 1.0 } else { -1.0 };
                let x = sign * best.0 / cfg.sigma;
                if x < -CUTOFF {
                    continue;
                }
                let h = sigmoid(x);
                let pixel = (row * ww + col) as u32;
                let one_minus = 1.0 - h;
                if one_minus == 0.0 {
                    scene.zero_count[pixel as usize] += 1;
                } else {
                    scene.prod_nonzero[pixel as usize] *= one_minus;
                }
                // clamped barycentric for attribute interpolation
                let total = w0 + w1 + w2;
                let mut bary = if total.abs() > 1e-12 {
                    // w0 opposes vertex 2, w1 vertex 0, w2 vertex 1
                    [w1 / total, w2 / total, w0 / total]
                } else {
                    [1.0 / 3.0; 3]
                };
                for b in &mut bary {
                    *b = b.clamp(0.0, 1.0);
                }
                let s: f64 = bary.iter().sum();
                if s > 0.0 {
                    for b in &mut bary {
                        *b /= s;
                    }
                } else {
                    bary = [1.0 / 3.0; 3];
                }
                let z = bary[0] * zs[0] + bary[1] * zs[1] + bary[2] * zs[2];
                scene.contribs.push(Contrib {
                    pixel,
                    face: fi as u32,
                    h,
                    edge,
                    t: best.1,
                    pc: best.2,
                    sign,
                    bary,
                    depth: z,
                });
            }
        }
    }
    for p in 0..n_px {
        scene.occupancy[p] = if scene.zero_count[p] > 0 {
            1.0
        } else {
            1.0 - scene.prod_nonzero[p]
        };
    }
    scene
}

/// Backward state for the occupancy image.
struct SoftMaskOp {
    faces: Vec<[usize; 3]>,
    n_verts: usize,
    sigma: f64,
    contribs: Vec<Contrib>,
    prod_nonzero: Vec<f64>,
    zero_count: Vec<u32>,
}

impl CustomOp for SoftMaskOp {
    fn name(&self) -> &'static str {
        "soft_mask"
    }

    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut dverts = vec![0.0; self.n_verts * 2];
        for c in &self.contribs {
            let gp = g[c.pixel as usize];
            if gp == 0.0 {
                continue;
            }
            let zc = self.zero_count[c.pixel as usize];
            let one_minus = 1.0 - c.h;
            // ∂O/∂h = product of the other faces' (1 − h) factors
            let do_dh = if zc == 0 {
                self.prod_nonzero[c.pixel as usize] / one_minus
            } else if zc == 1 && one_minus == 0.0 {
                self.prod_nonzero[c.pixel as usize]
            } else {
                continue;
            };
            let dh_dx = c.h * (1.0 - c.h);
            if dh_dx == 0.0 {
                continue;
            }
            let dl_dd2 = gp * do_dh * dh_dx * c.sign / self.sigma;
            // d² = |p − c(a, b)|², c on edge (a, b) at parameter t
            let f = self.faces[c.face as usize];
            let ia = f[c.edge as usize];
            let ib = f[(c.edge as usize + 1) % 3];
            let ca = -2.0 * (1.0 - c.t) * dl_dd2;
            let cb = -2.0 * c.t * dl_dd2;
            dverts[ia * 2] += ca * c.pc[0];
            dverts[ia * 2 + 1] += ca * c.pc[1];
            dverts[ib * 2] += cb * c.pc[0];
            dverts[ib * 2 + 1] += cb * c.pc[1];
        }
        vec![Some(dverts)]
    }
}

/// Backward state for the color composite: gradients reach face colors only.
struct ColorScatterOp {
    /// per-contribution normalized weight times pixel occupancy
    weight: Vec<f64>,
    /// pixel index per contribution
    pixel: Vec<u32>,
    n_colors: usize,
}

impl CustomOp for ColorScatterOp {
    fn name(&self) -> &'static str {
        "color_scatter"
    }

    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut dc = vec![0.0; self.n_colors * 3];
        for (m, (&w, &px)) in self.weight.iter().zip(&self.pixel).enumerate() {
            if w == 0.0 {
                continue;
            }
            for ch in 0..3 {
                dc[m * 3 + ch] += w * g[px as usize * 3 + ch];
            }
        }
        vec![Some(dc)]
    }
}

/// Differentiable occupancy image from projected vertices.
/// `verts2d` is (N, 2) screen positions (tracked or constant); gradients
/// propagate to it and through whatever graph produced it.
pub fn rasterize_mask_t(
    verts2d: &Tensor,
    depth: &[f64],
    faces: &[[usize; 3]],
    cfg: &SoftRasterConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if verts2d.shape().len() != 2 || verts2d.shape()[1] != 2 {
        return Err(Error::dim(
            "rasterize_mask",
            format!("expected (N, 2) vertices, got {:?}", verts2d.shape()),
        ));
    }
    let n = verts2d.shape()[0];
    if depth.len() != n {
        return Err(Error::dim(
            "rasterize_mask",
            format!("{} depths for {} vertices", depth.len(), n),
        ));
    }
    for f in faces {
        if f.iter().any(|&v| v >= n) {
            return Err(Error::dim(
                "rasterize_mask",
                format!("face {:?} out of range ({} vertices)", f, n),
            ));
        }
    }
    let rows: Vec<[f64; 2]> = verts2d.data().chunks(2).map(|c| [c[0], c[1]]).collect();
    let scene = collect(&rows, depth, faces, cfg);
    let occupancy = scene.occupancy;
    let op = SoftMaskOp {
        faces: faces.to_vec(),
        n_verts: n,
        sigma: cfg.sigma,
        contribs: scene.contribs,
        prod_nonzero: scene.prod_nonzero,
        zero_count: scene.zero_count,
    };
    Tensor::custom(
        &[verts2d],
        (occupancy, vec![cfg.height, cfg.width]),
        Box::new(op),
    )
}

/// Convenience: occupancy image of a mesh under a camera, untracked.
pub fn rasterize_mask(
    mesh: &TriMesh,
    cam: &WeakPerspectiveCamera,
    cfg: &SoftRasterConfig,
) -> Result<Tensor> {
    mesh.validate()?;
    let (verts, depth) = project_mesh(mesh, cam);
    let v = Tensor::from_rows(&verts);
    rasterize_mask_t(&v, &depth, &mesh.faces, cfg)
}

/// Differentiable textured render. `texture_at` maps a (M, 3) batch of unit
/// sphere points to (M, 3) RGB; its graph is where the gradients go. The
/// screen-space geometry (projected vertices, depths) is treated as fixed.
pub fn rasterize_color_t(
    verts2d: &[[f64; 2]],
    depth: &[f64],
    faces: &[[usize; 3]],
    sphere_coords: &[[f64; 3]],
    texture_at: impl Fn(&Tensor) -> Result<Tensor>,
    cfg: &SoftRasterConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let n_px = cfg.height * cfg.width;
    let mut scene = collect(verts2d, depth, faces, cfg);
    // group contributions by pixel (stable counting sort keeps face order)
    let mut starts = vec![0usize; n_px + 1];
    for c in &scene.contribs {
        starts[c.pixel as usize + 1] += 1;
    }
    for p in 0..n_px {
        let prev = starts[p];
        starts[p + 1] += prev;
    }
    let mut order = vec![0usize; scene.contribs.len()];
    let mut cursor = starts.clone();
    for (i, c) in scene.contribs.iter().enumerate() {
        order[cursor[c.pixel as usize]] = i;
        cursor[c.pixel as usize] += 1;
    }

    let m = scene.contribs.len();
    if m == 0 {
        // empty scene: pure background, no gradient path
        let mut img = Vec::with_capacity(n_px * 3);
        for _ in 0..n_px {
            img.extend_from_slice(&cfg.background);
        }
        return Tensor::from_vec(img, &[cfg.height, cfg.width, 3]);
    }

    // interpolation points for the texture, in grouped order
    let mut us = Vec::with_capacity(m);
    for &i in &order {
        let c = &scene.contribs[i];
        let f = faces[c.face as usize];
        let sc = [sphere_coords[f[0]], sphere_coords[f[1]], sphere_coords[f[2]]];
        let u = normalize3([
            c.bary[0] * sc[0][0] + c.bary[1] * sc[1][0] + c.bary[2] * sc[2][0],
            c.bary[0] * sc[0][1] + c.bary[1] * sc[1][1] + c.bary[2] * sc[2][1],
            c.bary[0] * sc[0][2] + c.bary[1] * sc[1][2] + c.bary[2] * sc[2][2],
        ]);
        us.push(u);
    }
    let colors = texture_at(&Tensor::from_rows(&us))?;
    if colors.shape() != [m, 3] {
        return Err(Error::dim(
            "rasterize_color",
            format!("texture returned {:?}, expected ({m}, 3)", colors.shape()),
        ));
    }

    // per-pixel depth softmax over coverage-weighted contributions
    let mut weight = vec![0.0; m];
    for p in 0..n_px {
        let (s, e) = (starts[p], starts[p + 1]);
        if s == e {
            continue;
        }
        let group = &order[s..e];
        let zmax = group
            .iter()
            .map(|&i| scene.contribs[i].depth)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (k, &i) in group.iter().enumerate() {
            let c = &scene.contribs[i];
            let w = c.h * ((c.depth - zmax) / cfg.gamma).exp();
            weight[s + k] = w;
            total += w;
        }
        if total > 0.0 {
            for w in &mut weight[s..e] {
                *w /= total;
            }
        } else {
            // all terms underflowed: fall back to the closest contribution
            let front = group
                .iter()
                .enumerate()
                .max_by(|a, b| {
                    scene.contribs[*a.1]
                        .depth
                        .total_cmp(&scene.contribs[*b.1].depth)
                })
                .map(|(k, _)| k)
                .unwrap();
            weight[s + front] = 1.0;
        }
        let occ = scene.occupancy[p];
        for w in &mut weight[s..e] {
            *w *= occ;
        }
    }

    // forward composite
    let cd = colors.data();
    let mut img = vec![0.0; n_px * 3];
    for p in 0..n_px {
        let occ = scene.occupancy[p];
        for ch in 0..3 {
            img[p * 3 + ch] = (1.0 - occ) * cfg.background[ch];
        }
        for k in starts[p]..starts[p + 1] {
            for ch in 0..3 {
                img[p * 3 + ch] += weight[k] * cd[k * 3 + ch];
            }
        }
    }

    let pixel: Vec<u32> = order.iter().map(|&i| scene.contribs[i].pixel).collect();
    scene.contribs.clear();
    let op = ColorScatterOp { weight, pixel, n_colors: m };
    Tensor::custom(&[&colors], (img, vec![cfg.height, cfg.width, 3]), Box::new(op))
}

/// Convenience: textured render of a mesh under a camera.
pub fn rasterize_color(
    mesh: &TriMesh,
    cam: &WeakPerspectiveCamera,
    texture_at: impl Fn(&Tensor) -> Result<Tensor>,
    cfg: &SoftRasterConfig,
) -> Result<Tensor> {
    mesh.validate()?;
    let (verts, depth) = project_mesh(mesh, cam);
    rasterize_color_t(
        &verts,
        &depth,
        &mesh.faces,
        &mesh.sphere_coords,
        texture_at,
        cfg,
    )
}
