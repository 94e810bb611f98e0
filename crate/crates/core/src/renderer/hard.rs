//! Hard z-buffer rasterization. Deliberately not differentiable: these
//! buffers feed evaluation, correspondence transfer and synthetic ground
//! truth, where crisp per-pixel decisions matter more than gradients.

use super::{project_mesh, SoftRasterConfig};
use crate::camera::WeakPerspectiveCamera;
use crate::error::Result;
use crate::geometry::TriMesh;
use crate::math::normalize3;

/// Per-pixel outputs of a render. Row-major, pixel (row, col) at index
/// `row * width + col`; color packs three channels per pixel.
#[derive(Debug, Clone)]
pub struct RenderBuffers {
    pub height: usize,
    pub width: usize,
    /// hard coverage, 0.0 or 1.0
    pub mask: Vec<f64>,
    pub color: Vec<f64>,
    /// unit sphere coordinate of the surface point seen by the pixel
    pub surface_coords: Vec<[f64; 3]>,
    /// whether the pixel saw any surface
    pub valid: Vec<bool>,
    /// camera-frame depth, larger is closer; −inf where invalid
    pub depth: Vec<f64>,
    /// index of the visible face, usize::MAX where invalid
    pub face_id: Vec<usize>,
}

impl RenderBuffers {
    pub fn empty(height: usize, width: usize, background: [f64; 3]) -> RenderBuffers {
        let n = height * width;
        let mut color = Vec::with_capacity(n * 3);
        for _ in 0..n {
            color.extend_from_slice(&background);
        }
        RenderBuffers {
            height,
            width,
            mask: vec![0.0; n],
            color,
            surface_coords: vec![[0.0, 0.0, 0.0]; n],
            valid: vec![false; n],
            depth: vec![f64::NEG_INFINITY; n],
            face_id: vec![usize::MAX; n],
        }
    }

    pub fn mask_bits(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m > 0.5).collect()
    }
}

/// Render surface coordinates, depth and hard mask with a z-buffer.
/// Pixels whose center is covered by no face stay invalid.
pub fn rasterize_surface_coords(
    mesh: &TriMesh,
    cam: &WeakPerspectiveCamera,
    cfg: &SoftRasterConfig,
) -> Result<RenderBuffers> {
    cfg.validate()?;
    mesh.validate()?;
    let (verts, depth) = project_mesh(mesh, cam);
    let mut buf = RenderBuffers::empty(cfg.height, cfg.width, cfg.background);
    for (fi, f) in mesh.faces.iter().enumerate() {
        let (a, b, c) = (verts[f[0]], verts[f[1]], verts[f[2]]);
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if det == 0.0 {
            continue;
        }
        let minx = a[0].min(b[0]).min(c[0]);
        let maxx = a[0].max(b[0]).max(c[0]);
        let miny = a[1].min(b[1]).min(c[1]);
        let maxy = a[1].max(b[1]).max(c[1]);
        let c0 = (minx - 0.5).ceil().max(0.0) as usize;
        let c1 = (maxx - 0.5).floor().min((cfg.width - 1) as f64);
        let r0 = (miny - 0.5).ceil().max(0.0) as usize;
        let r1 = (maxy - 0.5).floor().min((cfg.height - 1) as f64);
        if c1 < c0 as f64 || r1 < r0 as f64 || maxx < 0.0 || maxy < 0.0 {
            continue;
        }
        for row in r0..=(r1 as usize) {
            let py = row as f64 + 0.5;
            for col in c0..=(c1 as usize) {
                let px = col as f64 + 0.5;
                // barycentric weights, orientation-independent via det sign
                let l0 = ((b[0] - px) * (c[1] - py) - (b[1] - py) * (c[0] - px)) / det;
                let l1 = ((c[0] - px) * (a[1] - py) - (c[1] - py) * (a[0] - px)) / det;
                let l2 = 1.0 - l0 - l1;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                let z = l0 * depth[f[0]] + l1 * depth[f[1]] + l2 * depth[f[2]];
                let p = row * cfg.width + col;
                if z > buf.depth[p] {
                    buf.depth[p] = z;
                    buf.mask[p] = 1.0;
                    buf.valid[p] = true;
                    buf.face_id[p] = fi;
                    let sc = [
                        mesh.sphere_coords[f[0]],
                        mesh.sphere_coords[f[1]],
                        mesh.sphere_coords[f[2]],
                    ];
                    buf.surface_coords[p] = normalize3([
                        l0 * sc[0][0] + l1 * sc[1][0] + l2 * sc[2][0],
                        l0 * sc[0][1] + l1 * sc[1][1] + l2 * sc[2][1],
                        l0 * sc[0][2] + l1 * sc[1][2] + l2 * sc[2][2],
                    ]);
                }
            }
        }
    }
    Ok(buf)
}

/// Fill the color plane of hard buffers by shading each visible pixel's
/// surface coordinate.
pub fn shade_buffers(buf: &mut RenderBuffers, shade: impl Fn([f64; 3]) -> [f64; 3]) {
    for p in 0..buf.height * buf.width {
        if buf.valid[p] {
            let c = shade(buf.surface_coords[p]);
            buf.color[p * 3..p * 3 + 3].copy_from_slice(&c);
        }
    }
}
