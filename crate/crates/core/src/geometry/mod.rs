//! Canonical sphere sampling, triangle meshes, voxelization and mesh
//! distance queries.
//!
//! The sphere atlas is a subdivided icosahedron; its vertices are the fixed
//! sample set for every field defined on S², and its 1-ring adjacency is the
//! neighborhood structure used by the rigidity loss.

pub mod obj;

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::*;

/// Fixed sampling of the unit sphere: subdivided icosahedron vertices,
/// triangle faces, and per-vertex 1-ring adjacency.
#[derive(Debug, Clone)]
pub struct SphereAtlas {
    samples: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    adjacency: Vec<Vec<usize>>,
    level: usize,
}

impl SphereAtlas {
    pub fn samples(&self) -> &[[f64; 3]] {
        &self.samples
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// 1-ring of a sample: 5 entries for the 12 original icosahedron
    /// vertices, 6 for every vertex introduced by subdivision.
    pub fn neighborhood(&self, sample_index: usize) -> Result<&[usize]> {
        self.adjacency
            .get(sample_index)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "neighborhood: sample {} out of range ({} samples)",
                    sample_index,
                    self.samples.len()
                ))
            })
    }
}

/// Icosphere atlas at the given subdivision depth.
/// Vertex count is 10·4^level + 2, face count 20·4^level.
pub fn icosphere(level: usize) -> Result<SphereAtlas> {
    if level > 6 {
        return Err(Error::Argument(format!(
            "icosphere: level {level} out of range 0..=6"
        )));
    }
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut samples: Vec<[f64; 3]> = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ]
    .iter()
    .map(|&v| normalize3(v))
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..level {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoint.entry(key).or_insert_with(|| {
                    samples.push(normalize3(scale3(add3(samples[a], samples[b]), 0.5)));
                    samples.len() - 1
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }

    let mut neighbor_sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); samples.len()];
    for f in &faces {
        for e in 0..3 {
            let (a, b) = (f[e], f[(e + 1) % 3]);
            neighbor_sets[a].insert(b);
            neighbor_sets[b].insert(a);
        }
    }
    let adjacency = neighbor_sets.into_iter().map(|s| s.into_iter().collect()).collect();

    Ok(SphereAtlas { samples, faces, adjacency, level })
}

/// Mirror across the X = 0 plane.
pub fn reflect(u: [f64; 3]) -> [f64; 3] {
    [-u[0], u[1], u[2]]
}

/// `n` points drawn uniformly on the unit sphere.
pub fn sample_sphere(n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let len = norm3(v);
        if len > 1e-9 {
            out.push(scale3(v, 1.0 / len));
        }
    }
    out
}

/// Explicit triangle mesh. `sphere_coords[i]` is the canonical sphere point
/// that generated vertex `i` (unit directions of the vertices themselves
/// when the provenance is unknown, e.g. a plain OBJ import).
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub sphere_coords: Vec<[f64; 3]>,
}

impl TriMesh {
    pub fn new(
        vertices: Vec<[f64; 3]>,
        faces: Vec<[usize; 3]>,
        sphere_coords: Vec<[f64; 3]>,
    ) -> Result<TriMesh> {
        let m = TriMesh { vertices, faces, sphere_coords };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sphere_coords.len() != self.vertices.len() {
            return Err(Error::dim(
                "mesh",
                format!(
                    "{} sphere coords for {} vertices",
                    self.sphere_coords.len(),
                    self.vertices.len()
                ),
            ));
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= self.vertices.len()) {
                return Err(Error::dim(
                    "mesh",
                    format!("face {} references a vertex out of range: {:?}", i, f),
                ));
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::of_points(&self.vertices)
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        0.5 * norm3(cross3(
            sub3(self.vertices[b], self.vertices[a]),
            sub3(self.vertices[c], self.vertices[a]),
        ))
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Aabb {
        Aabb { min, max }
    }

    pub fn of_points(pts: &[[f64; 3]]) -> Aabb {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in pts {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        Aabb { min, max }
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for k in 0..3 {
            min[k] = self.min[k].min(other.min[k]);
            max[k] = self.max[k].max(other.max[k]);
        }
        Aabb { min, max }
    }

    /// Grow symmetrically by `frac` of the extent on every axis.
    pub fn padded(&self, frac: f64) -> Aabb {
        let mut min = self.min;
        let mut max = self.max;
        for k in 0..3 {
            let pad = (max[k] - min[k]) * frac;
            min[k] -= pad;
            max[k] += pad;
        }
        Aabb { min, max }
    }

    pub fn extent(&self) -> [f64; 3] {
        sub3(self.max, self.min)
    }

    pub fn diagonal(&self) -> f64 {
        norm3(self.extent())
    }
}

/// Dense boolean occupancy over a box.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    resolution: usize,
    occupancy: Vec<bool>,
    bounds: Aabb,
}

impl VoxelGrid {
    pub fn new(resolution: usize, occupancy: Vec<bool>, bounds: Aabb) -> Result<VoxelGrid> {
        if occupancy.len() != resolution.pow(3) {
            return Err(Error::dim(
                "voxel_grid",
                format!(
                    "occupancy length {} != {}^3",
                    occupancy.len(),
                    resolution
                ),
            ));
        }
        Ok(VoxelGrid { resolution, occupancy, bounds })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> bool {
        self.occupancy[(iz * self.resolution + iy) * self.resolution + ix]
    }

    pub fn count(&self) -> usize {
        self.occupancy.iter().filter(|&&b| b).count()
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }
}

// Sample lines are offset off the lattice so shared triangle edges are never
// hit exactly; crossings then pair up cleanly for any watertight mesh.
const RAY_JITTER_Y: f64 = 3.237e-5;
const RAY_JITTER_Z: f64 = 1.7989e-5;

/// Classify voxel centers as inside/outside by +x ray-crossing parity.
pub fn voxelize(mesh: &TriMesh, resolution: usize, bounds: &Aabb) -> Result<VoxelGrid> {
    if resolution < 8 {
        return Err(Error::Argument(format!(
            "voxelize: resolution {resolution} < 8"
        )));
    }
    mesh.validate()?;
    if mesh.surface_area() <= 1e-12 {
        return Err(Error::Geometry(
            "voxelize: mesh has no positive-area faces".into(),
        ));
    }
    let ext = bounds.extent();
    if ext.iter().any(|&e| e <= 0.0) {
        return Err(Error::Argument("voxelize: empty bounds".into()));
    }
    let res = resolution;
    let rf = res as f64;
    // vertices in voxel units relative to bounds.min
    let vs: Vec<[f64; 3]> = mesh
        .vertices
        .iter()
        .map(|v| {
            [
                (v[0] - bounds.min[0]) / ext[0] * rf,
                (v[1] - bounds.min[1]) / ext[1] * rf,
                (v[2] - bounds.min[2]) / ext[2] * rf,
            ]
        })
        .collect();

    let mut occ = vec![false; res * res * res];
    let mut crossings: Vec<f64> = Vec::new();
    for iz in 0..res {
        let cz = iz as f64 + 0.5 + RAY_JITTER_Z;
        for iy in 0..res {
            let cy = iy as f64 + 0.5 + RAY_JITTER_Y;
            crossings.clear();
            for f in &mesh.faces {
                let (a, b, c) = (vs[f[0]], vs[f[1]], vs[f[2]]);
                let d1 = [b[1] - a[1], b[2] - a[2]];
                let d2 = [c[1] - a[1], c[2] - a[2]];
                let det = d1[0] * d2[1] - d1[1] * d2[0];
                if det.abs() < 1e-18 {
                    continue;
                }
                let py = cy - a[1];
                let pz = cz - a[2];
                let s = (py * d2[1] - pz * d2[0]) / det;
                let t = (d1[0] * pz - d1[1] * py) / det;
                if s >= 0.0 && t >= 0.0 && s + t <= 1.0 {
                    crossings.push(a[0] + s * (b[0] - a[0]) + t * (c[0] - a[0]));
                }
            }
            if crossings.is_empty() {
                continue;
            }
            crossings.sort_by(f64::total_cmp);
            let mut k = 0;
            for ix in 0..res {
                let cx = ix as f64 + 0.5;
                while k < crossings.len() && crossings[k] <= cx {
                    k += 1;
                }
                if (crossings.len() - k) % 2 == 1 {
                    occ[(iz * res + iy) * res + ix] = true;
                }
            }
        }
    }
    Ok(VoxelGrid { resolution: res, occupancy: occ, bounds: bounds.clone() })
}

/// Intersection over union of two grids; 1.0 when both are empty.
pub fn voxel_iou(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    if a.resolution != b.resolution || a.bounds != b.bounds {
        return Err(Error::Argument(
            "voxel_iou: grids have different resolution or bounds".into(),
        ));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.occupancy.iter().zip(&b.occupancy) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Closest point to `p` on triangle (a, b, c).
pub fn closest_point_on_triangle(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let ab = sub3(b, a);
    let ac = sub3(c, a);
    let ap = sub3(p, a);
    let d1 = dot3(ab, ap);
    let d2 = dot3(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub3(p, b);
    let d3 = dot3(ab, bp);
    let d4 = dot3(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return add3(a, scale3(ab, v));
    }
    let cp = sub3(p, c);
    let d5 = dot3(ab, cp);
    let d6 = dot3(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return add3(a, scale3(ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return add3(b, scale3(sub3(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    add3(a, add3(scale3(ab, v), scale3(ac, w)))
}

/// Distance from `p` to the surface of `mesh` (brute force over faces).
pub fn point_mesh_distance(p: [f64; 3], mesh: &TriMesh) -> f64 {
    let mut best = f64::INFINITY;
    for f in &mesh.faces {
        let q = closest_point_on_triangle(
            p,
            mesh.vertices[f[0]],
            mesh.vertices[f[1]],
            mesh.vertices[f[2]],
        );
        best = best.min(dist3(p, q));
    }
    best
}

/// `n` points sampled uniformly by area on the mesh surface.
pub fn sample_surface(mesh: &TriMesh, n: usize, rng: &mut impl Rng) -> Result<Vec<[f64; 3]>> {
    mesh.validate()?;
    let total = mesh.surface_area();
    if total <= 0.0 {
        return Err(Error::Geometry(
            "sample_surface: mesh has no positive-area faces".into(),
        ));
    }
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut acc = 0.0;
    for f in 0..mesh.faces.len() {
        acc += mesh.face_area(f);
        cdf.push(acc);
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.random::<f64>() * total;
        let f = cdf.partition_point(|&c| c < r).min(mesh.faces.len() - 1);
        let [ia, ib, ic] = mesh.faces[f];
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        out.push(add3(
            add3(scale3(mesh.vertices[ia], wa), scale3(mesh.vertices[ib], wb)),
            scale3(mesh.vertices[ic], wc),
        ));
    }
    Ok(out)
}

/// Symmetric surface-to-surface distance: mean distance from samples of one
/// mesh to the other surface, averaged over both directions.
pub fn chamfer_distance(a: &TriMesh, b: &TriMesh, samples_per_side: usize, seed: u64) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let pa = sample_surface(a, samples_per_side, &mut rng)?;
    let pb = sample_surface(b, samples_per_side, &mut rng)?;
    let d_ab: f64 =
        pa.iter().map(|&p| point_mesh_distance(p, b)).sum::<f64>() / pa.len() as f64;
    let d_ba: f64 =
        pb.iter().map(|&p| point_mesh_distance(p, a)).sum::<f64>() / pb.len() as f64;
    Ok(0.5 * (d_ab + d_ba))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn icosphere_counts_and_unit_norm() {
        for level in 0..=3 {
            let atlas = icosphere(level).unwrap();
            assert_eq!(atlas.len(), 10 * 4usize.pow(level as u32) + 2);
            assert_eq!(atlas.faces().len(), 20 * 4usize.pow(level as u32));
            for s in atlas.samples() {
                assert!((norm3(*s) - 1.0).abs() < 1e-9);
            }
            // Euler characteristic of a closed genus-0 surface
            let mut edges = BTreeSet::new();
            for f in atlas.faces() {
                for e in 0..3 {
                    let (a, b) = (f[e], f[(e + 1) % 3]);
                    edges.insert((a.min(b), a.max(b)));
                }
            }
            let euler = atlas.len() as i64 - edges.len() as i64 + atlas.faces().len() as i64;
            assert_eq!(euler, 2);
        }
        assert!(icosphere(7).is_err());
    }

    #[test]
    fn icosphere_valence() {
        let atlas = icosphere(2).unwrap();
        for i in 0..atlas.len() {
            let n = atlas.neighborhood(i).unwrap().len();
            if i < 12 {
                assert_eq!(n, 5, "original vertex {i}");
            } else {
                assert_eq!(n, 6, "subdivision vertex {i}");
            }
        }
        assert!(atlas.neighborhood(atlas.len()).is_err());
    }

    #[test]
    fn adjacency_is_symmetric() {
        let atlas = icosphere(1).unwrap();
        for u in 0..atlas.len() {
            for &v in atlas.neighborhood(u).unwrap() {
                assert!(atlas.neighborhood(v).unwrap().contains(&u));
            }
        }
    }

    #[test]
    fn reflect_basics() {
        assert_eq!(reflect([0.0, 1.0, 0.0]), [0.0, 1.0, 0.0]);
        assert_eq!(reflect([1.0, 2.0, 3.0]), [-1.0, 2.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for v in sample_sphere(100, &mut rng) {
            assert_eq!(reflect(reflect(v)), v);
        }
    }

    fn atlas_mesh(level: usize) -> TriMesh {
        let atlas = icosphere(level).unwrap();
        TriMesh::new(
            atlas.samples().to_vec(),
            atlas.faces().to_vec(),
            atlas.samples().to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn voxelize_sphere_volume() {
        let mesh = atlas_mesh(3);
        let bounds = Aabb::new([-1.0; 3], [1.0; 3]);
        let grid = voxelize(&mesh, 32, &bounds).unwrap();
        let frac = grid.count() as f64 / 32f64.powi(3);
        let expected = std::f64::consts::PI / 6.0;
        assert!(
            (frac - expected).abs() / expected < 0.05,
            "occupancy fraction {frac} vs sphere/box ratio {expected}"
        );
    }

    fn cube_mesh(min: [f64; 3], max: [f64; 3]) -> TriMesh {
        let v = |m: bool, k: usize| if m { max[k] } else { min[k] };
        let vertices: Vec<[f64; 3]> = (0..8)
            .map(|i| [v(i & 1 != 0, 0), v(i & 2 != 0, 1), v(i & 4 != 0, 2)])
            .collect();
        // 12 triangles, outward orientation not required by parity casting
        let faces = vec![
            [0, 2, 1],
            [1, 2, 3],
            [4, 5, 6],
            [5, 7, 6],
            [0, 1, 4],
            [1, 5, 4],
            [2, 6, 3],
            [3, 6, 7],
            [0, 4, 2],
            [2, 4, 6],
            [1, 3, 5],
            [3, 7, 5],
        ];
        let sc = vertices.iter().map(|&p| normalize3(p)).collect();
        TriMesh::new(vertices, faces, sc).unwrap()
    }

    #[test]
    fn voxelize_half_cube_volume() {
        let mesh = cube_mesh([-1.0, -1.0, -1.0], [1.0, 1.0, 0.0]);
        let bounds = Aabb::new([-1.0; 3], [1.0; 3]);
        let res = 16;
        let grid = voxelize(&mesh, res, &bounds).unwrap();
        // analytic volume is half the box; allow one voxel layer of slack
        let expected = res * res * (res / 2);
        let slack = res * res;
        let count = grid.count();
        assert!(
            count + slack >= expected && count <= expected + slack,
            "count {count} expected about {expected}"
        );
    }

    #[test]
    fn voxelize_mesh_outside_bounds_is_empty() {
        let mesh = cube_mesh([10.0, 10.0, 10.0], [11.0, 11.0, 11.0]);
        let bounds = Aabb::new([-1.0; 3], [1.0; 3]);
        let grid = voxelize(&mesh, 8, &bounds).unwrap();
        assert_eq!(grid.count(), 0);
    }

    #[test]
    fn voxelize_rejects_degenerate_and_small_res() {
        let flat = TriMesh::new(
            vec![[0.0; 3], [0.0; 3], [0.0; 3]],
            vec![[0, 1, 2]],
            vec![[0.0, 0.0, 1.0]; 3],
        )
        .unwrap();
        let bounds = Aabb::new([-1.0; 3], [1.0; 3]);
        assert!(matches!(voxelize(&flat, 8, &bounds), Err(Error::Geometry(_))));
        let mesh = atlas_mesh(1);
        assert!(matches!(voxelize(&mesh, 4, &bounds), Err(Error::Argument(_))));
    }

    #[test]
    fn voxelize_translation_parity() {
        let mesh = atlas_mesh(2);
        let bounds = Aabb::new([-1.1; 3], [1.1; 3]);
        let a = voxelize(&mesh, 16, &bounds).unwrap();
        let t = [0.25, -0.5, 1.0];
        let shifted = TriMesh::new(
            mesh.vertices.iter().map(|&v| add3(v, t)).collect(),
            mesh.faces.clone(),
            mesh.sphere_coords.clone(),
        )
        .unwrap();
        let sb = Aabb::new(add3(bounds.min, t), add3(bounds.max, t));
        let b = voxelize(&shifted, 16, &sb).unwrap();
        assert_eq!(a.occupancy(), b.occupancy());
    }

    #[test]
    fn voxel_iou_cases() {
        let bounds = Aabb::new([0.0; 3], [1.0; 3]);
        let grid = |occ: Vec<bool>| VoxelGrid::new(8, occ, bounds.clone()).unwrap();
        let n = 512;
        let a = grid((0..n).map(|i| i < 128).collect());
        assert_eq!(voxel_iou(&a, &a).unwrap(), 1.0);
        let b = grid((0..n).map(|i| (128..256).contains(&i)).collect());
        assert_eq!(voxel_iou(&a, &b).unwrap(), 0.0);
        // half-overlapping equal-size boxes
        let c = grid((0..n).map(|i| (64..192).contains(&i)).collect());
        assert!((voxel_iou(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let empty = grid(vec![false; n]);
        assert_eq!(voxel_iou(&empty, &empty).unwrap(), 1.0);
        // symmetry on pseudo-random grids
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let x = grid((0..n).map(|_| rng.random::<f64>() < 0.4).collect());
            let y = grid((0..n).map(|_| rng.random::<f64>() < 0.4).collect());
            assert_eq!(voxel_iou(&x, &y).unwrap(), voxel_iou(&y, &x).unwrap());
        }
        let other = VoxelGrid::new(8, vec![false; n], Aabb::new([0.0; 3], [2.0; 3])).unwrap();
        assert!(voxel_iou(&a, &other).is_err());
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        // interior projection
        let q = closest_point_on_triangle([0.2, 0.2, 5.0], a, b, c);
        assert!(dist3(q, [0.2, 0.2, 0.0]) < 1e-12);
        // vertex region
        let q = closest_point_on_triangle([-1.0, -1.0, 0.0], a, b, c);
        assert!(dist3(q, a) < 1e-12);
        // edge region
        let q = closest_point_on_triangle([0.5, -2.0, 0.0], a, b, c);
        assert!(dist3(q, [0.5, 0.0, 0.0]) < 1e-12);
    }

    #[test]
    fn point_mesh_distance_on_sphere() {
        let mesh = atlas_mesh(3);
        // distance from 2x-scaled surface points is about 1
        let d = point_mesh_distance([0.0, 0.0, 2.0], &mesh);
        assert!((d - 1.0).abs() < 0.01, "d = {d}");
        // center is about radius away
        let d = point_mesh_distance([0.0; 3], &mesh);
        assert!((d - 1.0).abs() < 0.01, "d = {d}");
    }

    #[test]
    fn chamfer_identical_and_scaled() {
        let a = atlas_mesh(2);
        let d = chamfer_distance(&a, &a, 500, 11).unwrap();
        assert!(d < 5e-3, "self chamfer {d}");
        let scaled = TriMesh::new(
            a.vertices.iter().map(|&v| scale3(v, 1.5)).collect(),
            a.faces.clone(),
            a.sphere_coords.clone(),
        )
        .unwrap();
        let d = chamfer_distance(&a, &scaled, 500, 11).unwrap();
        assert!((d - 0.5).abs() < 0.02, "radius-gap chamfer {d}");
    }

    #[test]
    fn surface_sampling_is_on_surface() {
        let mesh = atlas_mesh(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in sample_surface(&mesh, 200, &mut rng).unwrap() {
            assert!(point_mesh_distance(p, &mesh) < 1e-9);
        }
    }
}
