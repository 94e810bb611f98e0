//! Wavefront OBJ interchange.
//!
//! Export writes per-vertex sphere coordinates as `vt` records through a
//! spherical-angle mapping, so canonical correspondence survives the round
//! trip. Import accepts plain `v`/`f` files too; polygons are fan
//! triangulated and missing texture coordinates fall back to normalized
//! vertex directions.

use std::path::Path;

use crate::error::{Error, Result};
use crate::math::normalize3;

use super::TriMesh;

/// Sphere point -> (u, v) in [0,1]²: azimuth and inclination, normalized.
fn sphere_to_uv(s: [f64; 3]) -> [f64; 2] {
    let theta = s[1].atan2(s[0]);
    let phi = s[2].clamp(-1.0, 1.0).acos();
    [theta / (2.0 * std::f64::consts::PI) + 0.5, phi / std::f64::consts::PI]
}

fn uv_to_sphere(uv: [f64; 2]) -> [f64; 3] {
    let theta = (uv[0] - 0.5) * 2.0 * std::f64::consts::PI;
    let phi = uv[1] * std::f64::consts::PI;
    [theta.cos() * phi.sin(), theta.sin() * phi.sin(), phi.cos()]
}

pub fn write_obj(mesh: &TriMesh) -> Result<String> {
    mesh.validate()?;
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for s in &mesh.sphere_coords {
        let uv = sphere_to_uv(*s);
        out.push_str(&format!("vt {} {}\n", uv[0], uv[1]));
    }
    for f in &mesh.faces {
        out.push_str(&format!(
            "f {}/{} {}/{} {}/{}\n",
            f[0] + 1,
            f[0] + 1,
            f[1] + 1,
            f[1] + 1,
            f[2] + 1,
            f[2] + 1
        ));
    }
    Ok(out)
}

pub fn read_obj(text: &str) -> Result<TriMesh> {
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut uvs: Vec<[f64; 2]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    // per-vertex vt assignment, last corner wins
    let mut vt_of_vertex: Vec<Option<usize>> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let mut it = l.split_whitespace();
        let tag = it.next().unwrap();
        let parse_f = |tok: Option<&str>, what: &str| -> Result<f64> {
            tok.ok_or_else(|| Error::Parse {
                line,
                message: format!("missing {what}"),
            })?
            .parse()
            .map_err(|_| Error::Parse {
                line,
                message: format!("bad {what}"),
            })
        };
        match tag {
            "v" => {
                let x = parse_f(it.next(), "x")?;
                let y = parse_f(it.next(), "y")?;
                let z = parse_f(it.next(), "z")?;
                vertices.push([x, y, z]);
                vt_of_vertex.push(None);
            }
            "vt" => {
                let u = parse_f(it.next(), "u")?;
                let v = parse_f(it.next(), "v")?;
                uvs.push([u, v]);
            }
            "f" => {
                let mut corner_ids = Vec::new();
                for tok in it {
                    let mut parts = tok.split('/');
                    let vi: i64 = parts
                        .next()
                        .unwrap()
                        .parse()
                        .map_err(|_| Error::Parse {
                            line,
                            message: format!("bad vertex index '{tok}'"),
                        })?;
                    if vi < 1 || vi as usize > vertices.len() {
                        return Err(Error::Parse {
                            line,
                            message: format!("vertex index {vi} out of range"),
                        });
                    }
                    let vi = vi as usize - 1;
                    if let Some(ts) = parts.next() {
                        if !ts.is_empty() {
                            let ti: i64 = ts.parse().map_err(|_| Error::Parse {
                                line,
                                message: format!("bad texture index '{tok}'"),
                            })?;
                            if ti < 1 || ti as usize > uvs.len() {
                                return Err(Error::Parse {
                                    line,
                                    message: format!("texture index {ti} out of range"),
                                });
                            }
                            vt_of_vertex[vi] = Some(ti as usize - 1);
                        }
                    }
                    corner_ids.push(vi);
                }
                if corner_ids.len() < 3 {
                    return Err(Error::Parse {
                        line,
                        message: format!("face with {} corners", corner_ids.len()),
                    });
                }
                for k in 1..corner_ids.len() - 1 {
                    faces.push([corner_ids[0], corner_ids[k], corner_ids[k + 1]]);
                }
            }
            _ => {} // vn, o, g, usemtl, ... are irrelevant here
        }
    }

    if faces.is_empty() {
        log::warn!("OBJ input has no faces; loaded {} vertices only", vertices.len());
    }
    let sphere_coords = vertices
        .iter()
        .zip(&vt_of_vertex)
        .map(|(v, vt)| match vt {
            Some(ti) => uv_to_sphere(uvs[*ti]),
            None => normalize3(*v),
        })
        .collect();
    TriMesh::new(vertices, faces, sphere_coords)
}

pub fn save_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    std::fs::write(path, write_obj(mesh)?)?;
    Ok(())
}

pub fn load_obj(path: &Path) -> Result<TriMesh> {
    read_obj(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::icosphere;
    use crate::math::dist3;

    #[test]
    fn round_trip_icosphere() {
        let atlas = icosphere(1).unwrap();
        let mesh = TriMesh::new(
            atlas.samples().iter().map(|&s| [s[0] * 1.3, s[1], s[2] * 0.7]).collect(),
            atlas.faces().to_vec(),
            atlas.samples().to_vec(),
        )
        .unwrap();
        let text = write_obj(&mesh).unwrap();
        let back = read_obj(&text).unwrap();
        assert_eq!(back.faces, mesh.faces);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            assert!(dist3(*a, *b) < 1e-6);
        }
        for (a, b) in back.sphere_coords.iter().zip(&mesh.sphere_coords) {
            assert!(dist3(*a, *b) < 1e-6, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn one_based_indices_and_quads() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        let mesh = read_obj(text).unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn missing_faces_is_not_an_error() {
        let mesh = read_obj("v 0 0 1\nv 0 1 0\n").unwrap();
        assert_eq!(mesh.vertices.len(), 2);
        assert!(mesh.faces.is_empty());
        // fallback sphere coords are normalized directions
        assert!(dist3(mesh.sphere_coords[0], [0.0, 0.0, 1.0]) < 1e-12);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = read_obj("v 0 0 0\nf 1 2 9\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(read_obj("v 0 0\n").is_err());
        assert!(read_obj("f 1 2\n").is_err());
    }
}
