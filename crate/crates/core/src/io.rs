//! On-disk formats. Text formats (checkpoint, OBJ, CSV, config) open with
//! a version line so stale files fail loudly instead of parsing wrong;
//! floats are written in shortest round-trip form, so save/load is
//! bit-exact and identical runs produce identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{CameraHypothesisSet, WeakPerspectiveCamera};
use crate::error::{Error, Result};
use crate::geometry::TriMesh;
use crate::losses::KeypointSet;
use crate::pipeline::FitState;
use crate::shape::ShapeSpace;
use crate::surface_map::PixelSurfaceMap;
use crate::texture::TextureSpace;

pub const CHECKPOINT_VERSION: &str = "spherefit-checkpoint-v1";
pub const OBJ_VERSION: &str = "# spherefit-obj-v1";
pub const CSV_VERSION: &str = "# spherefit-csv-v1";
pub const CONFIG_VERSION: &str = "# spherefit-config-v1";

fn read_error(path: &Path, err: impl std::fmt::Display) -> Error {
    Error::Argument(format!("{}: {err}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| read_error(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| read_error(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| read_error(path, e))
}

/// Splits off a mandatory version line.
fn expect_version<'a>(path: &Path, text: &'a str, version: &str) -> Result<&'a str> {
    match text.split_once('\n') {
        Some((head, rest)) if head.trim_end() == version => Ok(rest),
        Some((head, _)) => Err(read_error(
            path,
            format!("version line '{}' does not match '{version}'", head.trim_end()),
        )),
        None => Err(read_error(path, "empty file")),
    }
}

#[derive(Serialize, Deserialize)]
struct CameraSetDto {
    cameras: Vec<[f64; 7]>,
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDto {
    shape: ShapeSpace,
    texture: TextureSpace,
    ids: Vec<String>,
    z_shape: Vec<Vec<f64>>,
    z_texture: Vec<Vec<f64>>,
    cameras: Vec<CameraSetDto>,
    maps: Vec<PixelSurfaceMap>,
    groups: Vec<usize>,
}

/// Serializes a fit. JSON cannot hold non-finite numbers, so a poisoned
/// state is rejected here rather than written out half-readable.
pub fn save_checkpoint(path: &Path, state: &FitState) -> Result<()> {
    let finite = state
        .shape
        .mean_net
        .layers
        .iter()
        .chain(&state.shape.deform_net.layers)
        .chain(&state.texture.flow_net.layers)
        .all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
        && state.z_shape.iter().chain(&state.z_texture).flatten().all(|v| v.is_finite())
        && state.maps.iter().flat_map(|m| &m.grid).all(|v| v.is_finite());
    if !finite {
        return Err(Error::Numeric("checkpoint: refusing to save non-finite values".into()));
    }
    let dto = CheckpointDto {
        shape: state.shape.clone(),
        texture: state.texture.clone(),
        ids: state.ids.clone(),
        z_shape: state.z_shape.clone(),
        z_texture: state.z_texture.clone(),
        cameras: state
            .cameras
            .iter()
            .map(|set| CameraSetDto {
                cameras: set.cameras.iter().map(|c| c.to_array()).collect(),
                logits: set.logits.clone(),
            })
            .collect(),
        maps: state.maps.clone(),
        groups: state.groups.clone(),
    };
    let body = serde_json::to_string(&dto)
        .map_err(|e| Error::Contract(format!("checkpoint: serialization failed: {e}")))?;
    write_file(path, format!("{CHECKPOINT_VERSION}\n{body}\n").as_bytes())
}

/// Loads and re-validates a checkpoint; nothing in the file is trusted.
pub fn load_checkpoint(path: &Path) -> Result<FitState> {
    let text = read_text(path)?;
    let body = expect_version(path, &text, CHECKPOINT_VERSION)?;
    let dto: CheckpointDto =
        serde_json::from_str(body).map_err(|e| read_error(path, e))?;
    dto.shape.mean_net.validate()?;
    dto.shape.deform_net.validate()?;
    dto.texture.flow_net.validate()?;
    let cameras: Vec<CameraHypothesisSet> = dto
        .cameras
        .into_iter()
        .map(|set| {
            let cams: Vec<WeakPerspectiveCamera> = set
                .cameras
                .iter()
                .map(|a| {
                    // validate, then keep the stored bits: the constructor
                    // renormalizes the quaternion, which would perturb an
                    // already-unit value and break bit-exact resume
                    WeakPerspectiveCamera::from_array(a)?;
                    Ok(WeakPerspectiveCamera {
                        scale: a[0],
                        translation: [a[1], a[2]],
                        rotation: [a[3], a[4], a[5], a[6]],
                    })
                })
                .collect::<Result<_>>()?;
            CameraHypothesisSet::new(cams, set.logits)
        })
        .collect::<Result<_>>()?;
    for m in &dto.maps {
        m.validate()?;
    }
    let n_views = dto.groups.len();
    if cameras.len() != n_views || dto.maps.len() != n_views || dto.ids.len() != n_views {
        return Err(read_error(
            path,
            format!(
                "inconsistent view counts: {} groups, {} ids, {} camera sets, {} maps",
                n_views,
                dto.ids.len(),
                cameras.len(),
                dto.maps.len()
            ),
        ));
    }
    let group_count = dto.groups.iter().max().map_or(0, |m| m + 1);
    if dto.z_shape.len() != group_count || dto.z_texture.len() != group_count {
        return Err(read_error(path, "latent tables do not match the group count"));
    }
    if dto.z_shape.iter().any(|z| z.len() != dto.shape.latent_dim)
        || dto.z_texture.iter().any(|z| z.len() != dto.texture.latent_dim)
    {
        return Err(read_error(path, "latent width does not match the spaces"));
    }
    Ok(FitState {
        shape: dto.shape,
        texture: dto.texture,
        ids: dto.ids,
        z_shape: dto.z_shape,
        z_texture: dto.z_texture,
        cameras,
        maps: dto.maps,
        groups: dto.groups,
    })
}

/// Writes a mesh as OBJ. Sphere coordinates ride along as vertex normals,
/// which is what the matching reader expects back.
pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    mesh.validate()?;
    let mut out = String::from(OBJ_VERSION);
    out.push('\n');
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for u in &mesh.sphere_coords {
        out.push_str(&format!("vn {} {} {}\n", u[0], u[1], u[2]));
    }
    for f in &mesh.faces {
        out.push_str(&format!(
            "f {}//{} {}//{} {}//{}\n",
            f[0] + 1,
            f[0] + 1,
            f[1] + 1,
            f[1] + 1,
            f[2] + 1,
            f[2] + 1
        ));
    }
    write_file(path, out.as_bytes())
}

/// Reads the OBJ dialect written by `write_obj`: positions, per-vertex
/// normals holding sphere coordinates, triangular faces.
pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let text = read_text(path)?;
    let body = expect_version(path, &text, OBJ_VERSION)?;
    let mut vertices = Vec::new();
    let mut coords = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let tag = parts.next().unwrap();
        let mut three = |what: &str| -> Result<[f64; 3]> {
            let mut out = [0.0; 3];
            for slot in &mut out {
                *slot = parts
                    .next()
                    .ok_or_else(|| read_error(path, format!("line {}: short {what}", ln + 2)))?
                    .parse::<f64>()
                    .map_err(|e| read_error(path, format!("line {}: {e}", ln + 2)))?;
            }
            Ok(out)
        };
        match tag {
            "v" => vertices.push(three("vertex")?),
            "vn" => coords.push(three("normal")?),
            "f" => {
                let mut idx = [0usize; 3];
                for slot in &mut idx {
                    let token = parts.next().ok_or_else(|| {
                        read_error(path, format!("line {}: short face", ln + 2))
                    })?;
                    let first = token.split('/').next().unwrap();
                    let i: usize = first
                        .parse()
                        .map_err(|e| read_error(path, format!("line {}: {e}", ln + 2)))?;
                    if i == 0 {
                        return Err(read_error(
                            path,
                            format!("line {}: OBJ indices start at 1", ln + 2),
                        ));
                    }
                    *slot = i - 1;
                }
                faces.push(idx);
            }
            _ => {}
        }
    }
    if coords.len() != vertices.len() {
        return Err(read_error(
            path,
            format!(
                "{} vertices but {} sphere coordinates; this reader needs the \
                 normals written by its own writer",
                vertices.len(),
                coords.len()
            ),
        ));
    }
    TriMesh::new(vertices, faces, coords)
}

/// 8-bit grayscale PNG; anything above 127 reads back as foreground.
pub fn write_mask_png(path: &Path, mask: &[bool], height: usize, width: usize) -> Result<()> {
    if mask.len() != height * width {
        return Err(Error::Argument(format!(
            "mask png: {} entries for {height}x{width}",
            mask.len()
        )));
    }
    let bytes: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| read_error(dir, e))?;
    }
    image::save_buffer(
        path,
        &bytes,
        width as u32,
        height as u32,
        image::ColorType::L8,
    )
    .map_err(|e| read_error(path, e))
}

pub fn read_mask_png(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path).map_err(|e| read_error(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw().into_iter().map(|v| v > 127).collect(), h, w))
}

/// RGB PNG from row-major floats in [0, 1]; out-of-range values clamp.
pub fn write_image_png(path: &Path, rgb: &[f64], height: usize, width: usize) -> Result<()> {
    if rgb.len() != height * width * 3 {
        return Err(Error::Argument(format!(
            "image png: {} floats for {height}x{width}x3",
            rgb.len()
        )));
    }
    let bytes: Vec<u8> =
        rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| read_error(dir, e))?;
    }
    image::save_buffer(
        path,
        &bytes,
        width as u32,
        height as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| read_error(path, e))
}

pub fn read_image_png(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path).map_err(|e| read_error(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(), h, w))
}

/// One annotation row of `keypoints.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointRow {
    pub id: String,
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

pub fn write_keypoints_csv(path: &Path, rows: &[KeypointRow]) -> Result<()> {
    let mut out = format!("{CSV_VERSION}\nid,kp_name,x,y,visible\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.id,
            r.name,
            r.x,
            r.y,
            if r.visible { 1 } else { 0 }
        ));
    }
    write_file(path, out.as_bytes())
}

pub fn read_keypoints_csv(path: &Path) -> Result<Vec<KeypointRow>> {
    let text = read_text(path)?;
    let body = expect_version(path, &text, CSV_VERSION)?;
    let mut lines = body.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "id,kp_name,x,y,visible" => {}
        other => {
            return Err(read_error(
                path,
                format!("expected the keypoint column header, got {:?}", other.map(|(_, l)| l)),
            ))
        }
    }
    let mut rows = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(read_error(path, format!("line {}: expected 5 columns", ln + 3)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|e| read_error(path, format!("line {}: {e}", ln + 3)))
        };
        rows.push(KeypointRow {
            id: cols[0].trim().to_string(),
            name: cols[1].trim().to_string(),
            x: parse(cols[2])?,
            y: parse(cols[3])?,
            visible: matches!(cols[4].trim(), "1" | "true"),
        });
    }
    Ok(rows)
}

pub fn write_canonical_csv(path: &Path, names: &[String], coords: &[[f64; 3]]) -> Result<()> {
    if names.len() != coords.len() {
        return Err(Error::Argument(format!(
            "canonical csv: {} names for {} coordinates",
            names.len(),
            coords.len()
        )));
    }
    let mut out = format!("{CSV_VERSION}\nkp_name,ux,uy,uz\n");
    for (n, u) in names.iter().zip(coords) {
        out.push_str(&format!("{},{},{},{}\n", n, u[0], u[1], u[2]));
    }
    write_file(path, out.as_bytes())
}

pub fn read_canonical_csv(path: &Path) -> Result<(Vec<String>, Vec<[f64; 3]>)> {
    let text = read_text(path)?;
    let body = expect_version(path, &text, CSV_VERSION)?;
    let mut lines = body.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "kp_name,ux,uy,uz" => {}
        other => {
            return Err(read_error(
                path,
                format!("expected the canonical column header, got {:?}", other.map(|(_, l)| l)),
            ))
        }
    }
    let mut names = Vec::new();
    let mut coords = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(read_error(path, format!("line {}: expected 4 columns", ln + 3)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|e| read_error(path, format!("line {}: {e}", ln + 3)))
        };
        names.push(cols[0].trim().to_string());
        coords.push([parse(cols[1])?, parse(cols[2])?, parse(cols[3])?]);
    }
    Ok((names, coords))
}

/// Assembles per-view keypoint sets from the two dataset CSVs. Views
/// without annotations get None. Keypoint order follows the canonical
/// file; annotation rows may arrive in any order.
pub fn keypoints_for_view(
    rows: &[KeypointRow],
    names: &[String],
    canonical: &[[f64; 3]],
    id: &str,
) -> Result<Option<KeypointSet>> {
    let mine: Vec<&KeypointRow> = rows.iter().filter(|r| r.id == id).collect();
    if mine.is_empty() {
        return Ok(None);
    }
    let mut observed = vec![[f64::NAN; 2]; names.len()];
    let mut visible = vec![false; names.len()];
    let mut seen = vec![false; names.len()];
    for row in mine {
        let Some(k) = names.iter().position(|n| n == &row.name) else {
            return Err(Error::Argument(format!(
                "keypoints: '{}' of view '{id}' is not in the canonical table",
                row.name
            )));
        };
        if seen[k] {
            return Err(Error::Argument(format!(
                "keypoints: duplicate row for '{}' of view '{id}'",
                row.name
            )));
        }
        seen[k] = true;
        observed[k] = [row.x, row.y];
        visible[k] = row.visible;
    }
    for (k, s) in seen.iter().enumerate() {
        if !s {
            // unannotated keypoints are simply invisible at (0, 0)
            observed[k] = [0.0, 0.0];
        }
    }
    Ok(Some(KeypointSet { canonical: canonical.to_vec(), observed, visible }))
}
