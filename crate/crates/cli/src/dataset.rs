//! Dataset directory layout:
//!   <root>/images/<id>.png        RGB input views
//!   <root>/masks/<id>.png         8-bit grayscale, >127 = foreground
//!   <root>/keypoints.csv          optional annotations (id, kp_name, x, y, visible)
//!   <root>/canonical_keypoints.csv optional sphere coordinates per kp_name
//!   <root>/groups.csv             optional view -> instance mapping
//! Views load sorted by id, so a dataset has one canonical view order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use spherefit_core::error::{Error, Result};
use spherefit_core::io;
use spherefit_core::pipeline::Instance;

#[derive(Debug)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    /// Keypoint names, empty when the dataset has no annotations.
    pub kp_names: Vec<String>,
    /// Per-view instance ids from groups.csv, aligned with `instances`.
    pub groups: Option<Vec<usize>>,
}

impl Dataset {
    pub fn find(&self, id: &str) -> Result<&Instance> {
        self.instances
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| Error::Argument(format!("dataset has no view named '{id}'")))
    }
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let images_dir = root.join("images");
    let mut stems: BTreeMap<String, PathBuf> = BTreeMap::new();
    let entries = std::fs::read_dir(&images_dir)
        .map_err(|e| Error::Argument(format!("{}: {e}", images_dir.display())))?;
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Argument(format!("{}: {e}", images_dir.display())))?
            .path();
        if path.extension().and_then(|s| s.to_str()) == Some("png") {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| {
                    Error::Argument(format!("{}: non-unicode file name", path.display()))
                })?
                .to_string();
            stems.insert(stem, path);
        }
    }
    if stems.is_empty() {
        return Err(Error::Argument(format!(
            "{}: no .png images found",
            images_dir.display()
        )));
    }

    let kp_file = root.join("keypoints.csv");
    let canon_file = root.join("canonical_keypoints.csv");
    let (rows, kp_names, canonical) = if kp_file.exists() {
        if !canon_file.exists() {
            return Err(Error::Argument(format!(
                "{}: keypoints.csv needs canonical_keypoints.csv next to it",
                root.display()
            )));
        }
        let rows = io::read_keypoints_csv(&kp_file)?;
        let (names, coords) = io::read_canonical_csv(&canon_file)?;
        (rows, names, coords)
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };

    let mut instances = Vec::with_capacity(stems.len());
    for (id, img_path) in &stems {
        let (image, h, w) = io::read_image_png(img_path)?;
        let mask_path = root.join("masks").join(format!("{id}.png"));
        let (mask, mh, mw) = io::read_mask_png(&mask_path)?;
        if (mh, mw) != (h, w) {
            return Err(Error::Argument(format!(
                "{}: mask is {mh}x{mw} but the image is {h}x{w}",
                mask_path.display()
            )));
        }
        let keypoints = if rows.is_empty() {
            None
        } else {
            io::keypoints_for_view(&rows, &kp_names, &canonical, id)?
        };
        let inst = Instance { id: id.clone(), height: h, width: w, image, mask, keypoints };
        inst.validate()?;
        instances.push(inst);
    }

    let groups_file = root.join("groups.csv");
    let groups = if groups_file.exists() {
        Some(read_groups_csv(&groups_file, &instances)?)
    } else {
        None
    };

    Ok(Dataset { instances, kp_names, groups })
}

/// groups.csv: version line, `id,group` header, one row per view. Ids must
/// cover the dataset exactly and group numbers must be dense from 0.
pub fn read_groups_csv(path: &Path, instances: &[Instance]) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(head) if head.trim_end() == io::CSV_VERSION => {}
        _ => {
            return Err(Error::Argument(format!(
                "{}: missing '{}' version line",
                path.display(),
                io::CSV_VERSION
            )))
        }
    }
    match lines.next() {
        Some(head) if head.trim() == "id,group" => {}
        other => {
            return Err(Error::Argument(format!(
                "{}: expected 'id,group' header, got {other:?}",
                path.display()
            )))
        }
    }
    let mut by_id: BTreeMap<String, usize> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((id, group)) = line.split_once(',') else {
            return Err(Error::Argument(format!(
                "{}: line {}: expected id,group",
                path.display(),
                n + 3
            )));
        };
        let g: usize = group.trim().parse().map_err(|e| {
            Error::Argument(format!("{}: line {}: {e}", path.display(), n + 3))
        })?;
        if by_id.insert(id.trim().to_string(), g).is_some() {
            return Err(Error::Argument(format!(
                "{}: duplicate id '{}'",
                path.display(),
                id.trim()
            )));
        }
    }
    let mut groups = Vec::with_capacity(instances.len());
    for inst in instances {
        let Some(&g) = by_id.get(&inst.id) else {
            return Err(Error::Argument(format!(
                "{}: no group for view '{}'",
                path.display(),
                inst.id
            )));
        };
        groups.push(g);
    }
    if by_id.len() != instances.len() {
        return Err(Error::Argument(format!(
            "{}: {} rows for {} views",
            path.display(),
            by_id.len(),
            instances.len()
        )));
    }
    let count = groups.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; count];
    for &g in &groups {
        seen[g] = true;
    }
    if seen.iter().any(|&s| !s) {
        return Err(Error::Argument(format!(
            "{}: group numbers must be dense from 0",
            path.display()
        )));
    }
    Ok(groups)
}
