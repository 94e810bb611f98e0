//! One function per subcommand. Each resolves its config, echoes it, does
//! the work, and leaves everything it produced under the --out directory,
//! including the resolved config itself as config.txt.

use std::path::{Path, PathBuf};

use spherefit_core::camera::{quat_from_axis_angle, quat_mul, quat_normalize, WeakPerspectiveCamera};
use spherefit_core::error::{Error, Result};
use spherefit_core::evaluation::{
    pck_reproject, pck_transfer, reconstruction_iou, render_view_coords, transfer_keypoints,
};
use spherefit_core::geometry::{icosphere, SphereAtlas, TriMesh};
use spherefit_core::io;
use spherefit_core::pipeline::{
    fit_collection, fit_instance, generate_synthetic, trace_csv, FitOutcome, FitState, Instance,
    SyntheticSet,
};
use spherefit_core::renderer::hard::{rasterize_surface_coords, shade_buffers};
use spherefit_core::renderer::SoftRasterConfig;
use spherefit_core::shape::template::{extract_mean_mesh, fit_template};
use spherefit_core::shape::ShapeSpace;
use spherefit_core::texture::{bilinear_sample, eval_texture_flow, TextureSpace};
use spherefit_core::Tensor;

use crate::config::RunConfig;

fn prepare_out(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let out = PathBuf::from(cfg.require(&cfg.out, "out")?);
    std::fs::create_dir_all(&out)
        .map_err(|e| Error::Argument(format!("{}: {e}", out.display())))?;
    let echo = cfg.render(command);
    print!("{echo}");
    std::fs::write(out.join("config.txt"), echo)
        .map_err(|e| Error::Argument(format!("{}: {e}", out.join("config.txt").display())))?;
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))
}

/// The mesh init-template fits toward: an OBJ file, the unit sphere, or
/// `ellipsoid:ax,ay,az`.
fn target_mesh(cfg: &RunConfig) -> Result<TriMesh> {
    if !cfg.template.is_empty() && !cfg.target.is_empty() {
        return Err(Error::Argument(
            "give either 'template' (an OBJ) or 'target' (a builtin), not both".into(),
        ));
    }
    if !cfg.template.is_empty() {
        return io::read_obj(Path::new(&cfg.template));
    }
    let spec = if cfg.target.is_empty() { "sphere" } else { cfg.target.as_str() };
    let atlas = icosphere(cfg.mesh_level)?;
    let radii = if spec == "sphere" {
        [1.0, 1.0, 1.0]
    } else if let Some(rest) = spec.strip_prefix("ellipsoid:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Argument(format!(
                "target '{spec}': expected ellipsoid:ax,ay,az"
            )));
        }
        let mut r = [0.0; 3];
        for (slot, p) in r.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|e| Error::Argument(format!("target '{spec}': {e}")))?;
        }
        r
    } else {
        return Err(Error::Argument(format!(
            "unknown target '{spec}'; use sphere or ellipsoid:ax,ay,az"
        )));
    };
    let vertices = atlas
        .samples()
        .iter()
        .map(|u| [u[0] * radii[0], u[1] * radii[1], u[2] * radii[2]])
        .collect();
    TriMesh::new(vertices, atlas.faces().to_vec(), atlas.samples().to_vec())
}

pub fn init_template(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg, "init-template")?;
    let target = target_mesh(cfg)?;
    let mut shape = ShapeSpace::init(cfg.shape_latent_dim, cfg.hidden_width, cfg.seed);
    let report = fit_template(&mut shape, &target, &cfg.template_config())?;

    let texture =
        TextureSpace::init(cfg.texture_latent_dim, cfg.hidden_width, cfg.seed.wrapping_add(1));
    let state = FitState {
        shape,
        texture,
        ids: Vec::new(),
        z_shape: Vec::new(),
        z_texture: Vec::new(),
        cameras: Vec::new(),
        maps: Vec::new(),
        groups: Vec::new(),
    };
    io::save_checkpoint(&out.join("template.ckpt"), &state)?;

    let atlas = icosphere(cfg.mesh_level)?;
    let mean = extract_mean_mesh(&state.shape, &atlas)?;
    io::write_obj(&out.join("mean.obj"), &mean)?;

    let percent = 100.0 * report.final_chamfer / target.bounds().diagonal();
    let line = format!(
        "final surface distance {:.6} ({:.3}% of target bbox diagonal) after {} iterations\n",
        report.final_chamfer, percent, report.iterations_run
    );
    print!("{line}");
    write_text(&out.join("chamfer.txt"), &line)?;
    report.check()
}

/// Keypoint names are positional: kp00, kp01, ...
fn kp_name(k: usize) -> String {
    format!("kp{k:02}")
}

/// Writes a synthetic set as a loadable dataset tree, ground truth included.
pub fn write_dataset(root: &Path, set: &SyntheticSet) -> Result<()> {
    let mut kp_rows = Vec::new();
    for inst in &set.views {
        io::write_image_png(
            &root.join("images").join(format!("{}.png", inst.id)),
            &inst.image,
            inst.height,
            inst.width,
        )?;
        io::write_mask_png(
            &root.join("masks").join(format!("{}.png", inst.id)),
            &inst.mask,
            inst.height,
            inst.width,
        )?;
        if let Some(kps) = &inst.keypoints {
            for k in 0..kps.observed.len() {
                kp_rows.push(io::KeypointRow {
                    id: inst.id.clone(),
                    name: kp_name(k),
                    x: kps.observed[k][0],
                    y: kps.observed[k][1],
                    visible: kps.visible[k],
                });
            }
        }
    }
    io::write_keypoints_csv(&root.join("keypoints.csv"), &kp_rows)?;
    let names: Vec<String> = (0..set.canonical_keypoints.len()).map(kp_name).collect();
    io::write_canonical_csv(
        &root.join("canonical_keypoints.csv"),
        &names,
        &set.canonical_keypoints,
    )?;

    let mut groups = format!("{}\nid,group\n", io::CSV_VERSION);
    for (inst, g) in set.views.iter().zip(&set.groups) {
        groups.push_str(&format!("{},{g}\n", inst.id));
    }
    write_text(&root.join("groups.csv"), &groups)?;

    let gt = root.join("gt");
    std::fs::create_dir_all(&gt).map_err(|e| Error::Argument(format!("{}: {e}", gt.display())))?;
    let mut cams = format!("{}\nid,scale,tx,ty,qw,qx,qy,qz\n", io::CSV_VERSION);
    for (inst, cam) in set.views.iter().zip(&set.cameras) {
        let a = cam.to_array();
        cams.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            inst.id, a[0], a[1], a[2], a[3], a[4], a[5], a[6]
        ));
    }
    write_text(&gt.join("cameras.csv"), &cams)?;
    for (g, mesh) in set.meshes.iter().enumerate() {
        io::write_obj(&gt.join(format!("group{g:02}.obj")), mesh)?;
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg, "synth")?;
    let template = io::read_obj(Path::new(cfg.require(&cfg.template, "template")?))?;
    let set = generate_synthetic(
        &template,
        cfg.instances,
        cfg.views,
        cfg.height,
        cfg.width,
        &cfg.deform_spec(),
        cfg.seed,
    )?;
    write_dataset(&out, &set)?;
    println!(
        "wrote {} views of {} instances at {}x{} to {}",
        set.views.len(),
        set.meshes.len(),
        cfg.height,
        cfg.width,
        out.display()
    );
    Ok(())
}

fn load_spaces(cfg: &RunConfig) -> Result<(ShapeSpace, TextureSpace)> {
    let path = cfg.require(&cfg.checkpoint, "checkpoint")?;
    let state = io::load_checkpoint(Path::new(path))?;
    Ok((state.shape, state.texture))
}

/// Mask, sphere-coordinate shading and (when the source image is at hand)
/// a textured resampling for one fitted view.
fn dump_view(
    state: &FitState,
    v: usize,
    atlas: &SphereAtlas,
    inst: Option<&Instance>,
    height: usize,
    width: usize,
    cam: &WeakPerspectiveCamera,
    dir: &Path,
    stem: &str,
) -> Result<()> {
    let mesh = state.view_mesh(v, atlas)?;
    let raster = SoftRasterConfig::for_size(height, width)?;
    let mut buf = rasterize_surface_coords(&mesh, cam, &raster)?;
    io::write_mask_png(
        &dir.join(format!("{stem}_mask.png")),
        &buf.mask_bits(),
        height,
        width,
    )?;
    shade_buffers(&mut buf, |u| {
        [0.5 * (u[0] + 1.0), 0.5 * (u[1] + 1.0), 0.5 * (u[2] + 1.0)]
    });
    io::write_image_png(&dir.join(format!("{stem}_coords.png")), &buf.color, height, width)?;

    let Some(inst) = inst else { return Ok(()) };
    let pixels: Vec<usize> = (0..height * width).filter(|&p| buf.valid[p]).collect();
    if pixels.is_empty() {
        return Ok(());
    }
    let us: Vec<[f64; 3]> = pixels.iter().map(|&p| buf.surface_coords[p]).collect();
    let g = state.groups[v];
    let z = Tensor::from_vec(
        state.z_texture[g].clone(),
        &[state.z_texture[g].len()],
    )?;
    let flow = eval_texture_flow(&state.texture.constant(), &Tensor::from_rows(&us), &z)?;
    let img = Tensor::from_vec(inst.image.clone(), &[inst.height, inst.width, 3])?;
    let colors = bilinear_sample(&img, &flow)?;
    let mut rgb = vec![0.0; height * width * 3];
    for (row, &p) in pixels.iter().enumerate() {
        let c = &colors.data()[row * 3..row * 3 + 3];
        rgb[p * 3..p * 3 + 3].copy_from_slice(c);
    }
    io::write_image_png(&dir.join(format!("{stem}_texture.png")), &rgb, height, width)
}

fn save_outcome(
    outcome: &FitOutcome,
    instances: &[&Instance],
    out: &Path,
    stem: &str,
    atlas: &SphereAtlas,
) -> Result<()> {
    io::save_checkpoint(&out.join(format!("{stem}.ckpt")), &outcome.state)?;
    write_text(&out.join(format!("{stem}_trace.csv")), &trace_csv(&outcome.trace))?;
    let renders = out.join("renders");
    std::fs::create_dir_all(&renders)
        .map_err(|e| Error::Argument(format!("{}: {e}", renders.display())))?;
    for (v, inst) in instances.iter().enumerate() {
        let cam = outcome.state.best_camera(v)?.clone();
        dump_view(
            &outcome.state,
            v,
            atlas,
            Some(inst),
            inst.height,
            inst.width,
            &cam,
            &renders,
            &inst.id,
        )?;
    }
    let total = outcome.trace.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!("{stem}: final loss {total:.6} over {} views", instances.len());
    Ok(())
}

pub fn fit(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg, "fit")?;
    let (shape, texture) = load_spaces(cfg)?;
    let ds = crate::dataset::load_dataset(Path::new(cfg.require(&cfg.data, "data")?))?;
    let selected: Vec<&Instance> = if cfg.view.is_empty() {
        ds.instances.iter().collect()
    } else {
        vec![ds.find(&cfg.view)?]
    };
    let fit_cfg = cfg.fit_config();
    let atlas = icosphere(cfg.mesh_level)?;
    for inst in selected {
        let outcome = fit_instance(inst, &shape, &texture, true, &fit_cfg)?;
        save_outcome(&outcome, &[inst], &out, &inst.id, &atlas)?;
    }
    Ok(())
}

pub fn fit_collection_cmd(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg, "fit-collection")?;
    let (shape, texture) = load_spaces(cfg)?;
    let ds = crate::dataset::load_dataset(Path::new(cfg.require(&cfg.data, "data")?))?;
    let fit_cfg = cfg.fit_config();
    let outcome =
        fit_collection(&ds.instances, ds.groups.as_deref(), &shape, &texture, &fit_cfg)?;
    let refs: Vec<&Instance> = ds.instances.iter().collect();
    let atlas = icosphere(cfg.mesh_level)?;
    save_outcome(&outcome, &refs, &out, "collection", &atlas)
}

pub fn render(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg, "render")?;
    let state = io::load_checkpoint(Path::new(cfg.require(&cfg.checkpoint, "checkpoint")?))?;
    let id = cfg.require(&cfg.view, "view")?;
    let v = state.view_index(id)?;
    let (height, width) = (cfg.height, cfg.width);

    let fitted = state.best_camera(v)?.clone();
    let cam = if cfg.azimuth.is_some() || cfg.elevation.is_some() {
        // same convention as the synthetic views: spin about y, then tilt
        // about x; the silhouette recenters on the new image
        let spin = quat_from_axis_angle([0.0, 1.0, 0.0], cfg.azimuth.unwrap_or(0.0));
        let tilt = quat_from_axis_angle([1.0, 0.0, 0.0], cfg.elevation.unwrap_or(0.0));
        WeakPerspectiveCamera::new(
            cfg.camera_scale.unwrap_or(fitted.scale),
            [width as f64 * 0.5, height as f64 * 0.5],
            quat_normalize(quat_mul(tilt, spin)),
        )?
    } else {
        WeakPerspectiveCamera::new(
            cfg.camera_scale.unwrap_or(fitted.scale),
            fitted.translation,
            fitted.rotation,
        )?
    };

    let atlas = icosphere(cfg.mesh_level)?;
    let inst_store;
    let inst = if cfg.data.is_empty() {
        None
    } else {
        let ds = crate::dataset::load_dataset(Path::new(&cfg.data))?;
        inst_store = ds.find(id)?.clone();
        Some(&inst_store)
    };
    dump_view(&state, v, &atlas, inst, height, width, &cam, &out, id)?;
    io::write_obj(&out.join(format!("{id}.obj")), &state.view_mesh(v, &atlas)?)?;
    println!("rendered '{id}' at {width}x{height} to {}", out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg, "eval")?;
    let state = io::load_checkpoint(Path::new(cfg.require(&cfg.checkpoint, "checkpoint")?))?;
    let data = PathBuf::from(cfg.require(&cfg.data, "data")?);
    let ds = crate::dataset::load_dataset(&data)?;
    let instances: Vec<Instance> = state
        .ids
        .iter()
        .map(|id| ds.find(id).cloned())
        .collect::<Result<_>>()?;
    let atlas = icosphere(cfg.mesh_level)?;
    let mut produced = 0;

    if instances.iter().any(|i| i.keypoints.is_some()) {
        let r = pck_reproject(&state, &instances, cfg.pck_fraction)?;
        write_text(&out.join("pck_reproject.csv"), &r.to_csv())?;
        print!("{}", r.summary());
        let t = pck_transfer(&state, &instances, &atlas, cfg.pck_fraction)?;
        write_text(&out.join("pck_transfer.csv"), &t.to_csv())?;
        print!("{}", t.summary());
        produced += 2;
    } else {
        println!("no keypoint annotations in {}; PCK skipped", data.display());
    }

    let gt_dir = if cfg.gt.is_empty() { data.join("gt") } else { PathBuf::from(&cfg.gt) };
    if gt_dir.is_dir() {
        let mut fits = Vec::new();
        let mut gts = Vec::new();
        for g in 0..state.group_count() {
            gts.push(io::read_obj(&gt_dir.join(format!("group{g:02}.obj")))?);
            fits.push(state.group_mesh(g, &atlas)?);
        }
        let r = reconstruction_iou(&fits, &gts, cfg.iou_resolution)?;
        write_text(&out.join("iou.csv"), &r.to_csv())?;
        print!("{}", r.summary());
        produced += 1;
    } else {
        println!("no ground-truth meshes under {}; IoU skipped", gt_dir.display());
    }

    if produced == 0 {
        return Err(Error::Argument(
            "nothing to evaluate: no keypoints and no ground-truth meshes".into(),
        ));
    }
    Ok(())
}

fn draw_cross(rgb: &mut [f64], height: usize, width: usize, x: f64, y: f64, color: [f64; 3]) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for d in -3i64..=3 {
        for (px, py) in [(cx + d, cy), (cx, cy + d)] {
            if px >= 0 && py >= 0 && (px as usize) < width && (py as usize) < height {
                let p = (py as usize * width + px as usize) * 3;
                rgb[p..p + 3].copy_from_slice(&color);
            }
        }
    }
}

pub fn transfer(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg, "transfer")?;
    let state = io::load_checkpoint(Path::new(cfg.require(&cfg.checkpoint, "checkpoint")?))?;
    let ds = crate::dataset::load_dataset(Path::new(cfg.require(&cfg.data, "data")?))?;
    let from = cfg.require(&cfg.transfer_from, "transfer_from")?;
    let to = cfg.require(&cfg.transfer_to, "transfer_to")?;
    let (vi, ti) = (state.view_index(from)?, state.view_index(to)?);
    let src = ds.find(from)?;
    let tgt = ds.find(to)?;

    let kps = src.keypoints.as_ref().ok_or_else(|| {
        Error::Argument(format!("view '{from}' has no keypoint annotations"))
    })?;
    let mut names = Vec::new();
    let mut points = Vec::new();
    for k in 0..kps.observed.len() {
        if kps.visible[k] {
            names.push(
                ds.kp_names.get(k).cloned().unwrap_or_else(|| kp_name(k)),
            );
            points.push(kps.observed[k]);
        }
    }
    if points.is_empty() {
        return Err(Error::Argument(format!("view '{from}' has no visible keypoints")));
    }

    let atlas = icosphere(cfg.mesh_level)?;
    let src_render = render_view_coords(&state, vi, &atlas, src.height, src.width)?;
    let tgt_render = render_view_coords(&state, ti, &atlas, tgt.height, tgt.width)?;
    let preds = transfer_keypoints(&src_render, &tgt_render, &points)?;

    let mut src_img = src.image.clone();
    for p in &points {
        draw_cross(&mut src_img, src.height, src.width, p[0], p[1], [0.0, 1.0, 0.0]);
    }
    io::write_image_png(
        &out.join(format!("{from}_source.png")),
        &src_img,
        src.height,
        src.width,
    )?;
    let mut tgt_img = tgt.image.clone();
    for p in preds.iter().flatten() {
        draw_cross(&mut tgt_img, tgt.height, tgt.width, p[0], p[1], [1.0, 0.0, 0.0]);
    }
    io::write_image_png(
        &out.join(format!("{to}_transferred.png")),
        &tgt_img,
        tgt.height,
        tgt.width,
    )?;

    let mut csv = format!("{}\nkp_name,src_x,src_y,dst_x,dst_y,transferred\n", io::CSV_VERSION);
    let mut hits = 0;
    for ((name, p), pred) in names.iter().zip(&points).zip(&preds) {
        match pred {
            Some(q) => {
                hits += 1;
                csv.push_str(&format!("{name},{},{},{},{},1\n", p[0], p[1], q[0], q[1]));
            }
            None => csv.push_str(&format!("{name},{},{},,,0\n", p[0], p[1])),
        }
    }
    write_text(&out.join("transfer.csv"), &csv)?;
    println!("transferred {hits} of {} keypoints from '{from}' to '{to}'", points.len());
    Ok(())
}
