//! One flat key=value namespace shared by every subcommand. Resolution
//! order: built-in defaults, then the --config file, then command-line
//! flags. The resolved result is echoed in the same format, so a saved
//! echo reruns the command exactly.

use std::fmt::Write as _;
use std::path::Path;

use spherefit_core::error::{Error, Result};
use spherefit_core::losses::LossWeights;
use spherefit_core::pipeline::{DeformSpec, FitConfig};
use spherefit_core::shape::template::TemplateFitConfig;

pub const CONFIG_VERSION: &str = "# spherefit-config-v1";

#[derive(Debug, Clone)]
pub struct RunConfig {
    // paths and selectors; empty string = unset
    pub template: String,
    pub checkpoint: String,
    pub data: String,
    pub out: String,
    pub gt: String,
    pub target: String,
    pub view: String,
    pub transfer_from: String,
    pub transfer_to: String,

    // network sizes
    pub shape_latent_dim: usize,
    pub texture_latent_dim: usize,
    pub hidden_width: usize,
    /// Icosphere level for extracted meshes, renders and evaluation.
    pub mesh_level: usize,

    // fitting
    pub iterations: usize,
    pub lr_nets: f64,
    pub lr_texture: f64,
    pub lr_latents: f64,
    pub lr_cameras: f64,
    pub lr_maps: f64,
    pub delta_enable_fraction: f64,
    pub hypotheses: usize,
    pub prune_after: usize,
    pub hypothesis_elevation: f64,
    pub atlas_level: usize,
    pub map_size: usize,
    pub gcc_pixel_cap: usize,
    pub boundary_pixel_cap: usize,
    pub boundary_sample_count: usize,
    pub seed: u64,

    // loss weights
    pub w_mask: f64,
    pub w_boundary: f64,
    pub w_gcc: f64,
    pub w_kp: f64,
    pub w_rigid: f64,
    pub w_tex: f64,
    pub w_texfg: f64,

    // template initialization
    pub template_iterations: usize,
    pub template_batch: usize,
    pub template_lr: f64,
    pub template_tolerance: f64,
    pub template_check_every: usize,
    pub template_chamfer_samples: usize,

    // synthetic data
    pub instances: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub bend_quadratic: f64,
    pub bend_cubic: f64,

    // rendering overrides; None = keep the fitted camera
    pub azimuth: Option<f64>,
    pub elevation: Option<f64>,
    pub camera_scale: Option<f64>,

    // evaluation
    pub pck_fraction: f64,
    pub iou_resolution: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fit = FitConfig::default();
        let w = LossWeights::default();
        let tpl = TemplateFitConfig::default();
        let spec = DeformSpec::default();
        RunConfig {
            template: String::new(),
            checkpoint: String::new(),
            data: String::new(),
            out: String::new(),
            gt: String::new(),
            target: String::new(),
            view: String::new(),
            transfer_from: String::new(),
            transfer_to: String::new(),
            shape_latent_dim: 8,
            texture_latent_dim: 8,
            hidden_width: 64,
            mesh_level: 3,
            iterations: fit.iterations,
            lr_nets: fit.lr_nets,
            lr_texture: fit.lr_texture,
            lr_latents: fit.lr_latents,
            lr_cameras: fit.lr_cameras,
            lr_maps: fit.lr_maps,
            delta_enable_fraction: fit.delta_enable_fraction,
            hypotheses: fit.hypotheses,
            prune_after: fit.prune_after,
            hypothesis_elevation: fit.hypothesis_elevation,
            atlas_level: fit.atlas_level,
            map_size: fit.map_size,
            gcc_pixel_cap: fit.gcc_pixel_cap,
            boundary_pixel_cap: fit.boundary_pixel_cap,
            boundary_sample_count: fit.boundary_sample_count,
            seed: fit.seed,
            w_mask: w.w_mask,
            w_boundary: w.w_boundary,
            w_gcc: w.w_gcc,
            w_kp: w.w_kp,
            w_rigid: w.w_rigid,
            w_tex: w.w_tex,
            w_texfg: w.w_texfg,
            template_iterations: tpl.iterations,
            template_batch: tpl.batch,
            template_lr: tpl.lr,
            template_tolerance: tpl.tolerance,
            template_check_every: tpl.check_every,
            template_chamfer_samples: tpl.chamfer_samples,
            instances: 8,
            views: 4,
            height: 64,
            width: 64,
            scale_min: spec.scale_min,
            scale_max: spec.scale_max,
            bend_quadratic: spec.bend_quadratic,
            bend_cubic: spec.bend_cubic,
            azimuth: None,
            elevation: None,
            camera_scale: None,
            pck_fraction: 0.1,
            iou_resolution: 32,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Argument(format!("config: {key}={value}: {e}")))
}

fn parse_opt(key: &str, value: &str) -> Result<Option<f64>> {
    if value.trim().is_empty() {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn opt_str(v: &Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "template" => self.template = value.to_string(),
            "checkpoint" => self.checkpoint = value.to_string(),
            "data" => self.data = value.to_string(),
            "out" => self.out = value.to_string(),
            "gt" => self.gt = value.to_string(),
            "target" => self.target = value.to_string(),
            "view" => self.view = value.to_string(),
            "transfer_from" => self.transfer_from = value.to_string(),
            "transfer_to" => self.transfer_to = value.to_string(),
            "shape_latent_dim" => self.shape_latent_dim = parse_num(key, value)?,
            "texture_latent_dim" => self.texture_latent_dim = parse_num(key, value)?,
            "hidden_width" => self.hidden_width = parse_num(key, value)?,
            "mesh_level" => self.mesh_level = parse_num(key, value)?,
            "iterations" => self.iterations = parse_num(key, value)?,
            "lr_nets" => self.lr_nets = parse_num(key, value)?,
            "lr_texture" => self.lr_texture = parse_num(key, value)?,
            "lr_latents" => self.lr_latents = parse_num(key, value)?,
            "lr_cameras" => self.lr_cameras = parse_num(key, value)?,
            "lr_maps" => self.lr_maps = parse_num(key, value)?,
            "delta_enable_fraction" => self.delta_enable_fraction = parse_num(key, value)?,
            "hypotheses" => self.hypotheses = parse_num(key, value)?,
            "prune_after" => self.prune_after = parse_num(key, value)?,
            "hypothesis_elevation" => self.hypothesis_elevation = parse_num(key, value)?,
            "atlas_level" => self.atlas_level = parse_num(key, value)?,
            "map_size" => self.map_size = parse_num(key, value)?,
            "gcc_pixel_cap" => self.gcc_pixel_cap = parse_num(key, value)?,
            "boundary_pixel_cap" => self.boundary_pixel_cap = parse_num(key, value)?,
            "boundary_sample_count" => self.boundary_sample_count = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "w_mask" => self.w_mask = parse_num(key, value)?,
            "w_boundary" => self.w_boundary = parse_num(key, value)?,
            "w_gcc" => self.w_gcc = parse_num(key, value)?,
            "w_kp" => self.w_kp = parse_num(key, value)?,
            "w_rigid" => self.w_rigid = parse_num(key, value)?,
            "w_tex" => self.w_tex = parse_num(key, value)?,
            "w_texfg" => self.w_texfg = parse_num(key, value)?,
            "template_iterations" => self.template_iterations = parse_num(key, value)?,
            "template_batch" => self.template_batch = parse_num(key, value)?,
            "template_lr" => self.template_lr = parse_num(key, value)?,
            "template_tolerance" => self.template_tolerance = parse_num(key, value)?,
            "template_check_every" => self.template_check_every = parse_num(key, value)?,
            "template_chamfer_samples" => {
                self.template_chamfer_samples = parse_num(key, value)?
            }
            "instances" => self.instances = parse_num(key, value)?,
            "views" => self.views = parse_num(key, value)?,
            "height" => self.height = parse_num(key, value)?,
            "width" => self.width = parse_num(key, value)?,
            "scale_min" => self.scale_min = parse_num(key, value)?,
            "scale_max" => self.scale_max = parse_num(key, value)?,
            "bend_quadratic" => self.bend_quadratic = parse_num(key, value)?,
            "bend_cubic" => self.bend_cubic = parse_num(key, value)?,
            "azimuth" => self.azimuth = parse_opt(key, value)?,
            "elevation" => self.elevation = parse_opt(key, value)?,
            "camera_scale" => self.camera_scale = parse_opt(key, value)?,
            "pck_fraction" => self.pck_fraction = parse_num(key, value)?,
            "iou_resolution" => self.iou_resolution = parse_num(key, value)?,
            _ => return Err(Error::Argument(format!("config: unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Every key in echo order, values rendered exactly as `set` reads them.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("template", self.template.clone()),
            ("checkpoint", self.checkpoint.clone()),
            ("data", self.data.clone()),
            ("out", self.out.clone()),
            ("gt", self.gt.clone()),
            ("target", self.target.clone()),
            ("view", self.view.clone()),
            ("transfer_from", self.transfer_from.clone()),
            ("transfer_to", self.transfer_to.clone()),
            ("shape_latent_dim", self.shape_latent_dim.to_string()),
            ("texture_latent_dim", self.texture_latent_dim.to_string()),
            ("hidden_width", self.hidden_width.to_string()),
            ("mesh_level", self.mesh_level.to_string()),
            ("iterations", self.iterations.to_string()),
            ("lr_nets", self.lr_nets.to_string()),
            ("lr_texture", self.lr_texture.to_string()),
            ("lr_latents", self.lr_latents.to_string()),
            ("lr_cameras", self.lr_cameras.to_string()),
            ("lr_maps", self.lr_maps.to_string()),
            ("delta_enable_fraction", self.delta_enable_fraction.to_string()),
            ("hypotheses", self.hypotheses.to_string()),
            ("prune_after", self.prune_after.to_string()),
            ("hypothesis_elevation", self.hypothesis_elevation.to_string()),
            ("atlas_level", self.atlas_level.to_string()),
            ("map_size", self.map_size.to_string()),
            ("gcc_pixel_cap", self.gcc_pixel_cap.to_string()),
            ("boundary_pixel_cap", self.boundary_pixel_cap.to_string()),
            ("boundary_sample_count", self.boundary_sample_count.to_string()),
            ("seed", self.seed.to_string()),
            ("w_mask", self.w_mask.to_string()),
            ("w_boundary", self.w_boundary.to_string()),
            ("w_gcc", self.w_gcc.to_string()),
            ("w_kp", self.w_kp.to_string()),
            ("w_rigid", self.w_rigid.to_string()),
            ("w_tex", self.w_tex.to_string()),
            ("w_texfg", self.w_texfg.to_string()),
            ("template_iterations", self.template_iterations.to_string()),
            ("template_batch", self.template_batch.to_string()),
            ("template_lr", self.template_lr.to_string()),
            ("template_tolerance", self.template_tolerance.to_string()),
            ("template_check_every", self.template_check_every.to_string()),
            ("template_chamfer_samples", self.template_chamfer_samples.to_string()),
            ("instances", self.instances.to_string()),
            ("views", self.views.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("scale_min", self.scale_min.to_string()),
            ("scale_max", self.scale_max.to_string()),
            ("bend_quadratic", self.bend_quadratic.to_string()),
            ("bend_cubic", self.bend_cubic.to_string()),
            ("azimuth", opt_str(&self.azimuth)),
            ("elevation", opt_str(&self.elevation)),
            ("camera_scale", opt_str(&self.camera_scale)),
            ("pck_fraction", self.pck_fraction.to_string()),
            ("iou_resolution", self.iou_resolution.to_string()),
        ]
    }

    /// The pipe-back-able echo block.
    pub fn render(&self, command: &str) -> String {
        let mut out = format!("{CONFIG_VERSION}\ncommand={command}\n");
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Applies a config file. The `command` key, if present, must match.
    pub fn apply_file(&mut self, path: &Path, command: &str) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(head) if head.trim_end() == CONFIG_VERSION => {}
            Some(head) => {
                return Err(Error::Argument(format!(
                    "{}: version line '{}' does not match '{CONFIG_VERSION}'",
                    path.display(),
                    head.trim_end()
                )))
            }
            None => return Err(Error::Argument(format!("{}: empty file", path.display()))),
        }
        for (n, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Argument(format!(
                    "{}: line {}: expected key=value",
                    path.display(),
                    n + 2
                )));
            };
            let key = key.trim();
            if key == "command" {
                if value.trim() != command {
                    return Err(Error::Argument(format!(
                        "{}: config is for '{}', not '{command}'",
                        path.display(),
                        value.trim()
                    )));
                }
                continue;
            }
            self.set(key, value.trim())
                .map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            iterations: self.iterations,
            lr_nets: self.lr_nets,
            lr_texture: self.lr_texture,
            lr_latents: self.lr_latents,
            lr_cameras: self.lr_cameras,
            lr_maps: self.lr_maps,
            delta_enable_fraction: self.delta_enable_fraction,
            hypotheses: self.hypotheses,
            prune_after: self.prune_after,
            hypothesis_elevation: self.hypothesis_elevation,
            weights: self.loss_weights(),
            seed: self.seed,
            atlas_level: self.atlas_level,
            map_size: self.map_size,
            gcc_pixel_cap: self.gcc_pixel_cap,
            boundary_pixel_cap: self.boundary_pixel_cap,
            boundary_sample_count: self.boundary_sample_count,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w_mask: self.w_mask,
            w_boundary: self.w_boundary,
            w_gcc: self.w_gcc,
            w_kp: self.w_kp,
            w_rigid: self.w_rigid,
            w_tex: self.w_tex,
            w_texfg: self.w_texfg,
        }
    }

    pub fn template_config(&self) -> TemplateFitConfig {
        TemplateFitConfig {
            iterations: self.template_iterations,
            batch: self.template_batch,
            lr: self.template_lr,
            tolerance: self.template_tolerance,
            seed: self.seed,
            check_every: self.template_check_every,
            chamfer_samples: self.template_chamfer_samples,
        }
    }

    pub fn deform_spec(&self) -> DeformSpec {
        DeformSpec {
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            bend_quadratic: self.bend_quadratic,
            bend_cubic: self.bend_cubic,
        }
    }

    /// Required-path accessor; empty means the flag/key was never given.
    pub fn require<'a>(&self, value: &'a str, key: &str) -> Result<&'a str> {
        if value.is_empty() {
            Err(Error::Argument(format!("missing required setting '{key}'")))
        } else {
            Ok(value)
        }
    }
}
