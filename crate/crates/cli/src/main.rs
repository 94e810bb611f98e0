mod commands;
mod config;
mod dataset;

use std::path::PathBuf;
use std::process::exit;

use clap::{Args, Parser, Subcommand};
use spherefit_core::error::Error;

use config::RunConfig;

/// Fits a deformable sphere-parameterized surface, camera and texture flow
/// to silhouetted views, and evaluates the result.
#[derive(Parser)]
#[command(name = "spherefit", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

/// Settings every subcommand understands. Resolution order is defaults,
/// then --config, then these flags.
#[derive(Args)]
struct Common {
    /// key=value config file applied before the flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; also receives the resolved config
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Icosphere level for meshes, renders and evaluation
    #[arg(long)]
    mesh_level: Option<usize>,
}

#[derive(Args)]
struct FitFlags {
    /// Input dataset directory
    #[arg(long)]
    data: Option<String>,
    /// Template checkpoint providing the shape and texture spaces
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    hypotheses: Option<usize>,
    #[arg(long)]
    prune_after: Option<usize>,
    #[arg(long)]
    atlas_level: Option<usize>,
    #[arg(long)]
    map_size: Option<usize>,
    #[arg(long)]
    delta_enable_fraction: Option<f64>,
    #[arg(long)]
    lr_nets: Option<f64>,
    #[arg(long)]
    lr_latents: Option<f64>,
    #[arg(long)]
    lr_cameras: Option<f64>,
    #[arg(long)]
    w_mask: Option<f64>,
    #[arg(long)]
    w_boundary: Option<f64>,
    #[arg(long)]
    w_gcc: Option<f64>,
    #[arg(long)]
    w_kp: Option<f64>,
    #[arg(long)]
    w_rigid: Option<f64>,
    #[arg(long)]
    w_tex: Option<f64>,
    #[arg(long)]
    w_texfg: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit the mean surface to a target mesh and write a template checkpoint
    InitTemplate {
        #[command(flatten)]
        common: Common,
        /// Target mesh OBJ (alternative to --target)
        #[arg(long)]
        template: Option<String>,
        /// Builtin target: sphere | ellipsoid:ax,ay,az
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        shape_latent_dim: Option<usize>,
        #[arg(long)]
        texture_latent_dim: Option<usize>,
        #[arg(long)]
        hidden_width: Option<usize>,
        #[arg(long)]
        template_iterations: Option<usize>,
        #[arg(long)]
        template_batch: Option<usize>,
        #[arg(long)]
        template_lr: Option<f64>,
        #[arg(long)]
        template_tolerance: Option<f64>,
    },
    /// Render a synthetic multi-view dataset from a template mesh
    Synth {
        #[command(flatten)]
        common: Common,
        /// Template mesh OBJ with sphere-coordinate normals
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        scale_min: Option<f64>,
        #[arg(long)]
        scale_max: Option<f64>,
        #[arg(long)]
        bend_quadratic: Option<f64>,
        #[arg(long)]
        bend_cubic: Option<f64>,
    },
    /// Fit each view of a dataset on its own
    Fit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fit: FitFlags,
        /// Fit only this view id
        #[arg(long)]
        view: Option<String>,
    },
    /// Fit all views jointly with shared networks and per-instance latents
    FitCollection {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fit: FitFlags,
    },
    /// Re-render a fitted view, optionally from a novel camera
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        /// View id inside the checkpoint
        #[arg(long)]
        view: Option<String>,
        /// Dataset directory; enables the textured dump
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        /// Novel-view azimuth in radians
        #[arg(long)]
        azimuth: Option<f64>,
        /// Novel-view elevation in radians
        #[arg(long)]
        elevation: Option<f64>,
        #[arg(long)]
        camera_scale: Option<f64>,
    },
    /// Score a fit: keypoint reprojection, keypoint transfer, voxel IoU
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        data: Option<String>,
        /// Ground-truth mesh directory (default <data>/gt)
        #[arg(long)]
        gt: Option<String>,
        #[arg(long)]
        pck_fraction: Option<f64>,
        #[arg(long)]
        iou_resolution: Option<usize>,
    },
    /// Carry annotated keypoints from one view to another through the fit
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        data: Option<String>,
        /// Source view id
        #[arg(long)]
        from: Option<String>,
        /// Destination view id
        #[arg(long)]
        to: Option<String>,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::InitTemplate { .. } => "init-template",
            Cmd::Synth { .. } => "synth",
            Cmd::Fit { .. } => "fit",
            Cmd::FitCollection { .. } => "fit-collection",
            Cmd::Render { .. } => "render",
            Cmd::Eval { .. } => "eval",
            Cmd::Transfer { .. } => "transfer",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Cmd::InitTemplate { common, .. }
            | Cmd::Synth { common, .. }
            | Cmd::Fit { common, .. }
            | Cmd::FitCollection { common, .. }
            | Cmd::Render { common, .. }
            | Cmd::Eval { common, .. }
            | Cmd::Transfer { common, .. } => common,
        }
    }
}

fn set_if<T: ToString>(cfg: &mut RunConfig, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        cfg.set(key, &v.to_string()).expect("flag keys are valid config keys");
    }
}

fn apply_fit_flags(cfg: &mut RunConfig, f: &FitFlags) {
    set_if(cfg, "data", &f.data);
    set_if(cfg, "checkpoint", &f.checkpoint);
    set_if(cfg, "iterations", &f.iterations);
    set_if(cfg, "hypotheses", &f.hypotheses);
    set_if(cfg, "prune_after", &f.prune_after);
    set_if(cfg, "atlas_level", &f.atlas_level);
    set_if(cfg, "map_size", &f.map_size);
    set_if(cfg, "delta_enable_fraction", &f.delta_enable_fraction);
    set_if(cfg, "lr_nets", &f.lr_nets);
    set_if(cfg, "lr_latents", &f.lr_latents);
    set_if(cfg, "lr_cameras", &f.lr_cameras);
    set_if(cfg, "w_mask", &f.w_mask);
    set_if(cfg, "w_boundary", &f.w_boundary);
    set_if(cfg, "w_gcc", &f.w_gcc);
    set_if(cfg, "w_kp", &f.w_kp);
    set_if(cfg, "w_rigid", &f.w_rigid);
    set_if(cfg, "w_tex", &f.w_tex);
    set_if(cfg, "w_texfg", &f.w_texfg);
}

fn resolve(cmd: &Cmd) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    let common = cmd.common();
    if let Some(path) = &common.config {
        cfg.apply_file(path, cmd.name())?;
    }
    set_if(&mut cfg, "out", &common.out);
    set_if(&mut cfg, "seed", &common.seed);
    set_if(&mut cfg, "mesh_level", &common.mesh_level);
    match cmd {
        Cmd::InitTemplate {
            template,
            target,
            shape_latent_dim,
            texture_latent_dim,
            hidden_width,
            template_iterations,
            template_batch,
            template_lr,
            template_tolerance,
            ..
        } => {
            set_if(&mut cfg, "template", template);
            set_if(&mut cfg, "target", target);
            set_if(&mut cfg, "shape_latent_dim", shape_latent_dim);
            set_if(&mut cfg, "texture_latent_dim", texture_latent_dim);
            set_if(&mut cfg, "hidden_width", hidden_width);
            set_if(&mut cfg, "template_iterations", template_iterations);
            set_if(&mut cfg, "template_batch", template_batch);
            set_if(&mut cfg, "template_lr", template_lr);
            set_if(&mut cfg, "template_tolerance", template_tolerance);
        }
        Cmd::Synth {
            template,
            instances,
            views,
            height,
            width,
            scale_min,
            scale_max,
            bend_quadratic,
            bend_cubic,
            ..
        } => {
            set_if(&mut cfg, "template", template);
            set_if(&mut cfg, "instances", instances);
            set_if(&mut cfg, "views", views);
            set_if(&mut cfg, "height", height);
            set_if(&mut cfg, "width", width);
            set_if(&mut cfg, "scale_min", scale_min);
            set_if(&mut cfg, "scale_max", scale_max);
            set_if(&mut cfg, "bend_quadratic", bend_quadratic);
            set_if(&mut cfg, "bend_cubic", bend_cubic);
        }
        Cmd::Fit { fit, view, .. } => {
            apply_fit_flags(&mut cfg, fit);
            set_if(&mut cfg, "view", view);
        }
        Cmd::FitCollection { fit, .. } => apply_fit_flags(&mut cfg, fit),
        Cmd::Render {
            checkpoint,
            view,
            data,
            height,
            width,
            azimuth,
            elevation,
            camera_scale,
            ..
        } => {
            set_if(&mut cfg, "checkpoint", checkpoint);
            set_if(&mut cfg, "view", view);
            set_if(&mut cfg, "data", data);
            set_if(&mut cfg, "height", height);
            set_if(&mut cfg, "width", width);
            set_if(&mut cfg, "azimuth", azimuth);
            set_if(&mut cfg, "elevation", elevation);
            set_if(&mut cfg, "camera_scale", camera_scale);
        }
        Cmd::Eval { checkpoint, data, gt, pck_fraction, iou_resolution, .. } => {
            set_if(&mut cfg, "checkpoint", checkpoint);
            set_if(&mut cfg, "data", data);
            set_if(&mut cfg, "gt", gt);
            set_if(&mut cfg, "pck_fraction", pck_fraction);
            set_if(&mut cfg, "iou_resolution", iou_resolution);
        }
        Cmd::Transfer { checkpoint, data, from, to, .. } => {
            set_if(&mut cfg, "checkpoint", checkpoint);
            set_if(&mut cfg, "data", data);
            set_if(&mut cfg, "transfer_from", from);
            set_if(&mut cfg, "transfer_to", to);
        }
    }
    Ok(cfg)
}

fn run(cmd: &Cmd) -> Result<(), Error> {
    let cfg = resolve(cmd)?;
    match cmd {
        Cmd::InitTemplate { .. } => commands::init_template(&cfg),
        Cmd::Synth { .. } => commands::synth(&cfg),
        Cmd::Fit { .. } => commands::fit(&cfg),
        Cmd::FitCollection { .. } => commands::fit_collection_cmd(&cfg),
        Cmd::Render { .. } => commands::render(&cfg),
        Cmd::Eval { .. } => commands::eval(&cfg),
        Cmd::Transfer { .. } => commands::transfer(&cfg),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                exit(0);
            }
            eprintln!("{e}");
            exit(1);
        }
    };
    match run(&cli.command) {
        Ok(()) => {}
        Err(e @ Error::Numeric(_)) => {
            eprintln!("error: {e}");
            exit(3);
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit(2);
        }
    }
}
