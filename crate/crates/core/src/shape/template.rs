//! Mean-shape initialization: fit φ̄ to a template surface by repeatedly
//! matching random surface samples.
//!
//! Every iteration draws a fresh batch of template surface points and a
//! fresh batch of sphere points, pairs φ̄(u_i) with the targets by optimal
//! assignment, and descends the mean matched squared distance. The
//! assignment is treated as fixed during the backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{chamfer_distance, icosphere, sample_sphere, sample_surface, TriMesh};
use crate::optim::{Adam, AdamState};

use super::{hungarian::hungarian_match, MlpVars, ShapeSpace};

#[derive(Debug, Clone)]
pub struct TemplateFitConfig {
    pub iterations: usize,
    /// Points sampled per iteration on each side of the matching.
    pub batch: usize,
    pub lr: f64,
    /// Absolute surface-to-surface distance the fit must reach.
    pub tolerance: f64,
    pub seed: u64,
    /// Convergence-check cadence; 0 disables early stopping.
    pub check_every: usize,
    /// Sample count per side for the bidirectional distance estimate.
    pub chamfer_samples: usize,
}

impl Default for TemplateFitConfig {
    fn default() -> Self {
        TemplateFitConfig {
            iterations: 2000,
            batch: 1000,
            lr: 1e-3,
            tolerance: 0.02,
            seed: 0,
            check_every: 250,
            chamfer_samples: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TemplateFitReport {
    pub final_chamfer: f64,
    pub iterations_run: usize,
    pub converged: bool,
    pub loss_history: Vec<f64>,
}

impl TemplateFitReport {
    /// Promote non-convergence to an error carrying the final value.
    pub fn check(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "template fit did not converge: final surface distance {:.6} above tolerance",
                self.final_chamfer
            )))
        }
    }
}

/// Mean-net-only mesh: vertex i = φ̄(atlas sample i).
pub fn extract_mean_mesh(
    space: &ShapeSpace,
    atlas: &crate::geometry::SphereAtlas,
) -> Result<TriMesh> {
    let vars = space.mean_net.constants();
    let u = Tensor::from_rows(atlas.samples());
    let verts = super::symmetrize(&u, |pts| vars.forward(pts))?;
    let vertices = verts.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    TriMesh::new(vertices, atlas.faces().to_vec(), atlas.samples().to_vec())
}

/// Fit the mean net to `template`. The deformation net is never touched.
pub fn fit_template(
    space: &mut ShapeSpace,
    template: &TriMesh,
    cfg: &TemplateFitConfig,
) -> Result<TemplateFitReport> {
    space.validate()?;
    template.validate()?;
    if cfg.batch == 0 || cfg.iterations == 0 {
        return Err(Error::Argument(
            "fit_template: iterations and batch must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = Adam::new(cfg.lr);
    let mut states: Vec<AdamState> = space
        .mean_net
        .layers
        .iter()
        .flat_map(|l| [AdamState::new(l.w.len()), AdamState::new(l.b.len())])
        .collect();
    let check_atlas = icosphere(3)?;

    let mut history = Vec::with_capacity(cfg.iterations);
    let mut iterations_run = 0;
    let mut early = None;
    for it in 0..cfg.iterations {
        let targets = sample_surface(template, cfg.batch, &mut rng)?;
        let us = sample_sphere(cfg.batch, &mut rng);

        let tape = Tape::new();
        let vars: MlpVars = space.mean_net.tracked(&tape)?;
        let u = Tensor::from_rows(&us);
        let x = super::symmetrize(&u, |pts| vars.forward(pts))?;
        let points: Vec<[f64; 3]> = x.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let (assignment, _) = hungarian_match(&points, &targets)?;
        let matched: Vec<[f64; 3]> = assignment.iter().map(|&j| targets[j]).collect();
        let diff = x.sub(&Tensor::from_rows(&matched))?;
        let loss = diff.mul(&diff)?.sum_axis(1)?.mean()?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "fit_template: loss became non-finite at iteration {it}"
            )));
        }
        history.push(value);

        let grads = tape.backward(&loss)?;
        let grad_bufs: Vec<Vec<f64>> = vars
            .all()
            .iter()
            .map(|t| grads.wrt(t).data().to_vec())
            .collect();
        for ((buf, state), grad) in space
            .mean_net
            .buffers_mut()
            .into_iter()
            .zip(&mut states)
            .zip(&grad_bufs)
        {
            adam.step(state, buf, grad)?;
        }
        iterations_run = it + 1;

        if cfg.check_every > 0 && (it + 1) % cfg.check_every == 0 && it + 1 < cfg.iterations {
            let mesh = extract_mean_mesh(space, &check_atlas)?;
            let d = chamfer_distance(&mesh, template, cfg.chamfer_samples, cfg.seed ^ 0x51ab)?;
            log::info!("template fit iteration {}: loss {value:.6}, surface distance {d:.6}", it + 1);
            if d < cfg.tolerance * 0.8 {
                early = Some(d);
                break;
            }
        }
    }

    let final_chamfer = match early {
        Some(d) => d,
        None => {
            let mesh = extract_mean_mesh(space, &check_atlas)?;
            chamfer_distance(&mesh, template, cfg.chamfer_samples, cfg.seed ^ 0x51ab)?
        }
    };
    Ok(TemplateFitReport {
        final_chamfer,
        iterations_run,
        converged: final_chamfer < cfg.tolerance,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::icosphere;
    use crate::shape::ShapeSpace;

    fn sphere_template() -> TriMesh {
        let atlas = icosphere(2).unwrap();
        TriMesh::new(
            atlas.samples().to_vec(),
            atlas.faces().to_vec(),
            atlas.samples().to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn short_fit_moves_toward_sphere() {
        let mut space = ShapeSpace::init(4, 32, 17);
        let template = sphere_template();
        let cfg = TemplateFitConfig {
            iterations: 220,
            batch: 160,
            lr: 3e-3,
            tolerance: 0.08,
            seed: 5,
            check_every: 0,
            chamfer_samples: 600,
        };
        let report = fit_template(&mut space, &template, &cfg).unwrap();
        assert_eq!(report.iterations_run, 220);
        assert!(
            report.final_chamfer < 0.08,
            "surface distance {} after short fit",
            report.final_chamfer
        );
        assert!(report.check().is_ok());
        // loss went down substantially overall
        let head: f64 = report.loss_history[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 =
            report.loss_history[report.loss_history.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head * 0.5, "head {head}, tail {tail}");
    }

    #[test]
    fn deform_net_is_untouched() {
        let mut space = ShapeSpace::init(4, 32, 17);
        let before = space.deform_net.clone();
        let cfg = TemplateFitConfig {
            iterations: 5,
            batch: 50,
            lr: 1e-3,
            tolerance: 1.0,
            seed: 1,
            check_every: 0,
            chamfer_samples: 100,
        };
        fit_template(&mut space, &sphere_template(), &cfg).unwrap();
        for (a, b) in space.deform_net.layers.iter().zip(&before.layers) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }
    }

    #[test]
    fn unconverged_report_checks_as_error() {
        let mut space = ShapeSpace::init(4, 32, 17);
        let cfg = TemplateFitConfig {
            iterations: 2,
            batch: 40,
            lr: 1e-4,
            tolerance: 1e-6,
            seed: 1,
            check_every: 0,
            chamfer_samples: 100,
        };
        let report = fit_template(&mut space, &sphere_template(), &cfg).unwrap();
        assert!(!report.converged);
        assert!(matches!(report.check(), Err(Error::Numeric(_))));
    }
}
