//! Supervision batches: points with ground-truth signed distances.

use crate::geom::{AnalyticSdf, Vec3};
use crate::rng::Rng;

/// How a sample point was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Projected onto the surface, then perturbed by Gaussian noise.
    NearSurface,
    /// Uniform over the `[-1, 1]^3` domain.
    Uniform,
}

/// A batch of supervision points inside the domain.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub points: Vec<Vec3>,
    pub gt_sdf: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Newton projection steps used to land on the surface. For a unit-gradient
/// field each step closes the remaining distance exactly; a handful of steps
/// also handles the blended (non-metric) regions.
const PROJECT_STEPS: usize = 8;

/// Draw `n_near` surface-biased points and `n_uniform` domain-uniform points.
///
/// Near-surface points start uniform in the domain, walk to the surface with
/// Newton steps `p <- p - phi(p) * grad / |grad|^2`, and are then displaced
/// by isotropic Gaussian noise of standard deviation `sigma`. All points are
/// clamped to the domain. Each point draws from its own counter stream, so
/// the batch is identical however the loop is scheduled.
pub fn sample_batch(
    shape: &AnalyticSdf,
    n_near: usize,
    n_uniform: usize,
    sigma: f64,
    rng: &Rng,
) -> SampleBatch {
    let n = n_near + n_uniform;
    let mut points = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);

    for i in 0..n_near {
        let mut r = rng.stream(i as u64);
        points.push(near_surface_point(shape, sigma, &mut r));
        provenance.push(Provenance::NearSurface);
    }
    for i in 0..n_uniform {
        let mut r = rng.stream((n_near + i) as u64);
        points.push(uniform_point(&mut r));
        provenance.push(Provenance::Uniform);
    }

    let gt_sdf = points.iter().map(|&p| shape.eval(p)).collect();
    SampleBatch { points, gt_sdf, provenance }
}

fn uniform_point(r: &mut Rng) -> Vec3 {
    Vec3::new(r.range(-1.0, 1.0), r.range(-1.0, 1.0), r.range(-1.0, 1.0))
}

fn near_surface_point(shape: &AnalyticSdf, sigma: f64, r: &mut Rng) -> Vec3 {
    // A few restarts guard against seeds that project onto a singular set.
    for _ in 0..4 {
        let mut p = uniform_point(r);
        for _ in 0..PROJECT_STEPS {
            let d = shape.eval(p);
            let g = shape.gradient(p);
            let g2 = g.norm_squared();
            if g2 < 1e-12 {
                break;
            }
            p -= g * (d / g2);
        }
        if shape.eval(p).abs() < 1e-6 {
            let noise = Vec3::new(r.normal(), r.normal(), r.normal()) * sigma;
            return (p + noise).clamp(-1.0, 1.0);
        }
    }
    // Singular-heavy region: fall back to a uniform point rather than loop.
    uniform_point(r)
}
