//! Analytic signed-distance primitives and combinators.
//!
//! These supply ground truth for training and evaluation: exact (or, for the
//! blended/combined nodes, lower-bound) signed distances with closed-form
//! gradients. Gradients are computed per node with the chain rule; at points
//! where the true distance function is not differentiable (medial axis,
//! primitive centres) the gradient picks one subgradient, and
//! [`AnalyticSdf::normal`] reports [`Error::SingularPoint`] when even that
//! direction is undefined.

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::ScalarField;

/// Gradient norms below this are treated as singular when normalising.
const SINGULAR_TOL: f64 = 1e-9;

/// An analytic signed-distance tree: negative inside, positive outside.
#[derive(Clone, Debug)]
pub enum AnalyticSdf {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    /// Axis-aligned box.
    Cuboid {
        center: Vec3,
        half_extents: Vec3,
    },
    /// Segment from `a` to `b` inflated by `radius`.
    Capsule {
        a: Vec3,
        b: Vec3,
        radius: f64,
    },
    /// Ring of radius `major` around the y axis through `center`, with tube
    /// radius `minor`.
    Torus {
        center: Vec3,
        major: f64,
        minor: f64,
    },
    /// Hard union: pointwise minimum over children.
    Union(Vec<AnalyticSdf>),
    /// Exponential smooth union with blend sharpness `k` (larger is harder).
    /// The value is a lower bound on the true distance to the blended shape.
    SmoothUnion {
        children: Vec<AnalyticSdf>,
        k: f64,
    },
    /// Child moved by `offset`.
    Translate {
        child: Box<AnalyticSdf>,
        offset: Vec3,
    },
    /// Child uniformly scaled about the origin by `factor > 0`.
    Scale {
        child: Box<AnalyticSdf>,
        factor: f64,
    },
}

impl AnalyticSdf {
    /// Signed distance at `p` (a lower bound for blended nodes).
    pub fn eval(&self, p: Vec3) -> f64 {
        match self {
            AnalyticSdf::Sphere { center, radius } => (p - *center).norm() - radius,
            AnalyticSdf::Cuboid { center, half_extents } => {
                let q = (p - *center).abs() - *half_extents;
                let outside = q.max(Vec3::ZERO).norm();
                let inside = q.max_component().min(0.0);
                outside + inside
            }
            AnalyticSdf::Capsule { a, b, radius } => {
                let pa = p - *a;
                let ba = *b - *a;
                let h = (pa.dot(ba) / ba.norm_squared()).clamp(0.0, 1.0);
                (pa - ba * h).norm() - radius
            }
            AnalyticSdf::Torus { center, major, minor } => {
                let q = p - *center;
                let rho = (q.x * q.x + q.z * q.z).sqrt();
                ((rho - major).powi(2) + q.y * q.y).sqrt() - minor
            }
            AnalyticSdf::Union(children) => {
                children.iter().map(|c| c.eval(p)).fold(f64::INFINITY, f64::min)
            }
            AnalyticSdf::SmoothUnion { children, k } => {
                // -(1/k) ln sum exp(-k d_i), computed stably around the min.
                let ds: Vec<f64> = children.iter().map(|c| c.eval(p)).collect();
                let m = ds.iter().copied().fold(f64::INFINITY, f64::min);
                let s: f64 = ds.iter().map(|d| (-(d - m) * k).exp()).sum();
                m - s.ln() / k
            }
            AnalyticSdf::Translate { child, offset } => child.eval(p - *offset),
            AnalyticSdf::Scale { child, factor } => factor * child.eval(p / *factor),
        }
    }

    /// Spatial gradient at `p`. For exact primitives this has unit length
    /// away from singular sets; for blended nodes it is the gradient of the
    /// blended value.
    pub fn gradient(&self, p: Vec3) -> Vec3 {
        match self {
            AnalyticSdf::Sphere { center, .. } => {
                (p - *center).normalized().unwrap_or(Vec3::ZERO)
            }
            AnalyticSdf::Cuboid { center, half_extents } => {
                let d = p - *center;
                let q = d.abs() - *half_extents;
                let sign = Vec3::new(
                    if d.x >= 0.0 { 1.0 } else { -1.0 },
                    if d.y >= 0.0 { 1.0 } else { -1.0 },
                    if d.z >= 0.0 { 1.0 } else { -1.0 },
                );
                let outside = q.max(Vec3::ZERO);
                if let Some(dir) = outside.normalized() {
                    Vec3::new(dir.x * sign.x, dir.y * sign.y, dir.z * sign.z)
                } else {
                    // Inside: distance is the largest (least negative)
                    // component of q; move along that axis.
                    let mut axis = 0;
                    if q.y > q.get(axis) {
                        axis = 1;
                    }
                    if q.z > q.get(axis) {
                        axis = 2;
                    }
                    Vec3::axis(axis) * sign.get(axis)
                }
            }
            AnalyticSdf::Capsule { a, b, .. } => {
                let pa = p - *a;
                let ba = *b - *a;
                let h = (pa.dot(ba) / ba.norm_squared()).clamp(0.0, 1.0);
                (pa - ba * h).normalized().unwrap_or(Vec3::ZERO)
            }
            AnalyticSdf::Torus { center, major, minor: _ } => {
                let q = p - *center;
                let rho = (q.x * q.x + q.z * q.z).sqrt();
                if rho < SINGULAR_TOL {
                    // On the torus axis the nearest ring point is any point of
                    // the ring; the in-plane direction is undefined.
                    return if q.y.abs() < SINGULAR_TOL {
                        Vec3::ZERO
                    } else {
                        // Distance still varies with y; project the gradient.
                        let denom = (major * major + q.y * q.y).sqrt();
                        Vec3::new(0.0, q.y / denom, 0.0)
                    };
                }
                let ring = Vec3::new(q.x / rho * (rho - major), q.y, q.z / rho * (rho - major));
                ring.normalized().unwrap_or(Vec3::ZERO)
            }
            AnalyticSdf::Union(children) => {
                let mut best = f64::INFINITY;
                let mut grad = Vec3::ZERO;
                for c in children {
                    let d = c.eval(p);
                    if d < best {
                        best = d;
                        grad = c.gradient(p);
                    }
                }
                grad
            }
            AnalyticSdf::SmoothUnion { children, k } => {
                // Softmin weights: w_i = exp(-k d_i) / sum_j exp(-k d_j).
                let ds: Vec<f64> = children.iter().map(|c| c.eval(p)).collect();
                let m = ds.iter().copied().fold(f64::INFINITY, f64::min);
                let ws: Vec<f64> = ds.iter().map(|d| (-(d - m) * k).exp()).collect();
                let total: f64 = ws.iter().sum();
                let mut grad = Vec3::ZERO;
                for (c, w) in children.iter().zip(&ws) {
                    grad += c.gradient(p) * (w / total);
                }
                grad
            }
            AnalyticSdf::Translate { child, offset } => child.gradient(p - *offset),
            // d(p) = s * child(p/s), so the gradient is child's gradient at
            // p/s unchanged.
            AnalyticSdf::Scale { child, factor } => child.gradient(p / *factor),
        }
    }

    /// Unit outward normal at `p`, or [`Error::SingularPoint`] where the
    /// gradient direction is undefined.
    pub fn normal(&self, p: Vec3) -> Result<Vec3> {
        self.gradient(p).normalized().ok_or(Error::SingularPoint { p })
    }

    /// Conservative axis-aligned bounding box `(lo, hi)` of the surface.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        match self {
            AnalyticSdf::Sphere { center, radius } => {
                (*center - Vec3::splat(*radius), *center + Vec3::splat(*radius))
            }
            AnalyticSdf::Cuboid { center, half_extents } => {
                (*center - *half_extents, *center + *half_extents)
            }
            AnalyticSdf::Capsule { a, b, radius } => {
                (a.min(*b) - Vec3::splat(*radius), a.max(*b) + Vec3::splat(*radius))
            }
            AnalyticSdf::Torus { center, major, minor } => {
                let r = major + minor;
                (
                    *center - Vec3::new(r, *minor, r),
                    *center + Vec3::new(r, *minor, r),
                )
            }
            AnalyticSdf::Union(children) => bbox_union(children),
            AnalyticSdf::SmoothUnion { children, k } => {
                // The blended surface can bulge outside the children's union
                // by at most ln(n)/k (the gap between smooth and hard min).
                let (lo, hi) = bbox_union(children);
                let pad = (children.len().max(1) as f64).ln() / k;
                (lo - Vec3::splat(pad), hi + Vec3::splat(pad))
            }
            AnalyticSdf::Translate { child, offset } => {
                let (lo, hi) = child.bounding_box();
                (lo + *offset, hi + *offset)
            }
            AnalyticSdf::Scale { child, factor } => {
                let (lo, hi) = child.bounding_box();
                (lo * *factor, hi * *factor)
            }
        }
    }

    /// Wrap this shape so that its bounding box, after centring, fits inside
    /// `[-1, 1]^3` with the given margin. Returns the wrapped shape together
    /// with the `(offset, scale)` applied, so the same normalisation can be
    /// reused for companion shapes: `p_new = (p_old + offset) * scale`.
    pub fn normalized_to_domain(&self, margin: f64) -> (AnalyticSdf, Vec3, f64) {
        let (lo, hi) = self.bounding_box();
        let center = (lo + hi) * 0.5;
        let half = (hi - lo).max_component() * 0.5;
        let scale = if half > 0.0 { (1.0 - margin) / half } else { 1.0 };
        (self.clone().transformed(-center, scale), -center, scale)
    }

    /// Apply `p_new = (p_old + offset) * scale` to the shape (translate then
    /// uniformly scale about the origin).
    pub fn transformed(self, offset: Vec3, scale: f64) -> AnalyticSdf {
        AnalyticSdf::Scale {
            child: Box::new(AnalyticSdf::Translate {
                child: Box::new(self),
                offset,
            }),
            factor: scale,
        }
        // Note the wrapper order: Translate moves the shape by `offset`
        // (eval at p - offset); Scale then magnifies about the origin.
    }
}

fn bbox_union(children: &[AnalyticSdf]) -> (Vec3, Vec3) {
    let mut lo = Vec3::splat(f64::INFINITY);
    let mut hi = Vec3::splat(f64::NEG_INFINITY);
    for c in children {
        let (l, h) = c.bounding_box();
        lo = lo.min(l);
        hi = hi.max(h);
    }
    (lo, hi)
}

impl ScalarField for AnalyticSdf {
    fn value(&self, p: Vec3) -> f64 {
        self.eval(p)
    }

    fn spatial_gradient(&self, p: Vec3) -> Vec3 {
        self.gradient(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::rng::Rng;

    fn sphere(cx: f64, cy: f64, cz: f64, r: f64) -> AnalyticSdf {
        AnalyticSdf::Sphere { center: Vec3::new(cx, cy, cz), radius: r }
    }

    #[test]
    fn sphere_center_and_surface() {
        let s = sphere(0.0, 0.0, 0.0, 0.5);
        assert_relative_eq!(s.eval(Vec3::ZERO), -0.5);
        assert_relative_eq!(s.eval(Vec3::new(0.5, 0.0, 0.0)), 0.0);
        assert_relative_eq!(s.eval(Vec3::new(0.0, 1.0, 0.0)), 0.5);
    }

    #[test]
    fn union_takes_minimum() {
        let u = AnalyticSdf::Union(vec![
            sphere(-0.4, 0.0, 0.0, 0.2),
            sphere(0.5, 0.0, 0.0, 0.3),
        ]);
        // Point at +x 1.0: distances are 1.2 and 0.2.
        assert_relative_eq!(u.eval(Vec3::new(1.0, 0.0, 0.0)), 0.2, epsilon = 1e-12);
        // Inside the second sphere.
        assert_relative_eq!(u.eval(Vec3::new(0.5, 0.0, 0.0)), -0.3, epsilon = 1e-12);
    }

    #[test]
    fn smooth_union_lower_bounds_hard_union() {
        let a = sphere(-0.3, 0.0, 0.0, 0.25);
        let b = sphere(0.3, 0.0, 0.0, 0.25);
        let hard = AnalyticSdf::Union(vec![a.clone(), b.clone()]);
        let smooth = AnalyticSdf::SmoothUnion { children: vec![a, b], k: 8.0 };
        let mut rng = Rng::new(11);
        for _ in 0..200 {
            let p = Vec3::new(rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0));
            assert!(smooth.eval(p) <= hard.eval(p) + 1e-12);
            // The gap is bounded by ln(2)/k.
            assert!(hard.eval(p) - smooth.eval(p) <= 2f64.ln() / 8.0 + 1e-12);
        }
    }

    #[test]
    fn capsule_matches_hand_values() {
        let c = AnalyticSdf::Capsule {
            a: Vec3::new(0.0, -0.5, 0.0),
            b: Vec3::new(0.0, 0.5, 0.0),
            radius: 0.2,
        };
        // Beside the middle of the segment.
        assert_relative_eq!(c.eval(Vec3::new(0.5, 0.0, 0.0)), 0.3, epsilon = 1e-12);
        // Beyond an endpoint along the axis.
        assert_relative_eq!(c.eval(Vec3::new(0.0, 1.0, 0.0)), 0.3, epsilon = 1e-12);
        // On the axis, inside.
        assert_relative_eq!(c.eval(Vec3::ZERO), -0.2, epsilon = 1e-12);
    }

    #[test]
    fn torus_matches_hand_values() {
        let t = AnalyticSdf::Torus { center: Vec3::ZERO, major: 0.5, minor: 0.1 };
        // On the ring.
        assert_relative_eq!(t.eval(Vec3::new(0.5, 0.0, 0.0)), -0.1, epsilon = 1e-12);
        // At the centre: distance to ring is 0.5.
        assert_relative_eq!(t.eval(Vec3::ZERO), 0.4, epsilon = 1e-12);
        // Above the ring.
        assert_relative_eq!(t.eval(Vec3::new(0.5, 0.3, 0.0)), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn cuboid_inside_outside() {
        let b = AnalyticSdf::Cuboid {
            center: Vec3::ZERO,
            half_extents: Vec3::new(0.4, 0.3, 0.2),
        };
        assert_relative_eq!(b.eval(Vec3::ZERO), -0.2, epsilon = 1e-12); // nearest face is z
        assert_relative_eq!(b.eval(Vec3::new(1.0, 0.0, 0.0)), 0.6, epsilon = 1e-12);
        // Corner region: distance to the corner point.
        let corner = Vec3::new(0.4, 0.3, 0.2);
        let p = corner + Vec3::new(0.3, 0.4, 0.0);
        assert_relative_eq!(b.eval(p), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn normals_match_known_directions() {
        let s = sphere(0.0, 0.0, 0.0, 0.5);
        let n = s.normal(Vec3::new(0.25, 0.0, 0.0)).unwrap();
        assert_relative_eq!(n.x, 1.0, epsilon = 1e-12);

        let b = AnalyticSdf::Cuboid { center: Vec3::ZERO, half_extents: Vec3::splat(0.3) };
        let n = b.normal(Vec3::new(0.0, 0.9, 0.0)).unwrap();
        assert_relative_eq!(n.y, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sphere_center_is_singular() {
        let s = sphere(0.1, 0.2, 0.3, 0.5);
        match s.normal(Vec3::new(0.1, 0.2, 0.3)) {
            Err(Error::SingularPoint { .. }) => {}
            other => panic!("expected SingularPoint, got {other:?}"),
        }
    }

    /// The analytic gradients must agree with central differences of the
    /// value, for every node kind, away from singular sets.
    #[test]
    fn gradients_match_central_differences() {
        let shapes: Vec<AnalyticSdf> = vec![
            sphere(0.1, -0.2, 0.05, 0.4),
            AnalyticSdf::Cuboid { center: Vec3::new(0.1, 0.0, -0.1), half_extents: Vec3::new(0.3, 0.2, 0.25) },
            AnalyticSdf::Capsule { a: Vec3::new(-0.3, -0.4, 0.0), b: Vec3::new(0.2, 0.4, 0.1), radius: 0.15 },
            AnalyticSdf::Torus { center: Vec3::new(0.0, 0.1, 0.0), major: 0.45, minor: 0.12 },
            AnalyticSdf::SmoothUnion {
                children: vec![sphere(-0.3, 0.0, 0.0, 0.25), sphere(0.3, 0.1, 0.0, 0.3)],
                k: 10.0,
            },
            AnalyticSdf::Translate {
                child: Box::new(sphere(0.0, 0.0, 0.0, 0.3)),
                offset: Vec3::new(0.2, -0.1, 0.3),
            },
            AnalyticSdf::Scale { child: Box::new(sphere(0.1, 0.0, 0.0, 0.5)), factor: 0.7 },
        ];
        let h = 1e-6;
        let mut rng = Rng::new(3);
        for shape in &shapes {
            let mut checked = 0;
            let mut attempts = 0;
            while checked < 40 {
                attempts += 1;
                assert!(attempts < 10_000, "could not find smooth test points for {shape:?}");
                let p = Vec3::new(rng.range(-0.9, 0.9), rng.range(-0.9, 0.9), rng.range(-0.9, 0.9));
                let g = shape.gradient(p);
                // Skip points too close to non-smooth sets, where finite
                // differences straddle a kink: detect a kink as an outsized
                // second difference at step h.
                if g.norm() < 0.5 || shape.eval(p).abs() < 2.0 * h {
                    continue;
                }
                let mut fd = Vec3::ZERO;
                let mut kinked = false;
                for k in 0..3 {
                    let e = Vec3::axis(k) * h;
                    let d2 = (shape.eval(p + e) + shape.eval(p - e) - 2.0 * shape.eval(p)).abs();
                    kinked = kinked || d2 > 1e-7;
                    fd.set(k, (shape.eval(p + e) - shape.eval(p - e)) / (2.0 * h));
                }
                if kinked {
                    continue;
                }
                assert!(
                    (g - fd).norm() < 1e-4,
                    "gradient mismatch for {shape:?} at {p:?}: {g:?} vs {fd:?}"
                );
                checked += 1;
            }
        }
    }

    /// Exact primitives produce unit gradients away from singular sets.
    #[test]
    fn primitive_gradients_are_unit() {
        let shapes: Vec<AnalyticSdf> = vec![
            sphere(0.0, 0.0, 0.0, 0.4),
            AnalyticSdf::Cuboid { center: Vec3::ZERO, half_extents: Vec3::new(0.3, 0.2, 0.25) },
            AnalyticSdf::Capsule { a: Vec3::new(0.0, -0.4, 0.0), b: Vec3::new(0.0, 0.4, 0.0), radius: 0.15 },
            AnalyticSdf::Torus { center: Vec3::ZERO, major: 0.45, minor: 0.12 },
        ];
        let mut rng = Rng::new(17);
        for shape in &shapes {
            for _ in 0..200 {
                let p = Vec3::new(rng.range(-0.9, 0.9), rng.range(-0.9, 0.9), rng.range(-0.9, 0.9));
                let g = shape.gradient(p);
                if g.norm() > 1e-6 {
                    assert_relative_eq!(g.norm(), 1.0, epsilon = 1e-9);
                }
            }
        }
    }

    /// |sdf| must equal the true distance to the surface, checked against a
    /// brute-force closest point over a dense surface tessellation.
    #[test]
    fn sdf_magnitude_matches_brute_force_surface_distance() {
        let s = sphere(0.05, -0.1, 0.0, 0.45);
        // Dense sample of the sphere surface.
        let mut surface = Vec::new();
        let n = 200;
        for i in 0..n {
            for j in 0..n {
                let theta = std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
                let phi = std::f64::consts::TAU * j as f64 / n as f64;
                surface.push(
                    Vec3::new(0.05, -0.1, 0.0)
                        + 0.45 * Vec3::new(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin()),
                );
            }
        }
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let p = Vec3::new(rng.range(-0.9, 0.9), rng.range(-0.9, 0.9), rng.range(-0.9, 0.9));
            let brute = surface.iter().map(|&q| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert!(
                (s.eval(p).abs() - brute).abs() < 1e-3,
                "sdf magnitude {} vs brute force {brute}",
                s.eval(p).abs()
            );
        }
    }

    #[test]
    fn normalization_fits_domain_with_margin() {
        let c = AnalyticSdf::Capsule {
            a: Vec3::new(0.0, -2.0, 0.0),
            b: Vec3::new(0.0, 3.0, 0.0),
            radius: 0.5,
        };
        let (norm, offset, scale) = c.normalized_to_domain(0.1);
        let (lo, hi) = norm.bounding_box();
        assert!(lo.x >= -0.9 - 1e-9 && hi.x <= 0.9 + 1e-9);
        assert!(lo.y >= -0.9 - 1e-9 && hi.y <= 0.9 + 1e-9);
        assert_relative_eq!(hi.y, 0.9, epsilon = 1e-9);
        // The transform maps old points to new points consistently: the value
        // at a mapped point is the scaled original value.
        let p = Vec3::new(0.3, 1.0, -0.2);
        let mapped = (p + offset) * scale;
        assert_relative_eq!(norm.eval(mapped), scale * c.eval(p), epsilon = 1e-12);
    }
}
