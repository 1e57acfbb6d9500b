//! Procedural shapes used by tests, examples and the critic's real-map pool.
//!
//! The central fixture is a "capsule person": a humanoid assembled from
//! capsules and a sphere, smooth-unioned so limbs join without creases. The
//! clothed variant adds bulk the naked prior does not have, giving the
//! reconstruction something genuine to learn, and the jittered variants form
//! a family of held-out shapes whose rendered side views act as real
//! examples for the critic.

use crate::geom::{AnalyticSdf, SceneDescription, Vec3};
use crate::rng::Rng;

/// Blend sharpness of the body: hard enough that limbs stay distinct.
const BODY_BLEND: f64 = 24.0;

/// Proportions of a capsule person, in its own (unnormalised) units where
/// the figure stands about 2.1 tall.
#[derive(Clone, Debug)]
pub struct PersonParams {
    pub torso_radius: f64,
    pub head_radius: f64,
    pub arm_radius: f64,
    pub leg_radius: f64,
    pub shoulder_half_width: f64,
    pub hip_half_width: f64,
    pub arm_spread: f64,
}

impl Default for PersonParams {
    fn default() -> Self {
        PersonParams {
            torso_radius: 0.28,
            head_radius: 0.22,
            arm_radius: 0.11,
            leg_radius: 0.13,
            shoulder_half_width: 0.28,
            hip_half_width: 0.15,
            arm_spread: 0.30,
        }
    }
}

/// The bare body: torso, head, two arms, two legs.
pub fn capsule_person_body(p: &PersonParams) -> AnalyticSdf {
    let mut parts = vec![
        AnalyticSdf::Capsule {
            a: Vec3::new(0.0, -0.20, 0.0),
            b: Vec3::new(0.0, 0.45, 0.0),
            radius: p.torso_radius,
        },
        AnalyticSdf::Sphere { center: Vec3::new(0.0, 0.78, 0.0), radius: p.head_radius },
    ];
    for side in [-1.0, 1.0] {
        parts.push(AnalyticSdf::Capsule {
            a: Vec3::new(side * p.shoulder_half_width, 0.42, 0.0),
            b: Vec3::new(side * (p.shoulder_half_width + p.arm_spread), -0.25, 0.05),
            radius: p.arm_radius,
        });
        parts.push(AnalyticSdf::Capsule {
            a: Vec3::new(side * p.hip_half_width, -0.30, 0.0),
            b: Vec3::new(side * (p.hip_half_width + 0.04), -1.05, -0.02),
            radius: p.leg_radius,
        });
    }
    AnalyticSdf::SmoothUnion { children: parts, k: BODY_BLEND }
}

/// The standard reconstruction scene: the target is a clothed person (body
/// plus a soft jacket around the torso and a skirt ring at the hips); the
/// prior is the naked body. The scene is already normalised to the domain.
pub fn capsule_person_scene() -> SceneDescription {
    let params = PersonParams::default();
    let body = capsule_person_body(&params);
    let jacket = AnalyticSdf::Capsule {
        a: Vec3::new(0.0, -0.18, 0.0),
        b: Vec3::new(0.0, 0.38, 0.0),
        radius: params.torso_radius + 0.09,
    };
    let skirt = AnalyticSdf::Torus {
        center: Vec3::new(0.0, -0.34, 0.0),
        major: 0.22,
        minor: 0.14,
    };
    let clothed = AnalyticSdf::SmoothUnion {
        children: vec![body.clone(), jacket, skirt],
        k: 10.0,
    };
    SceneDescription { target: clothed, prior: body }.normalized(0.1)
}

/// A jittered relative of the capsule person, for the held-out pool.
/// Proportions vary by up to +-15%; the result is normalised to the domain.
pub fn capsule_person_variant(rng: &mut Rng) -> AnalyticSdf {
    let base = PersonParams::default();
    let mut j = |v: f64| v * rng.range(0.85, 1.15);
    let params = PersonParams {
        torso_radius: j(base.torso_radius),
        head_radius: j(base.head_radius),
        arm_radius: j(base.arm_radius),
        leg_radius: j(base.leg_radius),
        shoulder_half_width: j(base.shoulder_half_width),
        hip_half_width: j(base.hip_half_width),
        arm_spread: j(base.arm_spread),
    };
    let (shape, _, _) = capsule_person_body(&params).normalized_to_domain(0.1);
    shape
}
