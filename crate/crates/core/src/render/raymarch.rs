//! Orthographic sphere tracing of a scalar field into view-space normal
//! maps, with a parameter-gradient path for the rendered normals.
//!
//! Rays march in lockstep: each iteration gathers the positions of all still
//! active rays into one batched field evaluation, advances them by a clamped
//! fraction of the local field value, and retires rays that leave the
//! domain. A sign change brackets the surface and a batched secant iteration
//! refines the crossing. This keeps the field in large-batch evaluation mode
//! throughout, which is what makes rendering affordable for the learned
//! field.

use super::{pixel_to_ndc, NormalMap, ViewAngle};
use crate::field::{ParamGradient, SdfField};
use crate::geom::Vec3;
use crate::m2o::{axis_stencil, m2o_gradient_batch, GradientMode, StencilConfig};
use crate::{Error, Result, ScalarField};

/// Sphere-tracing parameters. The defaults fit fields whose values are
/// roughly metric (unit gradient): steps are a fixed fraction of the local
/// value, clamped so that untrained fields neither crawl nor overshoot.
#[derive(Clone, Copy, Debug)]
pub struct RenderParams {
    pub width: usize,
    pub height: usize,
    /// Fraction of the field value marched per step.
    pub step_scale: f64,
    /// Smallest and largest step along the ray.
    pub min_step: f64,
    pub max_step: f64,
    /// A sample with `|phi|` below this is a direct hit; the secant stops
    /// refining at this tolerance too.
    pub hit_tol: f64,
    /// Upper bound on marching iterations per ray.
    pub max_steps: usize,
    /// Stencil used for the normals at the hit points.
    pub stencil: StencilConfig,
}

impl RenderParams {
    pub fn new(width: usize, height: usize, stencil: StencilConfig) -> Self {
        RenderParams {
            width,
            height,
            step_scale: 0.8,
            min_step: 1e-3,
            max_step: 0.05,
            hit_tol: 1e-4,
            max_steps: 256,
            stencil,
        }
    }
}

/// One surviving ray during the march.
#[derive(Clone, Copy)]
struct Ray {
    pixel: usize,
    t: f64,
    prev_t: f64,
    prev_phi: f64,
}

/// A sign-change bracket being refined by the secant iteration.
#[derive(Clone, Copy)]
struct Bracket {
    pixel: usize,
    t_out: f64,
    phi_out: f64,
    t_in: f64,
    phi_in: f64,
}

/// A pixel that saw the surface, with the world-space hit point.
#[derive(Clone, Copy, Debug)]
pub struct HitPixel {
    pub pixel: usize,
    pub point: Vec3,
}

/// A rendered view: the normal map plus the hit list, kept so that callers
/// can push gradients through the same hit points without re-marching.
#[derive(Clone, Debug)]
pub struct RenderedView {
    pub map: NormalMap,
    pub hits: Vec<HitPixel>,
    pub view: ViewAngle,
}

/// March all pixels of a view and return hit points (no normals yet).
fn march<S: ScalarField>(field: &S, view: ViewAngle, params: &RenderParams) -> Vec<HitPixel> {
    let (w, h) = (params.width, params.height);
    let (right, up, toward) = view.basis();
    let dir = -toward;
    let origin_of = |pixel: usize| -> Vec3 {
        let (i, j) = (pixel % w, pixel / w);
        let (x, y) = pixel_to_ndc(i, j, w, h);
        right * x + up * y + toward * 1.0
    };

    let mut active: Vec<Ray> = (0..w * h)
        .map(|pixel| Ray { pixel, t: 0.0, prev_t: 0.0, prev_phi: f64::INFINITY })
        .collect();
    let mut brackets: Vec<Bracket> = Vec::new();
    let mut hits: Vec<HitPixel> = Vec::new();
    let mut positions: Vec<Vec3> = Vec::new();

    for _ in 0..params.max_steps {
        if active.is_empty() {
            break;
        }
        positions.clear();
        positions.extend(active.iter().map(|r| origin_of(r.pixel) + dir * r.t));
        let values = field.value_batch(&positions);

        let mut next = Vec::with_capacity(active.len());
        for (ray, (&phi, &pos)) in active.iter().zip(values.iter().zip(&positions)) {
            if phi.abs() <= params.hit_tol {
                hits.push(HitPixel { pixel: ray.pixel, point: pos });
            } else if phi < 0.0 {
                if ray.prev_phi.is_finite() {
                    brackets.push(Bracket {
                        pixel: ray.pixel,
                        t_out: ray.prev_t,
                        phi_out: ray.prev_phi,
                        t_in: ray.t,
                        phi_in: phi,
                    });
                } else {
                    // Started inside the surface: count the entry plane as
                    // the hit rather than marching out of a solid.
                    hits.push(HitPixel { pixel: ray.pixel, point: pos });
                }
            } else {
                let t = ray.t + (params.step_scale * phi).clamp(params.min_step, params.max_step);
                if t <= 2.0 {
                    next.push(Ray { pixel: ray.pixel, t, prev_t: ray.t, prev_phi: phi });
                }
            }
        }
        active = next;
    }

    // Batched secant refinement of the sign-change brackets.
    for _ in 0..8 {
        if brackets.is_empty() {
            break;
        }
        positions.clear();
        positions.extend(brackets.iter().map(|b| {
            let t = secant_t(b);
            origin_of(b.pixel) + dir * t
        }));
        let values = field.value_batch(&positions);
        let mut keep = Vec::with_capacity(brackets.len());
        for (b, (&phi, &pos)) in brackets.iter().zip(values.iter().zip(&positions)) {
            let t = secant_t(b);
            if phi.abs() <= params.hit_tol {
                hits.push(HitPixel { pixel: b.pixel, point: pos });
            } else {
                let mut nb = *b;
                if phi > 0.0 {
                    nb.t_out = t;
                    nb.phi_out = phi;
                } else {
                    nb.t_in = t;
                    nb.phi_in = phi;
                }
                keep.push(nb);
            }
        }
        brackets = keep;
    }
    // Whatever brackets remain are taken at their current secant estimate;
    // the interval is at most one marching step wide by construction.
    for b in &brackets {
        let t = secant_t(b);
        hits.push(HitPixel { pixel: b.pixel, point: origin_of(b.pixel) + dir * t });
    }

    hits.sort_by_key(|hp| hp.pixel);
    hits
}

fn secant_t(b: &Bracket) -> f64 {
    let denom = b.phi_in - b.phi_out;
    if denom.abs() < 1e-300 {
        0.5 * (b.t_out + b.t_in)
    } else {
        (b.t_out - b.phi_out * (b.t_in - b.t_out) / denom).clamp(
            b.t_out.min(b.t_in),
            b.t_out.max(b.t_in),
        )
    }
}

/// View-space unit normals of the field at the given hit points (the
/// normalized stencil gradient rotated into the view frame). A hit whose
/// gradient vanishes yields a zero (masked) normal.
pub fn normals_at_hits<S: ScalarField>(
    field: &S,
    view: ViewAngle,
    hits: &[HitPixel],
    cfg: &StencilConfig,
) -> Vec<Vec3> {
    let points: Vec<Vec3> = hits.iter().map(|h| h.point).collect();
    let grads = m2o_gradient_batch(field, &points, cfg);
    grads
        .iter()
        .map(|g| match g.normalized() {
            Some(n) => view.direction_to_view(n),
            None => Vec3::ZERO,
        })
        .collect()
}

/// Render a normal map and keep the hit list for gradient passes.
pub fn render_view<S: ScalarField>(
    field: &S,
    view: ViewAngle,
    params: &RenderParams,
) -> RenderedView {
    let raw_hits = march(field, view, params);
    let normals = normals_at_hits(field, view, &raw_hits, &params.stencil);
    let mut map = NormalMap::new(params.width, params.height);
    // A vanishing field gradient leaves its pixel masked; drop such hits so
    // that the hit list and the mask stay in one-to-one correspondence.
    let mut hits = Vec::with_capacity(raw_hits.len());
    for (h, n) in raw_hits.iter().zip(&normals) {
        if *n != Vec3::ZERO {
            map.data[h.pixel] = *n;
            hits.push(*h);
        }
    }
    RenderedView { map, hits, view }
}

/// Render just the normal map.
pub fn render_normal_map<S: ScalarField>(
    field: &S,
    view: ViewAngle,
    params: &RenderParams,
) -> NormalMap {
    render_view(field, view, params).map
}

/// Parameter gradient of a scalar loss through the rendered normals, with
/// the hit points held fixed (the marching itself is not differentiated).
///
/// `upstream[k]` is `dL/dn` for the view-space normal of `hits[k]`. The
/// chain is: rotate the upstream back to world space, apply the
/// normalization Jacobian `(I - n n^T)/|g|`, then push through the gradient
/// stencil (m2o mode) or the exact spatial-gradient path (analytic mode).
pub fn render_normal_map_backprop(
    field: &SdfField,
    view: ViewAngle,
    hits: &[HitPixel],
    upstream: &[Vec3],
    cfg: &StencilConfig,
) -> Result<ParamGradient> {
    if hits.len() != upstream.len() {
        return Err(Error::ShapeMismatch { expected: hits.len(), got: upstream.len() });
    }
    let points: Vec<Vec3> = hits.iter().map(|h| h.point).collect();
    let grads = m2o_gradient_batch(field, &points, cfg);

    // dL/dg per hit, in world space.
    let (r, u, t) = view.basis();
    let to_world = |v: Vec3| r * v.x + u * v.y + t * v.z;
    let mut grad_upstream = vec![Vec3::ZERO; hits.len()];
    for k in 0..hits.len() {
        let g = grads[k];
        let norm = g.norm();
        if norm < 1e-12 {
            continue; // masked: the pixel contributed nothing
        }
        let n = g / norm;
        let dn_world = to_world(upstream[k]);
        grad_upstream[k] = (dn_world - n * n.dot(dn_world)) / norm;
    }

    match cfg.mode {
        GradientMode::Analytic => field.backprop_spatial_gradient(&points, &grad_upstream),
        GradientMode::M2o => {
            // Expand each hit into its six stencil evaluations.
            let mut positions = Vec::with_capacity(points.len() * 6);
            let mut ups = Vec::with_capacity(points.len() * 6);
            for (k, &p) in points.iter().enumerate() {
                let dv = grad_upstream[k];
                for axis in 0..3 {
                    let st = axis_stencil(p, axis, cfg.epsilon);
                    let (cp, cm) = st.first_coeffs();
                    positions.push(st.q_plus);
                    ups.push(dv.get(axis) * cp);
                    positions.push(st.q_minus);
                    ups.push(dv.get(axis) * cm);
                }
            }
            field.backprop_params(&positions, &ups)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::AnalyticSdf;
    use crate::rng::Rng;
    use approx::assert_relative_eq;

    fn sphere(r: f64) -> AnalyticSdf {
        AnalyticSdf::Sphere { center: Vec3::ZERO, radius: r }
    }

    fn params(res: usize) -> RenderParams {
        RenderParams::new(res, res, StencilConfig::m2o(1e-3))
    }

    #[test]
    fn sphere_normals_match_analytic() {
        let shape = sphere(0.5);
        let view = render_view(&shape, ViewAngle::FRONT, &params(64));
        let map = &view.map;
        // Centre pixel: normal straight at the camera. With an even
        // resolution the centre pixel is slightly off-axis, so compare to
        // the analytic normal at the actual hit.
        for &(ndc_x, ndc_y) in &[(0.0, 0.0), (0.3, 0.0), (0.0, -0.35), (0.25, 0.25)] {
            let (px, py) = super::super::ndc_to_pixel(ndc_x, ndc_y, 64, 64);
            let (i, j) = (px.round() as usize, py.round() as usize);
            let n = map.get(i, j);
            assert!(!map.is_masked(i, j), "pixel under the silhouette must hit");
            let (x, y) = pixel_to_ndc(i, j, 64, 64);
            let nz = (0.25 - x * x - y * y).sqrt() / 0.5;
            let expected = Vec3::new(x / 0.5, y / 0.5, nz);
            assert!(
                (n - expected).norm() < 2e-3,
                "pixel ({i},{j}): got {n:?}, want {expected:?}"
            );
            assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn coverage_matches_silhouette_area() {
        let shape = sphere(0.5);
        let map = render_normal_map(&shape, ViewAngle::FRONT, &params(64));
        let frac = map.coverage() as f64 / (64.0 * 64.0);
        let expected = std::f64::consts::PI * 0.25 / 4.0;
        assert!(
            (frac - expected).abs() < 0.02,
            "coverage {frac} should be near {expected}"
        );
        // Far corner pixels see nothing.
        assert!(map.is_masked(0, 0));
        assert!(map.is_masked(63, 63));
    }

    #[test]
    fn off_centre_sphere_is_seen_where_each_view_expects_it() {
        let shape = AnalyticSdf::Sphere { center: Vec3::new(0.2, 0.0, 0.0), radius: 0.5 };
        // Front view: disc centre shifts to ndc x = +0.2.
        let front = render_normal_map(&shape, ViewAngle::FRONT, &params(64));
        let (px, py) = super::super::ndc_to_pixel(0.2, 0.0, 64, 64);
        assert!(!front.is_masked(px.round() as usize, py.round() as usize));
        let (qx, qy) = super::super::ndc_to_pixel(-0.45, 0.0, 64, 64);
        assert!(front.is_masked(qx.round() as usize, qy.round() as usize));

        // Right view (camera on +x): the sphere stays centred, nearer the
        // camera; the central ray hits at world (0.7, 0, 0).
        let right = render_view(&shape, ViewAngle::RIGHT, &params(64));
        let centre_pixel = {
            let (px, py) = super::super::ndc_to_pixel(0.0, 0.0, 64, 64);
            (py.round() as usize) * 64 + px.round() as usize
        };
        let hit = right
            .hits
            .iter()
            .find(|h| h.pixel == centre_pixel)
            .expect("central pixel must hit the sphere");
        // The pixel centre is 1/64 off axis, so allow a pixel of slack.
        assert!((hit.point - Vec3::new(0.7, 0.0, 0.0)).norm() < 0.05);
        assert!((shape.eval(hit.point)).abs() < 2e-4);
    }

    #[test]
    fn all_unmasked_pixels_are_unit_and_all_hits_are_on_surface() {
        let shape = AnalyticSdf::SmoothUnion {
            children: vec![
                sphere(0.4),
                AnalyticSdf::Sphere { center: Vec3::new(0.3, 0.2, 0.1), radius: 0.3 },
            ],
            k: 16.0,
        };
        let view = render_view(&shape, ViewAngle::LEFT, &params(48));
        view.map.validate(1e-9).unwrap();
        for h in &view.hits {
            assert!(shape.eval(h.point).abs() < 2e-4, "hit off surface: {:?}", h.point);
        }
        // Hit list and mask agree.
        assert_eq!(view.hits.len(), view.map.coverage());
    }

    #[test]
    fn ray_starting_inside_hits_immediately() {
        // A huge sphere swallows the whole domain: every ray starts inside.
        let shape = sphere(5.0);
        let view = render_view(&shape, ViewAngle::FRONT, &params(8));
        assert_eq!(view.hits.len(), 64);
        for h in &view.hits {
            // Hits sit on the entry plane (view depth 1).
            let v = ViewAngle::FRONT.world_to_view(h.point);
            assert_relative_eq!(v.z, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_field_renders_fully_masked() {
        let positive = |_: Vec3| 0.75;
        let map = render_normal_map(&positive, ViewAngle::FRONT, &params(16));
        assert_eq!(map.coverage(), 0);
    }

    #[test]
    fn backprop_matches_finite_differences_at_frozen_hits() {
        let mut rng = Rng::new(31);
        let scene = crate::field::tests::test_scene(60);
        let mut field = crate::field::SdfField::new(scene, &[16, 16], &mut rng);
        crate::field::warm_start(&mut field, 60, 64, 1e-3, &Rng::new(61));

        let cfg = StencilConfig::m2o(0.02);
        let mut pr = params(12);
        pr.stencil = cfg;
        let view = render_view(&field, ViewAngle::RIGHT, &pr);
        assert!(view.hits.len() > 4, "warmed field should hit");

        // Random loss over the rendered normals.
        let mut arng = Rng::new(62);
        let coeffs: Vec<Vec3> = view
            .hits
            .iter()
            .map(|_| Vec3::new(arng.range(-1.0, 1.0), arng.range(-1.0, 1.0), arng.range(-1.0, 1.0)))
            .collect();
        let loss = |f: &crate::field::SdfField| -> f64 {
            normals_at_hits(f, ViewAngle::RIGHT, &view.hits, &cfg)
                .iter()
                .zip(&coeffs)
                .map(|(n, c)| n.dot(*c))
                .sum()
        };
        let grad =
            render_normal_map_backprop(&field, ViewAngle::RIGHT, &view.hits, &coeffs, &cfg)
                .unwrap();

        let h = 1e-5;
        let n_params = field.param_count();
        let mlp_n = field.mlp.param_count();
        let mut idxrng = Rng::new(63);
        let mut probe = field.clone();
        let mut indices: Vec<usize> = (0..20).map(|_| idxrng.below(n_params)).collect();
        indices.extend((0..8).map(|_| mlp_n + idxrng.below(n_params - mlp_n)));
        for idx in indices {
            let base = *param_at(&probe, idx);
            *param_at_mut(&mut probe, idx) = base + h;
            let up = loss(&probe);
            *param_at_mut(&mut probe, idx) = base - h;
            let down = loss(&probe);
            *param_at_mut(&mut probe, idx) = base;
            let fd = (up - down) / (2.0 * h);
            let got = *grad.params().nth(idx).unwrap();
            assert!(
                (got - fd).abs() <= 1e-5 * 1.0_f64.max(fd.abs()),
                "param {idx}: {got} vs {fd}"
            );
        }
    }

    fn param_at(field: &crate::field::SdfField, idx: usize) -> &f64 {
        let mlp_n = field.mlp.param_count();
        if idx < mlp_n {
            field.mlp.params().nth(idx).unwrap()
        } else {
            &field.scene.voxel.values[idx - mlp_n]
        }
    }

    fn param_at_mut(field: &mut crate::field::SdfField, idx: usize) -> &mut f64 {
        let mlp_n = field.mlp.param_count();
        if idx < mlp_n {
            field.mlp.params_mut().nth(idx).unwrap()
        } else {
            &mut field.scene.voxel.values[idx - mlp_n]
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let shape = sphere(0.45);
        let a = render_normal_map(&shape, ViewAngle::BACK, &params(32));
        let b = render_normal_map(&shape, ViewAngle::BACK, &params(32));
        assert_eq!(a, b);
    }
}
