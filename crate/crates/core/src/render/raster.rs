//! Orthographic, depth-buffered rasterization of triangle meshes into
//! normal maps.
//!
//! Complements the ray marcher: meshes extracted or authored elsewhere can
//! be turned into the same view-space normal-map format that supervision
//! and the discriminator consume. The camera model matches the marcher
//! exactly (orthographic, NDC `[-1,1]^2`, view basis from [`ViewAngle`]),
//! so rasterized and marched maps of the same surface line up pixel for
//! pixel.

use super::{ndc_to_pixel, NormalMap, TriangleMesh, ViewAngle};
use crate::geom::Vec3;

/// Rasterize `mesh` (world space, per-vertex normals) into a
/// `width x height` view-space normal map for `view`.
///
/// Depth is resolved per pixel towards the camera; when two fragments land
/// at exactly the same depth, the earlier triangle in the index buffer
/// wins, which keeps the output deterministic. Pixels covered by no
/// triangle are masked (exact zero).
pub fn rasterize_normal_map(
    mesh: &TriangleMesh,
    view: ViewAngle,
    width: usize,
    height: usize,
) -> NormalMap {
    let mut map = NormalMap::new(width, height);
    let mut depth = vec![f64::NEG_INFINITY; width * height];

    // Project once: view-space position (x, y used for coverage, z for
    // depth) and view-space normal per vertex.
    let positions: Vec<Vec3> = mesh.vertices.iter().map(|&v| view.world_to_view(v)).collect();
    let normals: Vec<Vec3> =
        mesh.normals.iter().map(|&n| view.direction_to_view(n)).collect();

    for tri in &mesh.triangles {
        let [ia, ib, ic] = *tri;
        let (pa, pb, pc) = (positions[ia], positions[ib], positions[ic]);
        let (qa, qb, qc) = (
            ndc_to_pixel(pa.x, pa.y, width, height),
            ndc_to_pixel(pb.x, pb.y, width, height),
            ndc_to_pixel(pc.x, pc.y, width, height),
        );
        // Twice the signed area in pixel space; degenerate triangles
        // contribute nothing.
        let area2 = (qb.0 - qa.0) * (qc.1 - qa.1) - (qb.1 - qa.1) * (qc.0 - qa.0);
        if area2.abs() < 1e-12 {
            continue;
        }

        let min_x = qa.0.min(qb.0).min(qc.0).floor().max(0.0) as usize;
        let max_x = (qa.0.max(qb.0).max(qc.0).ceil() as isize).min(width as isize - 1);
        let min_y = qa.1.min(qb.1).min(qc.1).floor().max(0.0) as usize;
        let max_y = (qa.1.max(qb.1).max(qc.1).ceil() as isize).min(height as isize - 1);
        if max_x < 0 || max_y < 0 {
            continue;
        }

        for py in min_y..=max_y as usize {
            for px in min_x..=max_x as usize {
                // Pixel centers are integer coordinates in the continuous
                // pixel space used by ndc_to_pixel.
                let (qx, qy) = (px as f64, py as f64);
                let la = ((qb.0 - qx) * (qc.1 - qy) - (qb.1 - qy) * (qc.0 - qx)) / area2;
                let lb = ((qc.0 - qx) * (qa.1 - qy) - (qc.1 - qy) * (qa.0 - qx)) / area2;
                let lc = 1.0 - la - lb;
                if la < -1e-12 || lb < -1e-12 || lc < -1e-12 {
                    continue;
                }
                let z = la * pa.z + lb * pb.z + lc * pc.z;
                let at = py * width + px;
                if z <= depth[at] {
                    continue;
                }
                let n = normals[ia] * la + normals[ib] * lb + normals[ic] * lc;
                let n = match n.normalized() {
                    Some(u) => u,
                    // Opposing interpolated normals cancel; fall back to
                    // the face normal so covered pixels stay unmasked.
                    None => {
                        let face = (positions[ib] - positions[ia])
                            .cross(positions[ic] - positions[ia]);
                        match face.normalized() {
                            Some(u) => u,
                            None => continue,
                        }
                    }
                };
                depth[at] = z;
                map.set(px, py, n);
            }
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{AnalyticSdf, Vec3};
    use crate::m2o::StencilConfig;
    use crate::render::{marching_cubes, pixel_to_ndc, render_normal_map, RenderParams};

    fn sphere_mesh(center: Vec3, radius: f64) -> TriangleMesh {
        let shape = AnalyticSdf::Sphere { center, radius };
        marching_cubes(&shape, 48, 0.0).unwrap()
    }

    #[test]
    fn sphere_coverage_matches_silhouette_area() {
        let mesh = sphere_mesh(Vec3::ZERO, 0.5);
        let map = rasterize_normal_map(&mesh, ViewAngle::FRONT, 64, 64);
        // Silhouette fills pi r^2 of the 2x2 NDC square.
        let expected = std::f64::consts::PI * 0.25 / 4.0;
        let fraction = map.coverage() as f64 / (64.0 * 64.0);
        assert!(
            (fraction - expected).abs() < 0.02,
            "coverage {fraction} vs silhouette fraction {expected}"
        );
    }

    #[test]
    fn sphere_normals_are_unit_and_front_facing() {
        let mesh = sphere_mesh(Vec3::ZERO, 0.5);
        let map = rasterize_normal_map(&mesh, ViewAngle::FRONT, 48, 48);
        for j in 0..48 {
            for i in 0..48 {
                if map.is_masked(i, j) {
                    continue;
                }
                let n = map.get(i, j);
                assert!((n.norm() - 1.0).abs() < 1e-9);
                assert!(n.z > 0.0, "visible sphere normal must face the camera");
            }
        }
        // Centre pixel looks straight down the axis.
        let c = map.get(24, 24);
        assert!(c.z > 0.99, "centre normal {c:?}");
    }

    #[test]
    fn raster_and_ray_march_agree_on_a_sphere() {
        let shape = AnalyticSdf::Sphere { center: Vec3::ZERO, radius: 0.5 };
        let mesh = marching_cubes(&shape, 64, 0.0).unwrap();
        let (w, h) = (32, 32);
        let rastered = rasterize_normal_map(&mesh, ViewAngle::FRONT, w, h);
        let marched =
            render_normal_map(&shape, ViewAngle::FRONT, &RenderParams::new(w, h, StencilConfig::analytic()));
        let mut both = 0;
        let mut disagree_mask = 0;
        let mut max_err: f64 = 0.0;
        for j in 0..h {
            for i in 0..w {
                match (rastered.is_masked(i, j), marched.is_masked(i, j)) {
                    (false, false) => {
                        both += 1;
                        max_err = max_err.max((rastered.get(i, j) - marched.get(i, j)).norm());
                    }
                    (true, true) => {}
                    _ => disagree_mask += 1,
                }
            }
        }
        assert!(both > 150, "expected substantial shared coverage, got {both}");
        // Mask may differ on the silhouette ring only.
        assert!(disagree_mask < 40, "mask disagreement {disagree_mask}");
        assert!(max_err < 0.08, "normal disagreement {max_err}");
    }

    #[test]
    fn views_see_the_offset_of_an_off_centre_sphere() {
        let mesh = sphere_mesh(Vec3::new(0.4, 0.0, 0.0), 0.2);
        // Centroid of unmasked pixels in NDC.
        let centroid = |map: &NormalMap| {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for j in 0..map.height {
                for i in 0..map.width {
                    if !map.is_masked(i, j) {
                        let (x, y) = pixel_to_ndc(i, j, map.width, map.height);
                        sx += x;
                        sy += y;
                        n += 1.0;
                    }
                }
            }
            (sx / n, sy / n)
        };
        let front = rasterize_normal_map(&mesh, ViewAngle::FRONT, 64, 64);
        let (fx, fy) = centroid(&front);
        assert!((fx - 0.4).abs() < 0.05 && fy.abs() < 0.05, "front centroid ({fx}, {fy})");
        // From the right-hand side view the +x offset recedes along the
        // view axis, so the silhouette re-centres.
        let right = rasterize_normal_map(&mesh, ViewAngle::RIGHT, 64, 64);
        let (rx, ry) = centroid(&right);
        assert!(rx.abs() < 0.05 && ry.abs() < 0.05, "right centroid ({rx}, {ry})");
    }

    #[test]
    fn rasterization_is_deterministic() {
        let mesh = sphere_mesh(Vec3::new(0.1, -0.05, 0.2), 0.45);
        let a = rasterize_normal_map(&mesh, ViewAngle::LEFT, 40, 40);
        let b = rasterize_normal_map(&mesh, ViewAngle::LEFT, 40, 40);
        assert_eq!(a.data.len(), b.data.len());
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.x.to_bits(), y.x.to_bits());
            assert_eq!(x.y.to_bits(), y.y.to_bits());
            assert_eq!(x.z.to_bits(), y.z.to_bits());
        }
    }

    #[test]
    fn empty_mesh_renders_fully_masked() {
        let mesh = TriangleMesh { vertices: vec![], triangles: vec![], normals: vec![] };
        let map = rasterize_normal_map(&mesh, ViewAngle::FRONT, 8, 8);
        assert_eq!(map.coverage(), 0);
    }
}
