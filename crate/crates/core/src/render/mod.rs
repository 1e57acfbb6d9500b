//! Orthographic rendering of scalar fields into normal maps, isosurface
//! extraction, rasterization and image/mesh export.
//!
//! All cameras are orthographic and look at the origin from a yaw angle
//! around the +y axis. The view frame of a camera at angle `theta` is
//!
//! * `toward = (sin theta, 0, cos theta)` — from the scene centre towards the
//!   camera,
//! * `right = (cos theta, 0, -sin theta)`,
//! * `up = (0, 1, 0)`,
//!
//! so view coordinates are `(p . right, p . up, p . toward)` and the camera
//! sees the `[-1, 1]^2` square of the view xy-plane. Rays enter the domain at
//! view depth `z = 1` and march along `-toward` for at most the domain depth
//! of 2.

mod io;
mod mc;
mod raster;
mod raymarch;
mod tables;

pub use io::{load_normal_map, read_pfm, save_normal_map, write_obj, write_pfm, write_ppm};
pub use mc::marching_cubes;
pub use raster::rasterize_normal_map;
pub use raymarch::{
    render_normal_map, render_normal_map_backprop, render_view, HitPixel, RenderParams,
    RenderedView,
};

use crate::geom::Vec3;
use crate::{Error, Result};

/// A camera yaw angle in degrees around the +y axis. 0 is the front view
/// (camera on +z), 90 and 270 are the side views, 180 is the back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewAngle {
    pub degrees: f64,
}

impl ViewAngle {
    pub const FRONT: ViewAngle = ViewAngle { degrees: 0.0 };
    pub const RIGHT: ViewAngle = ViewAngle { degrees: 90.0 };
    pub const BACK: ViewAngle = ViewAngle { degrees: 180.0 };
    pub const LEFT: ViewAngle = ViewAngle { degrees: 270.0 };

    /// The four named views in report order.
    pub const ALL: [ViewAngle; 4] =
        [ViewAngle::FRONT, ViewAngle::RIGHT, ViewAngle::BACK, ViewAngle::LEFT];

    /// The unsupervised side views.
    pub const SIDES: [ViewAngle; 2] = [ViewAngle::RIGHT, ViewAngle::LEFT];

    pub fn radians(self) -> f64 {
        self.degrees.to_radians()
    }

    /// Orthonormal view frame `(right, up, toward)`.
    pub fn basis(self) -> (Vec3, Vec3, Vec3) {
        let (s, c) = self.radians().sin_cos();
        (Vec3::new(c, 0.0, -s), Vec3::new(0.0, 1.0, 0.0), Vec3::new(s, 0.0, c))
    }

    /// World point to view coordinates.
    pub fn world_to_view(self, p: Vec3) -> Vec3 {
        let (r, u, t) = self.basis();
        Vec3::new(p.dot(r), p.dot(u), p.dot(t))
    }

    /// View coordinates back to world.
    pub fn view_to_world(self, v: Vec3) -> Vec3 {
        let (r, u, t) = self.basis();
        r * v.x + u * v.y + t * v.z
    }

    /// Rotate a world-space direction into view space (same as
    /// [`ViewAngle::world_to_view`]; directions have no translation here).
    pub fn direction_to_view(self, d: Vec3) -> Vec3 {
        self.world_to_view(d)
    }
}

/// Centre of pixel `(i, j)` in normalized device coordinates. Pixel (0, 0)
/// is the top-left corner: x grows rightwards, y downwards in the image but
/// upwards in NDC.
pub fn pixel_to_ndc(i: usize, j: usize, w: usize, h: usize) -> (f64, f64) {
    (
        -1.0 + 2.0 * (i as f64 + 0.5) / w as f64,
        1.0 - 2.0 * (j as f64 + 0.5) / h as f64,
    )
}

/// Continuous pixel coordinates of an NDC position (the inverse of
/// [`pixel_to_ndc`]); integer values land on pixel centres.
pub fn ndc_to_pixel(x: f64, y: f64, w: usize, h: usize) -> (f64, f64) {
    (
        (x + 1.0) * 0.5 * w as f64 - 0.5,
        (1.0 - y) * 0.5 * h as f64 - 0.5,
    )
}

/// A rendered normal map: per-pixel unit normals in view space, with +z
/// pointing towards the camera. Pixels that saw no surface are masked and
/// hold exactly `(0, 0, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, `width * height` entries; row 0 is the top of the image.
    pub data: Vec<Vec3>,
}

impl NormalMap {
    pub fn new(width: usize, height: usize) -> Self {
        NormalMap { width, height, data: vec![Vec3::ZERO; width * height] }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.width && j < self.height);
        j * self.width + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Vec3 {
        self.data[self.idx(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, n: Vec3) {
        let idx = self.idx(i, j);
        self.data[idx] = n;
    }

    /// A pixel is masked iff it is exactly the zero vector.
    #[inline]
    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.get(i, j) == Vec3::ZERO
    }

    /// Number of unmasked pixels.
    pub fn coverage(&self) -> usize {
        self.data.iter().filter(|n| **n != Vec3::ZERO).count()
    }

    /// Bilinear sample at continuous pixel coordinates, treating masked
    /// pixels as zero contributions. Returns the blended (unnormalized)
    /// vector and the total weight of valid taps in [0, 1]; a weight of 0
    /// means the sample is entirely outside the silhouette.
    pub fn bilinear(&self, px: f64, py: f64) -> (Vec3, f64) {
        let cx = px.clamp(0.0, (self.width - 1) as f64);
        let cy = py.clamp(0.0, (self.height - 1) as f64);
        let i0 = (cx.floor() as usize).min(self.width - 1);
        let j0 = (cy.floor() as usize).min(self.height - 1);
        let i1 = (i0 + 1).min(self.width - 1);
        let j1 = (j0 + 1).min(self.height - 1);
        let fx = cx - i0 as f64;
        let fy = cy - j0 as f64;
        let taps = [
            (i0, j0, (1.0 - fx) * (1.0 - fy)),
            (i1, j0, fx * (1.0 - fy)),
            (i0, j1, (1.0 - fx) * fy),
            (i1, j1, fx * fy),
        ];
        let mut value = Vec3::ZERO;
        let mut weight = 0.0;
        for (i, j, w) in taps {
            let n = self.get(i, j);
            if n != Vec3::ZERO {
                value += n * w;
                weight += w;
            }
        }
        (value, weight)
    }

    /// Check that the map is well formed: every pixel is either exactly zero
    /// or finite (unit length within `tol`).
    pub fn validate(&self, tol: f64) -> Result<()> {
        for (k, n) in self.data.iter().enumerate() {
            if *n == Vec3::ZERO {
                continue;
            }
            if !n.is_finite() || (n.norm() - 1.0).abs() > tol {
                return Err(Error::Format(format!(
                    "normal map pixel {k} is neither masked nor unit: {n:?}"
                )));
            }
        }
        Ok(())
    }
}

/// An indexed triangle mesh with per-vertex normals.
#[derive(Clone, Debug, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    /// Per-vertex unit normals (same length as `vertices`).
    pub normals: Vec<Vec3>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Area of one triangle.
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (va, vb, vc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * (vb - va).cross(vc - va).norm()
    }

    /// Total surface area.
    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Axis-aligned bounds of the vertices, or `None` for an empty mesh.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let mut it = self.vertices.iter();
        let first = *it.next()?;
        let (mut lo, mut hi) = (first, first);
        for v in it {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        Some((lo, hi))
    }
}

#[cfg(test)]
mod type_tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn view_bases_are_orthonormal_and_match_named_views() {
        for v in ViewAngle::ALL {
            let (r, u, t) = v.basis();
            assert_relative_eq!(r.norm(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(u.norm(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(t.norm(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(r.dot(u), 0.0, epsilon = 1e-12);
            assert_relative_eq!(r.dot(t), 0.0, epsilon = 1e-12);
            assert_relative_eq!(u.dot(t), 0.0, epsilon = 1e-12);
            // Right-handed: right x up = toward.
            assert!((r.cross(u) - t).norm() < 1e-12);
        }
        let (_, _, t0) = ViewAngle::FRONT.basis();
        assert!((t0 - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        let (_, _, t90) = ViewAngle::RIGHT.basis();
        assert!((t90 - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        let (_, _, t180) = ViewAngle::BACK.basis();
        assert!((t180 - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn world_view_round_trip() {
        let v = ViewAngle { degrees: 37.0 };
        let p = Vec3::new(0.3, -0.2, 0.7);
        let back = v.view_to_world(v.world_to_view(p));
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn pixel_ndc_mapping() {
        // A 4-wide image: pixel 0 centre at -0.75, pixel 3 centre at 0.75.
        let (x, y) = pixel_to_ndc(0, 0, 4, 4);
        assert_relative_eq!(x, -0.75);
        assert_relative_eq!(y, 0.75);
        let (x, y) = pixel_to_ndc(3, 3, 4, 4);
        assert_relative_eq!(x, 0.75);
        assert_relative_eq!(y, -0.75);
        // Round trip through the continuous inverse.
        let (px, py) = ndc_to_pixel(x, y, 4, 4);
        assert_relative_eq!(px, 3.0, epsilon = 1e-12);
        assert_relative_eq!(py, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn bilinear_respects_mask() {
        let mut m = NormalMap::new(2, 2);
        m.set(0, 0, Vec3::new(0.0, 0.0, 1.0));
        // Other three pixels masked. Sampling at the exact centre of pixel
        // (0,0) returns it with full weight.
        let (v, w) = m.bilinear(0.0, 0.0);
        assert_relative_eq!(w, 1.0);
        assert!((v - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        // Halfway towards the masked pixel the weight halves.
        let (v, w) = m.bilinear(0.5, 0.0);
        assert_relative_eq!(w, 0.5);
        assert!((v - Vec3::new(0.0, 0.0, 0.5)).norm() < 1e-12);
        // In the fully masked corner the weight vanishes.
        let (_, w) = m.bilinear(1.0, 1.0);
        assert_relative_eq!(w, 0.0);
    }

    #[test]
    fn mesh_area_of_unit_right_triangle() {
        let mesh = TriangleMesh {
            vertices: vec![Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            triangles: vec![[0, 1, 2]],
            normals: vec![Vec3::new(0.0, 0.0, 1.0); 3],
        };
        assert_relative_eq!(mesh.area(), 0.5);
        let (lo, hi) = mesh.bounds().unwrap();
        assert!((lo - Vec3::ZERO).norm() < 1e-12);
        assert!((hi - Vec3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
    }
}
