//! Geometric evaluation metrics between triangle meshes.
//!
//! Three quantities are reported, all in normalized domain units:
//!
//! * **Chamfer distance** — the sum of the two directional mean distances
//!   between area-uniform surface samples of one mesh and the exact surface
//!   of the other (so two spheres offset by `d` score ≈ `d`: each
//!   direction contributes ≈ `d/2`).
//! * **P2S** — the mean distance from ground-truth surface samples to the
//!   reconstructed surface.
//! * **Normal error** — meshes are rasterized into view-space normal maps
//!   and compared per pixel. The headline number averages the L2 vector
//!   difference over the *union* of the two foreground masks, so a
//!   silhouette that exists in one mesh but not the other pays its full
//!   normal magnitude; the mask-*intersection* convention (which hides
//!   silhouette mismatch) is reported alongside. A side-only variant
//!   restricts to the 90/270 degree views, the directions that receive no
//!   direct supervision.
//!
//! Point-to-surface queries use the exact closest-feature distance
//! (face/edge/vertex) under a bounding-volume hierarchy; the hierarchy only
//! prunes, so results are bit-identical to a brute-force scan.

use crate::geom::Vec3;
use crate::render::{rasterize_normal_map, TriangleMesh, ViewAngle};
use crate::rng::Rng;
use crate::{Error, Result};

/// Squared distance from `p` to segment `ab`.
fn point_segment_distance_sq(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b - a;
    let denom = ab.dot(ab);
    let t = if denom > 0.0 { (ab.dot(p - a) / denom).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm_squared()
}

/// Exact squared distance from `p` to triangle `abc` (closest feature among
/// face interior, edges and vertices).
fn point_triangle_distance_sq(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm_squared(); // vertex a
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm_squared(); // vertex b
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (ap - ab * v).norm_squared(); // edge ab
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm_squared(); // vertex c
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (ap - ac * w).norm_squared(); // edge ac
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (bp - (c - b) * w).norm_squared(); // edge bc
    }
    let denom = va + vb + vc;
    if denom <= 0.0 {
        // Degenerate (zero-area) triangle: fall back to its edges.
        return point_segment_distance_sq(p, a, b)
            .min(point_segment_distance_sq(p, b, c))
            .min(point_segment_distance_sq(p, c, a));
    }
    let v = vb / denom;
    let w = vc / denom;
    (ap - (ab * v + ac * w)).norm_squared() // face interior
}

/// Bounding-volume hierarchy over a mesh's triangles for exact
/// closest-point queries. Median-split over centroids, small leaves; the
/// tree prunes by box distance only, so the reported distance is exactly
/// the minimum over all triangles.
pub struct SurfaceBvh {
    tris: Vec<[Vec3; 3]>,
    nodes: Vec<BvhNode>,
}

struct BvhNode {
    lo: Vec3,
    hi: Vec3,
    /// Leaf: `start..end` into `tris`. Internal: child node indices.
    a: usize,
    b: usize,
    leaf: bool,
}

const BVH_LEAF_SIZE: usize = 8;

impl SurfaceBvh {
    pub fn new(mesh: &TriangleMesh) -> Result<Self> {
        if mesh.triangles.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let mut tris: Vec<[Vec3; 3]> = mesh
            .triangles
            .iter()
            .map(|t| [mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]])
            .collect();
        let mut nodes = Vec::new();
        let n = tris.len();
        build(&mut tris, 0, n, &mut nodes);
        Ok(SurfaceBvh { tris, nodes })
    }

    /// Exact distance from `p` to the closest triangle.
    pub fn distance(&self, p: Vec3) -> f64 {
        self.distance_sq(p).sqrt()
    }

    fn distance_sq(&self, p: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(at) = stack.pop() {
            let node = &self.nodes[at];
            if aabb_distance_sq(p, node.lo, node.hi) >= best {
                continue;
            }
            if node.leaf {
                for t in &self.tris[node.a..node.b] {
                    let d = point_triangle_distance_sq(p, t[0], t[1], t[2]);
                    if d < best {
                        best = d;
                    }
                }
            } else {
                // Descend into the nearer child first so the far one is
                // more likely to be pruned.
                let (ca, cb) = (node.a, node.b);
                let da = aabb_distance_sq(p, self.nodes[ca].lo, self.nodes[ca].hi);
                let db = aabb_distance_sq(p, self.nodes[cb].lo, self.nodes[cb].hi);
                if da <= db {
                    stack.push(cb);
                    stack.push(ca);
                } else {
                    stack.push(ca);
                    stack.push(cb);
                }
            }
        }
        best
    }
}

fn aabb_distance_sq(p: Vec3, lo: Vec3, hi: Vec3) -> f64 {
    let dx = (lo.x - p.x).max(p.x - hi.x).max(0.0);
    let dy = (lo.y - p.y).max(p.y - hi.y).max(0.0);
    let dz = (lo.z - p.z).max(p.z - hi.z).max(0.0);
    dx * dx + dy * dy + dz * dz
}

/// Build the subtree over `tris[start..end]`; returns its node index.
fn build(tris: &mut [ [Vec3; 3] ], start: usize, end: usize, nodes: &mut Vec<BvhNode>) -> usize {
    let (mut lo, mut hi) = (Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY));
    for t in &tris[start..end] {
        for v in t {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let at = nodes.len();
    nodes.push(BvhNode { lo, hi, a: start, b: end, leaf: true });
    if end - start <= BVH_LEAF_SIZE {
        return at;
    }
    // Median split along the widest axis of the centroid extent.
    let centroid = |t: &[Vec3; 3]| (t[0] + t[1] + t[2]) / 3.0;
    let (mut clo, mut chi) = (Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY));
    for t in &tris[start..end] {
        let c = centroid(t);
        clo = clo.min(c);
        chi = chi.max(c);
    }
    let extent = chi - clo;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    let key = |t: &[Vec3; 3]| match axis {
        0 => centroid(t).x,
        1 => centroid(t).y,
        _ => centroid(t).z,
    };
    let mid = (start + end) / 2;
    tris[start..end].select_nth_unstable_by((end - start) / 2, |p, q| {
        key(p).total_cmp(&key(q))
    });
    let left = build(tris, start, mid, nodes);
    let right = build(tris, mid, end, nodes);
    nodes[at].a = left;
    nodes[at].b = right;
    nodes[at].leaf = false;
    at
}

/// Mean exact distance from `points` to the surface of `mesh`.
pub fn point_to_surface(points: &[Vec3], mesh: &TriangleMesh) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidConfig("point_to_surface needs at least one point".into()));
    }
    let bvh = SurfaceBvh::new(mesh)?;
    Ok(points.iter().map(|&p| bvh.distance(p)).sum::<f64>() / points.len() as f64)
}

/// `n` area-uniform samples of the mesh surface; deterministic in `rng`.
pub fn surface_samples(mesh: &TriangleMesh, n: usize, rng: &Rng) -> Result<Vec<Vec3>> {
    if mesh.triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    // Cumulative area table for triangle selection.
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(Error::InvalidConfig("mesh has zero surface area".into()));
    }
    let samples = (0..n)
        .map(|k| {
            let mut s = rng.stream(k as u64);
            let r = s.uniform() * total;
            let t = cumulative.partition_point(|&c| c < r).min(mesh.triangles.len() - 1);
            let [ia, ib, ic] = mesh.triangles[t];
            let (a, b, c) = (mesh.vertices[ia], mesh.vertices[ib], mesh.vertices[ic]);
            // Uniform barycentric point via the fold-over trick.
            let (mut u, mut v) = (s.uniform(), s.uniform());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            a + (b - a) * u + (c - a) * v
        })
        .collect();
    Ok(samples)
}

/// Chamfer distance: sum of the two directional mean sample-to-surface
/// distances using `n_samples` per direction. Both meshes are sampled with
/// the same random stream, so swapping the arguments swaps the sample sets
/// with them and the result is exactly symmetric.
pub fn chamfer(a: &TriangleMesh, b: &TriangleMesh, n_samples: usize, rng: &Rng) -> Result<f64> {
    if n_samples < 1000 {
        return Err(Error::InvalidConfig(format!(
            "chamfer needs at least 1000 samples for a stable estimate, got {n_samples}"
        )));
    }
    let samples_a = surface_samples(a, n_samples, rng)?;
    let samples_b = surface_samples(b, n_samples, rng)?;
    let to_b = point_to_surface(&samples_a, b)?;
    let to_a = point_to_surface(&samples_b, a)?;
    Ok(to_b + to_a)
}

/// Normal-map difference of one view under both mask conventions.
#[derive(Clone, Copy, Debug)]
pub struct ViewNormalError {
    pub view: ViewAngle,
    /// Mean `|n_a - n_b|` over the union of foreground masks; a pixel
    /// covered by only one mesh pays that mesh's full normal magnitude.
    pub union_error: f64,
    /// Mean over the mask intersection only (0 when the masks are
    /// disjoint).
    pub intersection_error: f64,
}

/// Per-view normal errors plus their across-view means.
#[derive(Clone, Debug)]
pub struct NormalErrorReport {
    pub per_view: Vec<ViewNormalError>,
    pub union_mean: f64,
    pub intersection_mean: f64,
}

/// Rasterize both meshes from each view and compare normals per pixel.
pub fn normal_error(
    a: &TriangleMesh,
    b: &TriangleMesh,
    views: &[ViewAngle],
    width: usize,
    height: usize,
) -> Result<NormalErrorReport> {
    if a.triangles.is_empty() || b.triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if views.is_empty() {
        return Err(Error::InvalidConfig("normal_error needs at least one view".into()));
    }
    let per_view: Vec<ViewNormalError> = views
        .iter()
        .map(|&view| {
            let map_a = rasterize_normal_map(a, view, width, height);
            let map_b = rasterize_normal_map(b, view, width, height);
            let (mut union_sum, mut union_n) = (0.0, 0usize);
            let (mut inter_sum, mut inter_n) = (0.0, 0usize);
            for (na, nb) in map_a.data.iter().zip(&map_b.data) {
                let (ma, mb) = (*na != Vec3::ZERO, *nb != Vec3::ZERO);
                if !ma && !mb {
                    continue;
                }
                let err = (*na - *nb).norm();
                union_sum += err;
                union_n += 1;
                if ma && mb {
                    inter_sum += err;
                    inter_n += 1;
                }
            }
            ViewNormalError {
                view,
                union_error: if union_n > 0 { union_sum / union_n as f64 } else { 0.0 },
                intersection_error: if inter_n > 0 { inter_sum / inter_n as f64 } else { 0.0 },
            }
        })
        .collect();
    let n = per_view.len() as f64;
    Ok(NormalErrorReport {
        union_mean: per_view.iter().map(|v| v.union_error).sum::<f64>() / n,
        intersection_mean: per_view.iter().map(|v| v.intersection_error).sum::<f64>() / n,
        per_view,
    })
}

/// The full metric set between a reconstruction and its ground truth.
#[derive(Clone, Debug)]
pub struct MetricReport {
    /// Chamfer distance between the meshes (domain units).
    pub chamfer: f64,
    /// Mean distance from ground-truth surface samples to the
    /// reconstruction.
    pub p2s: f64,
    /// Union-mask normal error over the four canonical views.
    pub normal_error: f64,
    /// Intersection-mask counterpart of `normal_error`.
    pub normal_error_intersection: f64,
    /// Union-mask normal error over the two side views only.
    pub side_normal_error: f64,
    /// Intersection-mask counterpart of `side_normal_error`.
    pub side_normal_error_intersection: f64,
    /// Per-view breakdown in [`ViewAngle::ALL`] order.
    pub per_view: Vec<ViewNormalError>,
}

/// Compute all metrics between `recon` and `target`: chamfer with
/// `n_samples` per direction, normal errors at `width x height`.
pub fn evaluate_meshes(
    recon: &TriangleMesh,
    target: &TriangleMesh,
    n_samples: usize,
    width: usize,
    height: usize,
    rng: &Rng,
) -> Result<MetricReport> {
    let chamfer_value = chamfer(recon, target, n_samples, &rng.stream(0))?;
    let gt_samples = surface_samples(target, n_samples, &rng.stream(1))?;
    let p2s = point_to_surface(&gt_samples, recon)?;
    let normals = normal_error(recon, target, &ViewAngle::ALL, width, height)?;
    let side_views: Vec<&ViewNormalError> = normals
        .per_view
        .iter()
        .filter(|v| ViewAngle::SIDES.contains(&v.view))
        .collect();
    let side_n = side_views.len() as f64;
    Ok(MetricReport {
        chamfer: chamfer_value,
        p2s,
        normal_error: normals.union_mean,
        normal_error_intersection: normals.intersection_mean,
        side_normal_error: side_views.iter().map(|v| v.union_error).sum::<f64>() / side_n,
        side_normal_error_intersection: side_views
            .iter()
            .map(|v| v.intersection_error)
            .sum::<f64>()
            / side_n,
        per_view: normals.per_view,
    })
}

impl MetricReport {
    /// Column names matching [`MetricReport::csv_row`].
    pub fn csv_header() -> &'static str {
        "chamfer,p2s,normal_error,normal_error_intersection,\
         side_normal_error,side_normal_error_intersection,\
         front_union,right_union,back_union,left_union"
    }

    pub fn csv_row(&self) -> String {
        let per_view: Vec<String> =
            self.per_view.iter().map(|v| format!("{:.6e}", v.union_error)).collect();
        format!(
            "{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{}",
            self.chamfer,
            self.p2s,
            self.normal_error,
            self.normal_error_intersection,
            self.side_normal_error,
            self.side_normal_error_intersection,
            per_view.join(",")
        )
    }

    /// Human-readable multi-line summary.
    pub fn text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("chamfer                 {:.6}\n", self.chamfer));
        out.push_str(&format!("p2s                     {:.6}\n", self.p2s));
        out.push_str(&format!(
            "normal error            {:.6} (union) / {:.6} (intersection)\n",
            self.normal_error, self.normal_error_intersection
        ));
        out.push_str(&format!(
            "side-only normal error  {:.6} (union) / {:.6} (intersection)\n",
            self.side_normal_error, self.side_normal_error_intersection
        ));
        for v in &self.per_view {
            out.push_str(&format!(
                "  view {:>5.1} deg        {:.6} (union) / {:.6} (intersection)\n",
                v.view.degrees, v.union_error, v.intersection_error
            ));
        }
        out
    }
}
