//! Marching-cubes isosurface extraction with global vertex welding.
//!
//! The domain `[-1, 1]^3` is split into `res^3` cells; the field is sampled
//! once on the `(res+1)^3` lattice (one batched evaluation) and each cell is
//! triangulated from the classic 256-case tables. Vertices lie on lattice
//! edges and are shared between neighbouring cells through an edge-keyed
//! map, so the output is an indexed mesh that is watertight wherever the
//! surface does not leave the domain. Triangles are wound so that their
//! normals point towards increasing field values (outward for a signed
//! distance field); per-vertex normals come from the field gradient.

use super::tables::{CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE};
use super::TriangleMesh;
use crate::geom::Vec3;
use crate::{Error, Result, ScalarField};
use std::collections::HashMap;

/// Extract the `iso`-level surface of `field` on a `res^3` cell grid.
///
/// Errors: `InvalidConfig` for `res < 2`; `EmptySurface` when no cell is
/// crossed by the surface.
pub fn marching_cubes<S: ScalarField>(field: &S, res: usize, iso: f64) -> Result<TriangleMesh> {
    if res < 2 {
        return Err(Error::InvalidConfig(format!("marching cubes needs res >= 2, got {res}")));
    }
    let nn = res + 1;
    let node_pos = |ix: usize, iy: usize, iz: usize| -> Vec3 {
        let s = 2.0 / res as f64;
        Vec3::new(-1.0 + s * ix as f64, -1.0 + s * iy as f64, -1.0 + s * iz as f64)
    };
    let node_index = |ix: usize, iy: usize, iz: usize| (iz * nn + iy) * nn + ix;

    // One batched sweep over the lattice.
    let mut lattice = Vec::with_capacity(nn * nn * nn);
    for iz in 0..nn {
        for iy in 0..nn {
            for ix in 0..nn {
                lattice.push(node_pos(ix, iy, iz));
            }
        }
    }
    let values = field.value_batch(&lattice);

    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    // Welding map: lattice edge (lower node, axis) -> vertex index.
    let mut edge_vertices: HashMap<(usize, u8), usize> = HashMap::new();

    for cz in 0..res {
        for cy in 0..res {
            for cx in 0..res {
                let corner_nodes: [usize; 8] = std::array::from_fn(|c| {
                    let [dx, dy, dz] = CORNER_OFFSETS[c];
                    node_index(cx + dx, cy + dy, cz + dz)
                });
                let mut case = 0usize;
                for (c, &node) in corner_nodes.iter().enumerate() {
                    if values[node] < iso {
                        case |= 1 << c;
                    }
                }
                let crossed = EDGE_TABLE[case];
                if crossed == 0 {
                    continue;
                }

                // Vertex index on each crossed edge of this cell.
                let mut cell_edge_vertex = [usize::MAX; 12];
                for e in 0..12 {
                    if crossed & (1 << e) == 0 {
                        continue;
                    }
                    let [ca, cb] = EDGE_CORNERS[e];
                    let (na, nb) = (corner_nodes[ca], corner_nodes[cb]);
                    let (lo, hi) = if na < nb { (na, nb) } else { (nb, na) };
                    // Adjacent lattice nodes differ along exactly one axis;
                    // the index difference identifies it.
                    let axis = match hi - lo {
                        1 => 0u8,
                        d if d == nn => 1,
                        _ => 2,
                    };
                    let key = (lo, axis);
                    let idx = *edge_vertices.entry(key).or_insert_with(|| {
                        let (va, vb) = (values[lo], values[hi]);
                        let t = if (vb - va).abs() < 1e-300 {
                            0.5
                        } else {
                            ((iso - va) / (vb - va)).clamp(0.0, 1.0)
                        };
                        let pa = lattice[lo];
                        let pb = lattice[hi];
                        vertices.push(pa + (pb - pa) * t);
                        vertices.len() - 1
                    });
                    cell_edge_vertex[e] = idx;
                }

                let tri_row = &TRI_TABLE[case];
                let mut k = 0;
                while tri_row[k] >= 0 {
                    let a = cell_edge_vertex[tri_row[k] as usize];
                    let b = cell_edge_vertex[tri_row[k + 1] as usize];
                    let c = cell_edge_vertex[tri_row[k + 2] as usize];
                    debug_assert!(a != usize::MAX && b != usize::MAX && c != usize::MAX);
                    // The tables wind the opposite way from our outward
                    // (towards increasing field) convention, so swap.
                    triangles.push([a, c, b]);
                    k += 3;
                }
            }
        }
    }

    if triangles.is_empty() {
        return Err(Error::EmptySurface);
    }

    // Per-vertex normals from the field gradient.
    let normals = vertices
        .iter()
        .map(|&v| field.spatial_gradient(v).normalized().unwrap_or(Vec3::ZERO))
        .collect();

    Ok(TriangleMesh { vertices, triangles, normals })
}
