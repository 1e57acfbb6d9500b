//! Learnable voxel features: a lattice of `F`-channel vectors over the
//! `[-1, 1]^3` domain, read with trilinear interpolation.
//!
//! The interpolated feature is linear in the stored values, so two gradient
//! routes exist and both are implemented: the value route (trilinear weights,
//! used whenever the field value is differentiated w.r.t. parameters) and the
//! Jacobian route (trilinear weight gradients, used when a *spatial
//! derivative* of the field is differentiated w.r.t. parameters, since the
//! feature Jacobian itself depends on the stored values).

use crate::geom::Vec3;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    /// Cells per axis; the lattice has `res + 1` nodes per axis.
    pub res: usize,
    /// Feature channels per node.
    pub channels: usize,
    /// `(res + 1)^3 * channels` values, x-fastest node order, channels
    /// contiguous per node.
    pub values: Vec<f64>,
}

/// One corner of the interpolation cell: flat value offset of the node,
/// its trilinear weight, and the spatial gradient of that weight.
#[derive(Clone, Copy, Debug)]
pub struct CellCorner {
    pub base: usize,
    pub weight: f64,
    pub dweight: Vec3,
}

impl VoxelGrid {
    pub fn new(res: usize, channels: usize, init_std: f64, rng: &mut Rng) -> Self {
        assert!(res >= 1 && channels >= 1);
        let n = (res + 1).pow(3) * channels;
        VoxelGrid {
            res,
            channels,
            values: (0..n).map(|_| rng.normal() * init_std).collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        (self.res + 1).pow(3)
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    /// Flat node index for lattice coordinates, x fastest.
    #[inline]
    pub fn node_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        let nn = self.res + 1;
        debug_assert!(ix < nn && iy < nn && iz < nn);
        (iz * nn + iy) * nn + ix
    }

    /// World position of a lattice node.
    pub fn node_position(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        let s = 2.0 / self.res as f64;
        Vec3::new(-1.0 + s * ix as f64, -1.0 + s * iy as f64, -1.0 + s * iz as f64)
    }

    /// The eight corners of the cell containing `p` (clamped into the
    /// domain), with trilinear weights and their spatial gradients.
    pub fn stencil(&self, p: Vec3) -> [CellCorner; 8] {
        let r = self.res as f64;
        let half = r / 2.0; // d(lattice coord)/d(world coord)
        let mut i0 = [0usize; 3];
        let mut f = [0.0f64; 3];
        for k in 0..3 {
            let u = (p.get(k).clamp(-1.0, 1.0) + 1.0) * 0.5 * r;
            let cell = (u.floor() as usize).min(self.res - 1);
            i0[k] = cell;
            f[k] = u - cell as f64;
        }
        let wx = [1.0 - f[0], f[0]];
        let wy = [1.0 - f[1], f[1]];
        let wz = [1.0 - f[2], f[2]];
        let sx = [-half, half];

        let mut out = [CellCorner { base: 0, weight: 0.0, dweight: Vec3::ZERO }; 8];
        let mut c = 0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let node = self.node_index(i0[0] + dx, i0[1] + dy, i0[2] + dz);
                    out[c] = CellCorner {
                        base: node * self.channels,
                        weight: wx[dx] * wy[dy] * wz[dz],
                        dweight: Vec3::new(
                            sx[dx] * wy[dy] * wz[dz],
                            wx[dx] * sx[dy] * wz[dz],
                            wx[dx] * wy[dy] * sx[dz],
                        ),
                    };
                    c += 1;
                }
            }
        }
        out
    }

    /// Trilinear feature sample, written into `out` (`channels` long).
    pub fn sample_into(&self, p: Vec3, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        out.fill(0.0);
        for corner in self.stencil(p) {
            if corner.weight != 0.0 {
                let vals = &self.values[corner.base..corner.base + self.channels];
                for (o, v) in out.iter_mut().zip(vals) {
                    *o += corner.weight * v;
                }
            }
        }
    }

    /// Feature sample plus the per-channel spatial Jacobian rows
    /// `d feat_ch / dp`.
    pub fn sample_with_jacobian(&self, p: Vec3, out: &mut [f64], jac: &mut [Vec3]) {
        debug_assert_eq!(out.len(), self.channels);
        debug_assert_eq!(jac.len(), self.channels);
        out.fill(0.0);
        jac.fill(Vec3::ZERO);
        for corner in self.stencil(p) {
            let vals = &self.values[corner.base..corner.base + self.channels];
            for ch in 0..self.channels {
                out[ch] += corner.weight * vals[ch];
                jac[ch] += corner.dweight * vals[ch];
            }
        }
    }

    /// Value route: `grad[node, ch] += weight(node) * upstream[ch]`.
    pub fn backprop_value(&self, p: Vec3, upstream: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(upstream.len(), self.channels);
        debug_assert_eq!(grad.len(), self.values.len());
        for corner in self.stencil(p) {
            if corner.weight != 0.0 {
                let g = &mut grad[corner.base..corner.base + self.channels];
                for (gi, u) in g.iter_mut().zip(upstream) {
                    *gi += corner.weight * u;
                }
            }
        }
    }

    /// Jacobian route: the directional feature derivative along `dir` is
    /// `v_ch = sum_nodes value[node, ch] * (dweight(node) . dir)`, so
    /// `grad[node, ch] += (dweight(node) . dir) * upstream[ch]`.
    pub fn backprop_jacobian(&self, p: Vec3, dir: Vec3, upstream: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(upstream.len(), self.channels);
        debug_assert_eq!(grad.len(), self.values.len());
        for corner in self.stencil(p) {
            let dw = corner.dweight.dot(dir);
            if dw != 0.0 {
                let g = &mut grad[corner.base..corner.base + self.channels];
                for (gi, u) in g.iter_mut().zip(upstream) {
                    *gi += dw * u;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn linear_grid(res: usize) -> VoxelGrid {
        // Channel 0: 0.3 x - 0.2 y + 0.5 z + 1; channel 1: constant 2.
        let mut g = VoxelGrid::new(res, 2, 0.0, &mut Rng::new(0));
        for iz in 0..=res {
            for iy in 0..=res {
                for ix in 0..=res {
                    let p = g.node_position(ix, iy, iz);
                    let base = g.node_index(ix, iy, iz) * 2;
                    g.values[base] = 0.3 * p.x - 0.2 * p.y + 0.5 * p.z + 1.0;
                    g.values[base + 1] = 2.0;
                }
            }
        }
        g
    }

    #[test]
    fn sample_at_node_returns_stored_vector() {
        let mut rng = Rng::new(1);
        let g = VoxelGrid::new(4, 3, 0.5, &mut rng);
        let mut out = [0.0; 3];
        for (ix, iy, iz) in [(0, 0, 0), (2, 3, 1), (4, 4, 4)] {
            g.sample_into(g.node_position(ix, iy, iz), &mut out);
            let base = g.node_index(ix, iy, iz) * 3;
            for (ch, &o) in out.iter().enumerate() {
                assert_relative_eq!(o, g.values[base + ch], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn trilinear_reproduces_linear_functions_exactly() {
        let g = linear_grid(5);
        let mut rng = Rng::new(2);
        let mut out = [0.0; 2];
        let mut jac = [Vec3::ZERO; 2];
        for _ in 0..50 {
            let p = Vec3::new(rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0));
            g.sample_with_jacobian(p, &mut out, &mut jac);
            assert_relative_eq!(out[0], 0.3 * p.x - 0.2 * p.y + 0.5 * p.z + 1.0, epsilon = 1e-12);
            assert_relative_eq!(out[1], 2.0, epsilon = 1e-12);
            assert!((jac[0] - Vec3::new(0.3, -0.2, 0.5)).norm() < 1e-12);
            assert!(jac[1].norm() < 1e-12);
        }
    }

    #[test]
    fn weights_form_partition_of_unity() {
        let g = VoxelGrid::new(3, 1, 0.0, &mut Rng::new(3));
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            let p = Vec3::new(rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0));
            let total: f64 = g.stencil(p).iter().map(|c| c.weight).sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-12);
            assert!(g.stencil(p).iter().all(|c| c.weight >= -1e-15));
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let g = VoxelGrid::new(4, 2, 0.5, &mut rng);
        let mut out = [0.0; 2];
        let mut jac = [Vec3::ZERO; 2];
        let h = 1e-7;
        // Stay inside one cell so the piecewise derivative is smooth.
        for _ in 0..20 {
            let p = Vec3::new(rng.range(-0.9, 0.9), rng.range(-0.9, 0.9), rng.range(-0.9, 0.9));
            g.sample_with_jacobian(p, &mut out, &mut jac);
            for k in 0..3 {
                let mut dp = Vec3::ZERO;
                dp.set(k, h);
                let (mut up, mut down) = ([0.0; 2], [0.0; 2]);
                g.sample_into(p + dp, &mut up);
                g.sample_into(p - dp, &mut down);
                for ch in 0..2 {
                    let fd = (up[ch] - down[ch]) / (2.0 * h);
                    assert_relative_eq!(jac[ch].get(k), fd, epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn value_backprop_matches_perturbation() {
        let mut rng = Rng::new(6);
        let g = VoxelGrid::new(3, 2, 0.5, &mut rng);
        let p = Vec3::new(0.13, -0.41, 0.77);
        let upstream = [1.0, -0.5];
        let mut grad = vec![0.0; g.param_count()];
        g.backprop_value(p, &upstream, &mut grad);

        let h = 1e-6;
        let mut out = [0.0; 2];
        for (idx, &gv) in grad.iter().enumerate() {
            let mut gp = g.clone();
            gp.values[idx] += h;
            gp.sample_into(p, &mut out);
            let up: f64 = out.iter().zip(&upstream).map(|(o, u)| o * u).sum();
            gp.values[idx] -= 2.0 * h;
            gp.sample_into(p, &mut out);
            let down: f64 = out.iter().zip(&upstream).map(|(o, u)| o * u).sum();
            let fd = (up - down) / (2.0 * h);
            assert_relative_eq!(gv, fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn jacobian_backprop_matches_perturbation() {
        let mut rng = Rng::new(7);
        let g = VoxelGrid::new(3, 2, 0.5, &mut rng);
        let p = Vec3::new(-0.21, 0.35, 0.6);
        let dir = Vec3::new(0.4, -1.0, 0.25);
        let upstream = [0.7, 1.3];
        let mut grad = vec![0.0; g.param_count()];
        g.backprop_jacobian(p, dir, &upstream, &mut grad);

        let directional = |grid: &VoxelGrid| -> f64 {
            let mut out = [0.0; 2];
            let mut jac = [Vec3::ZERO; 2];
            grid.sample_with_jacobian(p, &mut out, &mut jac);
            (0..2).map(|ch| jac[ch].dot(dir) * upstream[ch]).sum()
        };
        let h = 1e-6;
        for (idx, &gv) in grad.iter().enumerate() {
            let mut gp = g.clone();
            gp.values[idx] += h;
            let up = directional(&gp);
            gp.values[idx] -= 2.0 * h;
            let down = directional(&gp);
            let fd = (up - down) / (2.0 * h);
            assert_relative_eq!(gv, fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn boundary_samples_are_clamped_and_continuous() {
        let mut rng = Rng::new(8);
        let g = VoxelGrid::new(4, 1, 0.5, &mut rng);
        let mut a = [0.0];
        let mut b = [0.0];
        // Clamping: outside point equals its projection onto the boundary.
        g.sample_into(Vec3::new(1.5, 0.2, -0.3), &mut a);
        g.sample_into(Vec3::new(1.0, 0.2, -0.3), &mut b);
        assert_relative_eq!(a[0], b[0], epsilon = 1e-12);
        // Continuity across a cell boundary (lattice plane x = 0).
        g.sample_into(Vec3::new(-1e-9, 0.1, 0.1), &mut a);
        g.sample_into(Vec3::new(1e-9, 0.1, 0.1), &mut b);
        assert!((a[0] - b[0]).abs() < 1e-7);
    }
}
