//! The learned signed-distance field: an MLP over features assembled from a
//! coarse prior shape, projected front/back normal maps, a learnable voxel
//! grid, and raw position.
//!
//! # Parameters and gradient routes
//!
//! The trainable parameters are the MLP weights and the voxel grid values.
//! All other features (prior distance, prior normal, projected normals,
//! position) are constants w.r.t. the parameters, so the *value* gradient is
//! the MLP gradient plus the trilinear-weight route into the voxel grid.
//!
//! Spatial derivatives additionally need the feature Jacobian `J = d feat /
//! dp`. The rows used are: exact prior-distance gradient, exact trilinear
//! weight gradients for the voxel block, and the identity for the position
//! block. The prior-normal and projected-normal rows are treated as locally
//! constant: the first would require prior Hessians, the second is a
//! piecewise map lookup; both encode slowly-varying conditioning information
//! rather than geometry the losses should differentiate through. Per-axis
//! second derivatives follow the same convention with `J` frozen, which is
//! exact for the voxel and position blocks (trilinear weights are linear
//! along each axis) and drops only the prior-feature curvature.

pub mod checkpoint;
mod mlp;
mod voxel;

pub use mlp::{Activation, Layer, Mlp, MlpGradient};
pub use voxel::VoxelGrid;

use crate::geom::{AnalyticSdf, Vec3};
use crate::render::{ndc_to_pixel, NormalMap, ViewAngle};
use crate::rng::Rng;
use crate::{Error, Result, ScalarField};
use std::sync::atomic::{AtomicU64, Ordering};

/// Minimum voxel lattice resolution (cells per axis).
pub const MIN_VOXEL_RES: usize = 8;
/// Minimum voxel feature channels.
pub const MIN_VOXEL_CHANNELS: usize = 4;

/// Everything the field conditions on: the coarse prior shape, the learnable
/// voxel features, and the given front/back target normal maps.
#[derive(Clone, Debug)]
pub struct PriorScene {
    pub prior: AnalyticSdf,
    pub voxel: VoxelGrid,
    /// Target normals rendered at 0 degrees; treated as given input.
    pub front: NormalMap,
    /// Target normals rendered at 180 degrees; treated as given input.
    pub back: NormalMap,
}

impl PriorScene {
    pub fn new(
        prior: AnalyticSdf,
        voxel: VoxelGrid,
        front: NormalMap,
        back: NormalMap,
    ) -> Result<Self> {
        if front.width != back.width || front.height != back.height {
            return Err(Error::ShapeMismatch {
                expected: front.width * front.height,
                got: back.width * back.height,
            });
        }
        if voxel.res < MIN_VOXEL_RES {
            return Err(Error::InvalidConfig(format!(
                "voxel resolution {} below minimum {MIN_VOXEL_RES}",
                voxel.res
            )));
        }
        if voxel.channels < MIN_VOXEL_CHANNELS {
            return Err(Error::InvalidConfig(format!(
                "voxel channels {} below minimum {MIN_VOXEL_CHANNELS}",
                voxel.channels
            )));
        }
        Ok(PriorScene { prior, voxel, front, back })
    }

    /// Feature dimensionality: distance (1) + prior normal (3) + projected
    /// normal (3) + voxel channels + position (3).
    pub fn feature_dim(&self) -> usize {
        10 + self.voxel.channels
    }

    /// Flat-layout offset of the voxel block.
    pub const VOXEL_OFFSET: usize = 7;

    /// Flat-layout offset of the position block.
    pub fn position_offset(&self) -> usize {
        7 + self.voxel.channels
    }
}

/// The assembled per-point feature vector, with validity flags for the parts
/// that can degrade (the flags are diagnostics, not extra dimensions).
#[derive(Clone, Debug)]
pub struct FeatureVector {
    pub prior_sdf: f64,
    /// Unit prior normal, or zero when the prior gradient is singular.
    pub prior_normal: Vec3,
    pub prior_normal_valid: bool,
    /// Unit normal looked up in the facing map, or zero outside the mask.
    pub projected_normal: Vec3,
    pub projection_valid: bool,
    pub voxel_feat: Vec<f64>,
    pub position: Vec3,
}

impl FeatureVector {
    pub fn write_flat(&self, out: &mut [f64]) {
        let f = self.voxel_feat.len();
        debug_assert_eq!(out.len(), 10 + f);
        out[0] = self.prior_sdf;
        out[1..4].copy_from_slice(&self.prior_normal.to_array());
        out[4..7].copy_from_slice(&self.projected_normal.to_array());
        out[7..7 + f].copy_from_slice(&self.voxel_feat);
        out[7 + f..10 + f].copy_from_slice(&self.position.to_array());
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![0.0; 10 + self.voxel_feat.len()];
        self.write_flat(&mut out);
        out
    }
}

/// Look up the map pixel under `p`'s orthographic projection in the given
/// view, bilinearly, treating masked pixels as absent. Returns a unit normal
/// and `true`, or zero and `false` outside the silhouette.
fn project_normal(map: &NormalMap, view: ViewAngle, p: Vec3) -> (Vec3, bool) {
    let v = view.world_to_view(p);
    let (px, py) = ndc_to_pixel(v.x, v.y, map.width, map.height);
    let (blend, weight) = map.bilinear(px, py);
    if weight < 1e-9 {
        return (Vec3::ZERO, false);
    }
    match (blend / weight).normalized() {
        Some(n) => (n, true),
        None => (Vec3::ZERO, false),
    }
}

/// Assemble the feature vector for a point: prior distance and normal,
/// projected normal from the map the prior normal faces, voxel features and
/// raw position. Never fails; degraded parts come back flagged invalid.
pub fn extract_features(scene: &PriorScene, p: Vec3) -> FeatureVector {
    let prior_sdf = scene.prior.eval(p);
    let (prior_normal, prior_normal_valid) = match scene.prior.normal(p) {
        Ok(n) => (n, true),
        Err(_) => (Vec3::ZERO, false),
    };
    // The front camera sits on +z: a point whose prior normal has z >= 0
    // faces it, otherwise the back camera.
    let (map, view) = if prior_normal.z >= 0.0 {
        (&scene.front, ViewAngle::FRONT)
    } else {
        (&scene.back, ViewAngle::BACK)
    };
    let (projected_normal, projection_valid) = project_normal(map, view, p);
    let mut voxel_feat = vec![0.0; scene.voxel.channels];
    scene.voxel.sample_into(p, &mut voxel_feat);
    FeatureVector {
        prior_sdf,
        prior_normal,
        prior_normal_valid,
        projected_normal,
        projection_valid,
        voxel_feat,
        position: p,
    }
}

/// Gradient container congruent with the field parameters: MLP layers plus
/// the voxel values, in that order wherever parameters are iterated flat.
#[derive(Clone, Debug)]
pub struct ParamGradient {
    pub mlp: MlpGradient,
    pub voxel: Vec<f64>,
}

impl ParamGradient {
    pub fn add_assign(&mut self, other: &ParamGradient) {
        self.mlp.add_assign(&other.mlp);
        assert_eq!(self.voxel.len(), other.voxel.len());
        for (a, b) in self.voxel.iter_mut().zip(&other.voxel) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.mlp.scale(factor);
        for v in self.voxel.iter_mut() {
            *v *= factor;
        }
    }

    /// Flat view in field parameter order.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.mlp.params().chain(self.voxel.iter())
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.params().fold(0.0_f64, |m, &x| m.max(x.abs()))
    }
}

/// The learned field: `phi(p) = MLP(features(p))`.
#[derive(Debug)]
pub struct SdfField {
    pub scene: PriorScene,
    pub mlp: Mlp,
    eval_count: AtomicU64,
}

impl Clone for SdfField {
    fn clone(&self) -> Self {
        SdfField {
            scene: self.scene.clone(),
            mlp: self.mlp.clone(),
            eval_count: AtomicU64::new(self.eval_count.load(Ordering::Relaxed)),
        }
    }
}

impl SdfField {
    /// Fresh field over the scene with hidden widths `hidden` (the input
    /// and scalar output widths are implied). Weights are drawn at scale
    /// `1/sqrt(fan_in)`; run [`warm_start`] afterwards so the initial field
    /// tracks the prior instead of being near-zero everywhere.
    pub fn new(scene: PriorScene, hidden: &[usize], rng: &mut Rng) -> Self {
        assert!(!hidden.is_empty(), "need at least one hidden layer");
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(scene.feature_dim());
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mlp = Mlp::new(&widths, Activation::Softplus, rng);
        SdfField { scene, mlp, eval_count: AtomicU64::new(0) }
    }

    pub fn feature_dim(&self) -> usize {
        self.scene.feature_dim()
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count() + self.scene.voxel.param_count()
    }

    /// Total field evaluations so far (each point of a batch counts once).
    pub fn eval_count(&self) -> u64 {
        self.eval_count.load(Ordering::Relaxed)
    }

    pub fn params_finite(&self) -> bool {
        self.mlp.params().all(|x| x.is_finite())
            && self.scene.voxel.values.iter().all(|x| x.is_finite())
    }

    /// Flat parameter iteration; the order matches
    /// [`ParamGradient::params`].
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.mlp.params().chain(self.scene.voxel.values.iter())
    }

    /// Mutable counterpart of [`SdfField::params`], same order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.mlp.params_mut().chain(self.scene.voxel.values.iter_mut())
    }

    pub fn zero_gradient(&self) -> ParamGradient {
        ParamGradient {
            mlp: self.mlp.zero_gradient(),
            voxel: vec![0.0; self.scene.voxel.param_count()],
        }
    }

    pub fn features(&self, p: Vec3) -> FeatureVector {
        extract_features(&self.scene, p)
    }

    fn features_flat(&self, points: &[Vec3]) -> Vec<f64> {
        let d = self.feature_dim();
        let mut xs = vec![0.0; points.len() * d];
        for (i, &p) in points.iter().enumerate() {
            self.features(p).write_flat(&mut xs[i * d..(i + 1) * d]);
        }
        xs
    }

    /// Feature Jacobian rows for one point (see the module docs for which
    /// rows are live): row per feature dimension, `d feat_d / dp`.
    fn feature_jacobian(&self, p: Vec3, voxel_jac: &mut [Vec3], rows: &mut [Vec3]) {
        let f = self.scene.voxel.channels;
        debug_assert_eq!(rows.len(), 10 + f);
        debug_assert_eq!(voxel_jac.len(), f);
        rows.fill(Vec3::ZERO);
        rows[0] = self.scene.prior.gradient(p);
        let mut feat = vec![0.0; f];
        self.scene.voxel.sample_with_jacobian(p, &mut feat, voxel_jac);
        rows[7..7 + f].copy_from_slice(voxel_jac);
        rows[7 + f] = Vec3::new(1.0, 0.0, 0.0);
        rows[8 + f] = Vec3::new(0.0, 1.0, 0.0);
        rows[9 + f] = Vec3::new(0.0, 0.0, 1.0);
    }

    pub fn eval(&self, p: Vec3) -> f64 {
        self.eval_batch(std::slice::from_ref(&p))[0]
    }

    pub fn eval_batch(&self, points: &[Vec3]) -> Vec<f64> {
        self.eval_count.fetch_add(points.len() as u64, Ordering::Relaxed);
        let xs = self.features_flat(points);
        self.mlp.forward_batch(&xs)
    }

    /// `sum_i upstream_i * d phi(p_i) / d params`.
    pub fn backprop_params(&self, points: &[Vec3], upstream: &[f64]) -> Result<ParamGradient> {
        if points.len() != upstream.len() {
            return Err(Error::ShapeMismatch { expected: points.len(), got: upstream.len() });
        }
        let d = self.feature_dim();
        let xs = self.features_flat(points);
        let (_, mlp_grad, input_grads) = self.mlp.backprop_batch(&xs, upstream);
        let mut grad = ParamGradient {
            mlp: mlp_grad,
            voxel: vec![0.0; self.scene.voxel.param_count()],
        };
        let f = self.scene.voxel.channels;
        for (i, &p) in points.iter().enumerate() {
            let vox_up = &input_grads[i * d + PriorScene::VOXEL_OFFSET
                ..i * d + PriorScene::VOXEL_OFFSET + f];
            self.scene.voxel.backprop_value(p, vox_up, &mut grad.voxel);
        }
        Ok(grad)
    }

    /// Exact spatial gradients through the live Jacobian rows (see module
    /// docs), batched.
    pub fn spatial_gradient_batch(&self, points: &[Vec3]) -> Vec<Vec3> {
        let d = self.feature_dim();
        let f = self.scene.voxel.channels;
        let xs = self.features_flat(points);
        let (_, input_grads) = self.mlp.input_gradients_batch(&xs);
        let mut rows = vec![Vec3::ZERO; d];
        let mut voxel_jac = vec![Vec3::ZERO; f];
        points
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                self.feature_jacobian(p, &mut voxel_jac, &mut rows);
                let gx = &input_grads[i * d..(i + 1) * d];
                let mut g = Vec3::ZERO;
                for (row, &w) in rows.iter().zip(gx) {
                    g += *row * w;
                }
                g
            })
            .collect()
    }

    /// Per-sample tangents `v_i = J(p_i) u_i` in flat feature layout, for
    /// the directional passes.
    fn tangents_for(&self, points: &[Vec3], dirs: impl Fn(usize) -> Vec3) -> Vec<f64> {
        let d = self.feature_dim();
        let f = self.scene.voxel.channels;
        let mut rows = vec![Vec3::ZERO; d];
        let mut voxel_jac = vec![Vec3::ZERO; f];
        let mut tangents = vec![0.0; points.len() * d];
        for (i, &p) in points.iter().enumerate() {
            self.feature_jacobian(p, &mut voxel_jac, &mut rows);
            let u = dirs(i);
            for (k, row) in rows.iter().enumerate() {
                tangents[i * d + k] = row.dot(u);
            }
        }
        tangents
    }

    /// Parameter gradient of `sum_i upstream_i . grad_p phi(p_i)`, routing
    /// through both the MLP and the voxel grid (whose Jacobian rows are
    /// themselves parameter-dependent).
    pub fn backprop_spatial_gradient(
        &self,
        points: &[Vec3],
        upstream: &[Vec3],
    ) -> Result<ParamGradient> {
        if points.len() != upstream.len() {
            return Err(Error::ShapeMismatch { expected: points.len(), got: upstream.len() });
        }
        let d = self.feature_dim();
        let f = self.scene.voxel.channels;
        let xs = self.features_flat(points);
        let tangents = self.tangents_for(points, |i| upstream[i]);
        let ones = vec![1.0; points.len()];
        let (_, ds_dx, ds_dv, mlp_grad) =
            self.mlp.directional_backprop_batch(&xs, &tangents, &ones);
        let mut grad = ParamGradient {
            mlp: mlp_grad,
            voxel: vec![0.0; self.scene.voxel.param_count()],
        };
        let off = PriorScene::VOXEL_OFFSET;
        for (i, &p) in points.iter().enumerate() {
            let x_up = &ds_dx[i * d + off..i * d + off + f];
            self.scene.voxel.backprop_value(p, x_up, &mut grad.voxel);
            let v_up = &ds_dv[i * d + off..i * d + off + f];
            self.scene.voxel.backprop_jacobian(p, upstream[i], v_up, &mut grad.voxel);
        }
        Ok(grad)
    }

    /// Per-axis second derivatives `d^2 phi / d p_k^2` under the frozen-`J`
    /// convention: `v_k^T H v_k` with `v_k = J e_k`.
    pub fn second_axes_batch(&self, points: &[Vec3]) -> Vec<[f64; 3]> {
        let xs = self.features_flat(points);
        let mut out = vec![[0.0; 3]; points.len()];
        for k in 0..3 {
            let mut e = Vec3::ZERO;
            e.set(k, 1.0);
            let tangents = self.tangents_for(points, |_| e);
            let (_, second) = self.mlp.double_tangent_batch(&xs, &tangents);
            for (o, s) in out.iter_mut().zip(&second) {
                o[k] = *s;
            }
        }
        out
    }

    /// Parameter gradient of `sum_i sum_k upstream_i[k] * second_k(p_i)`.
    pub fn backprop_second_axes(
        &self,
        points: &[Vec3],
        upstream: &[[f64; 3]],
    ) -> Result<ParamGradient> {
        if points.len() != upstream.len() {
            return Err(Error::ShapeMismatch { expected: points.len(), got: upstream.len() });
        }
        let d = self.feature_dim();
        let f = self.scene.voxel.channels;
        let xs = self.features_flat(points);
        let mut grad = self.zero_gradient();
        let off = PriorScene::VOXEL_OFFSET;
        for k in 0..3 {
            let mut e = Vec3::ZERO;
            e.set(k, 1.0);
            let tangents = self.tangents_for(points, |_| e);
            let ups: Vec<f64> = upstream.iter().map(|u| u[k]).collect();
            let (_, dc_dx, dc_dv, mlp_grad) =
                self.mlp.double_tangent_backprop_batch(&xs, &tangents, &ups);
            grad.mlp.add_assign(&mlp_grad);
            for (i, &p) in points.iter().enumerate() {
                let x_up = &dc_dx[i * d + off..i * d + off + f];
                self.scene.voxel.backprop_value(p, x_up, &mut grad.voxel);
                let v_up = &dc_dv[i * d + off..i * d + off + f];
                self.scene.voxel.backprop_jacobian(p, e, v_up, &mut grad.voxel);
            }
        }
        Ok(grad)
    }
}

impl ScalarField for SdfField {
    fn value(&self, p: Vec3) -> f64 {
        self.eval(p)
    }

    fn value_batch(&self, points: &[Vec3]) -> Vec<f64> {
        self.eval_batch(points)
    }

    fn spatial_gradient(&self, p: Vec3) -> Vec3 {
        self.spatial_gradient_batch(std::slice::from_ref(&p))[0]
    }

    fn second_diag(&self, p: Vec3) -> Vec3 {
        let s = self.second_axes_batch(std::slice::from_ref(&p))[0];
        Vec3::new(s[0], s[1], s[2])
    }
}

/// Regress the freshly initialized field onto the prior's signed distance so
/// that epoch 0 already carries a meaningful isosurface. RMSProp on the MSE
/// to `prior_sdf` over mixed near-surface/uniform batches.
pub fn warm_start(field: &mut SdfField, steps: usize, batch: usize, lr: f64, rng: &Rng) {
    let mut rms: Vec<f64> = vec![0.0; field.param_count()];
    for step in 0..steps {
        let stream = rng.stream(step as u64);
        let b = crate::geom::sample_batch(&field.scene.prior, batch / 2, batch - batch / 2, 0.1, &stream);
        let values = field.eval_batch(&b.points);
        let n = b.len() as f64;
        let upstream: Vec<f64> = values
            .iter()
            .zip(&b.gt_sdf)
            .map(|(v, t)| 2.0 * (v - t) / n)
            .collect();
        let grad = field
            .backprop_params(&b.points, &upstream)
            .expect("warm start batch shapes agree");
        for ((p, g), v) in field.params_mut().zip(grad.params()).zip(rms.iter_mut()) {
            *v = 0.99 * *v + 0.01 * g * g;
            *p -= lr * g / (v.sqrt() + 1e-8);
        }
    }
}
