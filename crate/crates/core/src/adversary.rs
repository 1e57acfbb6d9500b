//! Patch-based critic on rendered normal maps.
//!
//! A normal map is split into a 3x3 grid of tiles (remainder pixels going
//! to the last row/column), each tile is area-averaged down to a fixed
//! 16x16x3 feature block, and a single shared scorer MLP rates every tile.
//! The critic's output for a map is the mean of its nine tile scores. On
//! top of that sit the least-squares adversarial losses — the critic drives
//! real maps towards score 1 and rendered ("fake") maps towards 0, while
//! the generator side pushes its renders towards 1 — plus a cross-entropy
//! variant of the critic objective for ablation.
//!
//! Masked background pixels are exact zeros in [`NormalMap`], so they flow
//! into the tile averages as zeros: tiles see both the normal directions
//! and the silhouette coverage of their region.

use crate::field::{Activation, Mlp, MlpGradient};
use crate::geom::Vec3;
use crate::render::NormalMap;
use crate::rng::Rng;
use crate::{Error, Result};

/// Tiles per side of the patch grid.
pub const PATCH_GRID: usize = 3;
/// Side length of a downsampled tile.
pub const PATCH_SIZE: usize = 16;
/// Scorer input width: one tile, three channels per texel.
pub const PATCH_FEATURES: usize = PATCH_SIZE * PATCH_SIZE * 3;
/// Smallest map side that still yields one source pixel per tile texel.
pub const MIN_MAP_SIDE: usize = PATCH_GRID * PATCH_SIZE;

/// Layer widths of the shared patch scorer.
pub const SCORER_WIDTHS: [usize; 3] = [PATCH_FEATURES, 64, 1];
/// Negative-side slope of the scorer's leaky-ramp activation.
pub const SCORER_SLOPE: f64 = 0.2;

/// The nine downsampled tiles of one map, row-major over the 3x3 grid.
/// Each tile is `PATCH_FEATURES` reals: texels row-major, `[x, y, z]`
/// interleaved per texel.
#[derive(Clone, Debug)]
pub struct PatchGrid {
    pub tiles: [Vec<f64>; PATCH_GRID * PATCH_GRID],
}

/// Split `total` into `parts` contiguous spans of `total / parts`, with the
/// remainder appended to the last span. Returns `(start, len)` pairs.
fn partition(total: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = total / parts;
    (0..parts)
        .map(|k| {
            let len = if k + 1 == parts { total - base * (parts - 1) } else { base };
            (k * base, len)
        })
        .collect()
}

/// Split a map into the critic's nine downsampled tiles.
///
/// Both sides must be at least [`MIN_MAP_SIDE`] so that every tile texel
/// averages at least one source pixel. Background (masked) pixels
/// contribute exact zeros to the averages.
pub fn split_patches(map: &NormalMap) -> Result<PatchGrid> {
    if map.width < MIN_MAP_SIDE || map.height < MIN_MAP_SIDE {
        return Err(Error::MapTooSmall { w: map.width, h: map.height, min: MIN_MAP_SIDE });
    }
    let cols = partition(map.width, PATCH_GRID);
    let rows = partition(map.height, PATCH_GRID);
    let tiles = std::array::from_fn(|t| {
        let (x0, tw) = cols[t % PATCH_GRID];
        let (y0, th) = rows[t / PATCH_GRID];
        let bu = partition(tw, PATCH_SIZE);
        let bv = partition(th, PATCH_SIZE);
        let mut tile = vec![0.0; PATCH_FEATURES];
        for (v, &(by, bh)) in bv.iter().enumerate() {
            for (u, &(bx, bw)) in bu.iter().enumerate() {
                let mut sum = Vec3::ZERO;
                for dy in 0..bh {
                    for dx in 0..bw {
                        sum += map.get(x0 + bx + dx, y0 + by + dy);
                    }
                }
                let mean = sum / (bw * bh) as f64;
                let at = (v * PATCH_SIZE + u) * 3;
                tile[at] = mean.x;
                tile[at + 1] = mean.y;
                tile[at + 2] = mean.z;
            }
        }
        tile
    });
    Ok(PatchGrid { tiles })
}

/// Adjoint of [`split_patches`]: scatter per-tile feature gradients back to
/// a per-pixel gradient image. `tile_grads[t][f]` is `dL/d(tile t, feature
/// f)`; the result holds `dL/d(pixel)` for every pixel (each source pixel
/// feeds exactly one tile texel, weighted by one over its block size).
fn splat_patch_gradients(
    width: usize,
    height: usize,
    tile_grads: &[Vec<f64>],
) -> Vec<Vec3> {
    debug_assert_eq!(tile_grads.len(), PATCH_GRID * PATCH_GRID);
    let cols = partition(width, PATCH_GRID);
    let rows = partition(height, PATCH_GRID);
    let mut image = vec![Vec3::ZERO; width * height];
    for (t, grads) in tile_grads.iter().enumerate() {
        let (x0, tw) = cols[t % PATCH_GRID];
        let (y0, th) = rows[t / PATCH_GRID];
        let bu = partition(tw, PATCH_SIZE);
        let bv = partition(th, PATCH_SIZE);
        for (v, &(by, bh)) in bv.iter().enumerate() {
            for (u, &(bx, bw)) in bu.iter().enumerate() {
                let at = (v * PATCH_SIZE + u) * 3;
                let g = Vec3::new(grads[at], grads[at + 1], grads[at + 2]) / (bw * bh) as f64;
                for dy in 0..bh {
                    for dx in 0..bw {
                        image[(y0 + by + dy) * width + (x0 + bx + dx)] = g;
                    }
                }
            }
        }
    }
    image
}

/// Which objective the critic minimises on its own step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Least squares: reals towards 1, fakes towards 0.
    Mse,
    /// Cross entropy after a sigmoid squash of the raw score.
    Bce,
}

/// Which rendered views feed the critic during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RealViews {
    /// The two side views only (the unsupervised directions).
    SidesOnly,
    /// All four of front, right, back, left.
    FourViews,
}

/// Adversarial configuration: critic objective plus view coverage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdvLossMode {
    pub loss_kind: LossKind,
    pub real_views: RealViews,
}

impl Default for AdvLossMode {
    fn default() -> Self {
        AdvLossMode { loss_kind: LossKind::Mse, real_views: RealViews::SidesOnly }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "bce" => Ok(LossKind::Bce),
            other => Err(Error::InvalidConfig(format!("unknown loss kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Bce => "bce",
        })
    }
}

impl std::str::FromStr for RealViews {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sides_only" => Ok(RealViews::SidesOnly),
            "four_views" => Ok(RealViews::FourViews),
            other => Err(Error::InvalidConfig(format!("unknown view coverage {other:?}"))),
        }
    }
}

impl std::fmt::Display for RealViews {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RealViews::SidesOnly => "sides_only",
            RealViews::FourViews => "four_views",
        })
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow; used for the cross-entropy objective.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// The patch critic: a shared tile scorer plus its own optimizer state.
#[derive(Clone, Debug)]
pub struct Discriminator {
    scorer: Mlp,
    /// RMS running mean of squared parameter gradients.
    rms: Vec<f64>,
}

/// RMS decay used by every optimizer in the crate.
pub(crate) const RMS_DECAY: f64 = 0.99;
/// Damping added under the RMS square root.
pub(crate) const RMS_DAMPING: f64 = 1e-8;

impl Discriminator {
    pub fn new(rng: &mut Rng) -> Self {
        let scorer = Mlp::new(&SCORER_WIDTHS, Activation::LeakyRelu(SCORER_SLOPE), rng);
        let n = scorer.param_count();
        Discriminator { scorer, rms: vec![0.0; n] }
    }

    /// Rebuild from a checkpointed scorer, validating its shape.
    pub fn from_scorer(scorer: Mlp) -> Result<Self> {
        if scorer.widths() != SCORER_WIDTHS {
            return Err(Error::Format(format!(
                "patch scorer must have widths {SCORER_WIDTHS:?}, got {:?}",
                scorer.widths()
            )));
        }
        let n = scorer.param_count();
        Ok(Discriminator { scorer, rms: vec![0.0; n] })
    }

    pub fn scorer(&self) -> &Mlp {
        &self.scorer
    }

    pub fn param_count(&self) -> usize {
        self.scorer.param_count()
    }

    /// Concatenated scorer inputs for a list of maps: nine tiles per map.
    fn tile_batch(maps: &[&NormalMap]) -> Result<Vec<f64>> {
        let mut xs = Vec::with_capacity(maps.len() * PATCH_GRID * PATCH_GRID * PATCH_FEATURES);
        for map in maps {
            let grid = split_patches(map)?;
            for tile in &grid.tiles {
                xs.extend_from_slice(tile);
            }
        }
        Ok(xs)
    }

    /// Per-map critic outputs: mean of the nine tile scores of each map.
    pub fn discriminate_many(&self, maps: &[&NormalMap]) -> Result<Vec<f64>> {
        let xs = Self::tile_batch(maps)?;
        let scores = self.scorer.forward_batch(&xs);
        Ok(scores
            .chunks(PATCH_GRID * PATCH_GRID)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect())
    }

    /// Critic output for one map.
    pub fn discriminate(&self, map: &NormalMap) -> Result<f64> {
        Ok(self.discriminate_many(&[map])?[0])
    }

    /// The critic's own objective over a batch of rendered maps (`fakes`)
    /// and reference maps (`reals`); the two pools may come from different
    /// shapes.
    pub fn discriminator_loss(
        &self,
        fakes: &[&NormalMap],
        reals: &[&NormalMap],
        mode: AdvLossMode,
    ) -> Result<f64> {
        if fakes.is_empty() || reals.is_empty() {
            return Err(Error::InvalidConfig("critic loss needs both fakes and reals".into()));
        }
        let df = self.discriminate_many(fakes)?;
        let dr = self.discriminate_many(reals)?;
        Ok(match mode.loss_kind {
            LossKind::Mse => {
                mean(df.iter().map(|&d| d * d)) + mean(dr.iter().map(|&d| (d - 1.0) * (d - 1.0)))
            }
            // -log(1 - sig(d)) = softplus(d); -log sig(d) = softplus(-d).
            LossKind::Bce => {
                mean(df.iter().map(|&d| softplus(d))) + mean(dr.iter().map(|&d| softplus(-d)))
            }
        })
    }

    /// Loss and its gradient in the scorer's parameters (pixels detached).
    /// This is the gradient [`Self::discriminator_step`] descends; it is
    /// exposed so external checks can compare it against finite differences.
    pub fn loss_param_gradient(
        &self,
        fakes: &[&NormalMap],
        reals: &[&NormalMap],
        mode: AdvLossMode,
    ) -> Result<(f64, MlpGradient)> {
        if fakes.is_empty() || reals.is_empty() {
            return Err(Error::InvalidConfig("critic loss needs both fakes and reals".into()));
        }
        let tiles = PATCH_GRID * PATCH_GRID;
        let all: Vec<&NormalMap> = fakes.iter().chain(reals.iter()).copied().collect();
        let xs = Self::tile_batch(&all)?;
        let scores = self.scorer.forward_batch(&xs);
        let d: Vec<f64> = scores
            .chunks(tiles)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        let (nf, nr) = (fakes.len() as f64, reals.len() as f64);
        let mut loss = 0.0;
        // dL/d(map score), then spread evenly over the map's nine tiles.
        let mut upstream = Vec::with_capacity(scores.len());
        for (m, &dm) in d.iter().enumerate() {
            let is_fake = m < fakes.len();
            let (term, dloss) = match (mode.loss_kind, is_fake) {
                (LossKind::Mse, true) => (dm * dm / nf, 2.0 * dm / nf),
                (LossKind::Mse, false) => {
                    ((dm - 1.0) * (dm - 1.0) / nr, 2.0 * (dm - 1.0) / nr)
                }
                (LossKind::Bce, true) => (softplus(dm) / nf, sigmoid(dm) / nf),
                (LossKind::Bce, false) => (softplus(-dm) / nr, -sigmoid(-dm) / nr),
            };
            loss += term;
            for _ in 0..tiles {
                upstream.push(dloss / tiles as f64);
            }
        }
        let (_, grad, _) = self.scorer.backprop_batch(&xs, &upstream);
        Ok((loss, grad))
    }

    /// Generator-side adversarial loss: the mean of `(D(map) - 1)^2` over
    /// the rendered maps, with the critic's parameters frozen. Returns the
    /// loss and, for each map, `dL/d(pixel)` as an image (masked pixels
    /// zeroed); the caller chains these through the renderer.
    pub fn generator_adv_loss(
        &self,
        fakes: &[&NormalMap],
    ) -> Result<(f64, Vec<Vec<Vec3>>)> {
        if fakes.is_empty() {
            return Err(Error::InvalidConfig("generator loss needs at least one map".into()));
        }
        let tiles = PATCH_GRID * PATCH_GRID;
        let xs = Self::tile_batch(fakes)?;
        let (scores, input_grads) = self.scorer.input_gradients_batch(&xs);
        let d: Vec<f64> = scores
            .chunks(tiles)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        let nf = fakes.len() as f64;
        let mut loss = 0.0;
        let mut images = Vec::with_capacity(fakes.len());
        for (m, map) in fakes.iter().enumerate() {
            let dm = d[m];
            loss += (dm - 1.0) * (dm - 1.0) / nf;
            let dloss = 2.0 * (dm - 1.0) / nf / tiles as f64;
            // Scale each tile's input gradient by the shared upstream.
            let tile_grads: Vec<Vec<f64>> = (0..tiles)
                .map(|t| {
                    let at = (m * tiles + t) * PATCH_FEATURES;
                    input_grads[at..at + PATCH_FEATURES].iter().map(|g| g * dloss).collect()
                })
                .collect();
            let mut image = splat_patch_gradients(map.width, map.height, &tile_grads);
            for (px, g) in image.iter_mut().enumerate() {
                if map.data[px] == Vec3::ZERO {
                    *g = Vec3::ZERO;
                }
            }
            images.push(image);
        }
        Ok((loss, images))
    }

    /// One RMS-scaled gradient step on [`Self::discriminator_loss`] with
    /// the rendered maps detached. Returns the pre-step loss.
    pub fn discriminator_step(
        &mut self,
        fakes: &[&NormalMap],
        reals: &[&NormalMap],
        mode: AdvLossMode,
        learning_rate: f64,
    ) -> Result<f64> {
        let (loss, grad) = self.loss_param_gradient(fakes, reals, mode)?;
        for ((p, &g), v) in self.scorer.params_mut().zip(grad.params()).zip(self.rms.iter_mut())
        {
            *v = RMS_DECAY * *v + (1.0 - RMS_DECAY) * g * g;
            *p -= learning_rate * g / (v.sqrt() + RMS_DAMPING);
        }
        Ok(loss)
    }
}

#[inline]
fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in it {
        sum += x;
        n += 1;
    }
    sum / n as f64
}
