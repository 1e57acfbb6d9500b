//! The end-to-end optimization loop.
//!
//! Each step draws a fresh batch of supervision points, combines four loss
//! terms, and takes one RMS-scaled gradient step on the field:
//!
//! * **alignment** `L_a` — mean squared error between the field and the
//!   reference signed distance at the sampled points;
//! * **adversarial** `L_d` — on render steps, the critic's dissatisfaction
//!   with normal maps rendered from the unsupervised side views (and,
//!   optionally, all four views), pushed back through the renderer with the
//!   hit points frozen;
//! * **Eikonal** `L_eik` — unit-gradient penalty through the finite stencil;
//! * **curvature** `L_curv` — bending penalty through the same stencil.
//!
//! The stencil step follows a coarse-to-fine schedule indexed by epoch, so
//! early epochs smooth at the scale of a rendered pixel and later epochs
//! sharpen. The critic trains alongside the field on the same rendered
//! maps, against a pool of reference maps from related shapes.
//!
//! Everything is keyed off one seed through pure counter streams: the same
//! configuration and seed reproduce the loss table and the final parameters
//! bit for bit. Wall-clock timings are kept next to the report but outside
//! the deterministic CSV.

use std::time::Instant;

use crate::adversary::{AdvLossMode, Discriminator, RealViews, MIN_MAP_SIDE};
use crate::field::{warm_start, VoxelGrid};
use crate::geom::{capsule_person_variant, sample_batch, SceneDescription};
use crate::m2o::{
    curvature_loss_with, eikonal_loss, loss_backprop, schedule_epsilon, CurvatureReduction,
    EpsilonSchedule, StencilConfig,
};
use crate::render::{
    marching_cubes, rasterize_normal_map, render_normal_map_backprop, render_view, RenderParams,
    RenderedView,
};
use crate::rng::Rng;
use crate::{
    AnalyticSdf, Error, NormalMap, ParamGradient, PriorScene, Result, SampleBatch, ScalarField,
    SdfField, Vec3, ViewAngle,
};

// The critic's optimizer constants; the field optimizer follows the same
// convention so the two updates stay comparable.
use crate::adversary::{RMS_DAMPING, RMS_DECAY};

/// Everything that shapes a training run. Serializes to and from a
/// `key = value` text block; the digest of that block tags every CSV the
/// run writes, so mismatched artifacts are detectable.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the adversarial term in the field loss.
    pub w_d: f64,
    /// Weight of the Eikonal term.
    pub w_e: f64,
    /// Weight of the curvature term.
    pub w_c: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Supervision points per step.
    pub batch_n: usize,
    /// Fraction of each batch drawn near the surface (rest uniform).
    pub near_fraction: f64,
    /// Standard deviation of the near-surface perturbation.
    pub sigma: f64,
    /// Coarse-to-fine stencil schedule, indexed by epoch.
    pub eps_schedule: EpsilonSchedule,
    /// When set, overrides the schedule with one constant step (ablation).
    pub fixed_eps: Option<f64>,
    /// Adversarial supervision on side views (disable for ablation).
    pub enable_dis: bool,
    /// Finite-stencil regularizers; `false` falls back to local analytic
    /// derivatives (ablation).
    pub enable_m2o: bool,
    /// Critic objective and view coverage.
    pub adv_mode: AdvLossMode,
    pub lr_field: f64,
    pub lr_dis: f64,
    /// Render size for the adversarial views (both critic and generator).
    pub render_w: usize,
    pub render_h: usize,
    /// Resolution of the given front/back target maps.
    pub fb_res: usize,
    pub voxel_res: usize,
    pub voxel_channels: usize,
    /// Hidden layer widths of the field decoder.
    pub hidden: Vec<usize>,
    /// Regression-to-prior steps before the main loop.
    pub warm_start_steps: usize,
    /// Epochs to wait before the adversary joins (field first finds the
    /// coarse shape).
    pub dis_warmup_epochs: usize,
    /// Render and update the adversary every this-many steps; rendering
    /// dominates the budget, so this is the main speed lever.
    pub dis_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let (render_w, render_h) = (48, 48);
        TrainConfig {
            w_d: 0.01,
            w_e: 0.1,
            w_c: 5e-4,
            epochs: 30,
            steps_per_epoch: 100,
            batch_n: 128,
            near_fraction: 0.75,
            sigma: 0.05,
            eps_schedule: EpsilonSchedule::for_render_size(render_w, render_h),
            fixed_eps: None,
            enable_dis: true,
            enable_m2o: true,
            adv_mode: AdvLossMode::default(),
            lr_field: 1e-3,
            lr_dis: 1e-3,
            render_w,
            render_h,
            fb_res: 128,
            voxel_res: 16,
            voxel_channels: 8,
            hidden: vec![64, 64],
            warm_start_steps: 120,
            dis_warmup_epochs: 2,
            dis_every: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reject combinations that cannot run or that silently break an
    /// invariant (reported errors beat wrong numbers).
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, w) in [("w_d", self.w_d), ("w_e", self.w_e), ("w_c", self.w_c)] {
            if !w.is_finite() || w < 0.0 {
                return err(format!("{name} must be finite and non-negative, got {w}"));
            }
        }
        if self.batch_n == 0 {
            return err("batch_n must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.near_fraction) {
            return err(format!("near_fraction must lie in [0, 1], got {}", self.near_fraction));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return err(format!("sigma must be positive, got {}", self.sigma));
        }
        let e0 = self.eps_schedule.epsilon0;
        if !(e0 > 0.0 && e0 <= 0.5) {
            return err(format!("eps0 must lie in (0, 0.5], got {e0}"));
        }
        let decay = self.eps_schedule.decay_base;
        if !(decay > 0.0 && decay <= 1.0) {
            return err(format!("eps_decay must lie in (0, 1], got {decay}"));
        }
        if let Some(eps) = self.fixed_eps {
            if !(eps > 0.0 && eps <= 0.5) {
                return err(format!("fixed_eps must lie in (0, 0.5], got {eps}"));
            }
        }
        let lr_ok = |lr: f64| lr.is_finite() && lr > 0.0;
        if !lr_ok(self.lr_field) || !lr_ok(self.lr_dis) {
            return err("learning rates must be positive".into());
        }
        if self.enable_dis && self.w_d > 0.0 {
            if self.render_w < MIN_MAP_SIDE || self.render_h < MIN_MAP_SIDE {
                return err(format!(
                    "adversarial render size {}x{} below the critic minimum {MIN_MAP_SIDE}",
                    self.render_w, self.render_h
                ));
            }
            if self.dis_every == 0 {
                return err("dis_every must be at least 1".into());
            }
        }
        if self.render_w == 0 || self.render_h == 0 || self.fb_res == 0 {
            return err("render sizes must be positive".into());
        }
        if self.hidden.contains(&0) {
            return err("hidden layer widths must be positive".into());
        }
        Ok(())
    }

    /// Canonical `key = value` text; [`TrainConfig::from_text`] inverts it.
    pub fn to_text(&self) -> String {
        let fixed = match self.fixed_eps {
            Some(eps) => format!("{eps}"),
            None => "none".into(),
        };
        let hidden: Vec<String> = self.hidden.iter().map(|w| w.to_string()).collect();
        format!(
            "seed = {}\n\
             epochs = {}\n\
             steps_per_epoch = {}\n\
             batch_n = {}\n\
             near_fraction = {}\n\
             sigma = {}\n\
             w_d = {}\n\
             w_e = {}\n\
             w_c = {}\n\
             eps0 = {}\n\
             eps_decay = {}\n\
             fixed_eps = {}\n\
             enable_dis = {}\n\
             enable_m2o = {}\n\
             adv_loss = {}\n\
             adv_views = {}\n\
             dis_warmup_epochs = {}\n\
             dis_every = {}\n\
             lr_field = {}\n\
             lr_dis = {}\n\
             render_w = {}\n\
             render_h = {}\n\
             fb_res = {}\n\
             voxel_res = {}\n\
             voxel_channels = {}\n\
             hidden = {}\n\
             warm_start_steps = {}\n",
            self.seed,
            self.epochs,
            self.steps_per_epoch,
            self.batch_n,
            self.near_fraction,
            self.sigma,
            self.w_d,
            self.w_e,
            self.w_c,
            self.eps_schedule.epsilon0,
            self.eps_schedule.decay_base,
            fixed,
            self.enable_dis,
            self.enable_m2o,
            self.adv_mode.loss_kind,
            self.adv_mode.real_views,
            self.dis_warmup_epochs,
            self.dis_every,
            self.lr_field,
            self.lr_dis,
            self.render_w,
            self.render_h,
            self.fb_res,
            self.voxel_res,
            self.voxel_channels,
            hidden.join(","),
            self.warm_start_steps,
        )
    }

    /// Parse a `key = value` block (`#` comments and blank lines allowed).
    /// Unset keys keep their defaults; when `eps0` is not given it is
    /// re-derived from the (possibly overridden) render size.
    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let (mut eps0, mut eps_decay) = (None, None);
        for (at, raw) in text.lines().enumerate() {
            let line = at + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected `key = value`, got {body:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |msg: String| Error::Parse { line, msg };
            macro_rules! parse {
                ($ty:ty) => {
                    value.parse::<$ty>().map_err(|e| {
                        bad(format!("invalid value {value:?} for {key}: {e}"))
                    })?
                };
            }
            match key {
                "seed" => cfg.seed = parse!(u64),
                "epochs" => cfg.epochs = parse!(usize),
                "steps_per_epoch" => cfg.steps_per_epoch = parse!(usize),
                "batch_n" => cfg.batch_n = parse!(usize),
                "near_fraction" => cfg.near_fraction = parse!(f64),
                "sigma" => cfg.sigma = parse!(f64),
                "w_d" => cfg.w_d = parse!(f64),
                "w_e" => cfg.w_e = parse!(f64),
                "w_c" => cfg.w_c = parse!(f64),
                "eps0" => eps0 = Some(parse!(f64)),
                "eps_decay" => eps_decay = Some(parse!(f64)),
                "fixed_eps" => {
                    cfg.fixed_eps = if value == "none" { None } else { Some(parse!(f64)) }
                }
                "enable_dis" => cfg.enable_dis = parse!(bool),
                "enable_m2o" => cfg.enable_m2o = parse!(bool),
                "adv_loss" => cfg.adv_mode.loss_kind = parse!(crate::adversary::LossKind),
                "adv_views" => cfg.adv_mode.real_views = parse!(RealViews),
                "dis_warmup_epochs" => cfg.dis_warmup_epochs = parse!(usize),
                "dis_every" => cfg.dis_every = parse!(usize),
                "lr_field" => cfg.lr_field = parse!(f64),
                "lr_dis" => cfg.lr_dis = parse!(f64),
                "render_w" => cfg.render_w = parse!(usize),
                "render_h" => cfg.render_h = parse!(usize),
                "fb_res" => cfg.fb_res = parse!(usize),
                "voxel_res" => cfg.voxel_res = parse!(usize),
                "voxel_channels" => cfg.voxel_channels = parse!(usize),
                "hidden" => {
                    cfg.hidden = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            s.parse::<usize>().map_err(|e| {
                                bad(format!("invalid hidden width {s:?}: {e}"))
                            })
                        })
                        .collect::<Result<Vec<usize>>>()?
                }
                "warm_start_steps" => cfg.warm_start_steps = parse!(usize),
                other => {
                    return Err(bad(format!("unknown configuration key {other:?}")));
                }
            }
        }
        cfg.eps_schedule = EpsilonSchedule {
            epsilon0: eps0.unwrap_or(1.0 / cfg.render_w.max(cfg.render_h) as f64),
            decay_base: eps_decay.unwrap_or(0.5),
        };
        Ok(cfg)
    }

    /// FNV-1a hash of the canonical text; tags CSV artifacts.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for byte in self.to_text().bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Stencil for the given epoch: scheduled (or pinned) step in finite mode,
/// local analytic derivatives otherwise.
pub fn stencil_for(cfg: &TrainConfig, epoch: usize) -> StencilConfig {
    if cfg.enable_m2o {
        let eps = cfg.fixed_eps.unwrap_or_else(|| schedule_epsilon(&cfg.eps_schedule, epoch));
        StencilConfig::m2o(eps)
    } else {
        StencilConfig::analytic()
    }
}

/// RMS-scaled gradient descent: per-parameter second-moment average
/// `v <- 0.99 v + 0.01 g^2`, step `p -= lr * g / (sqrt(v) + damping)`.
/// A zero gradient leaves the parameter exactly unchanged.
pub struct OptimizerState {
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(param_count: usize) -> Self {
        OptimizerState { v: vec![0.0; param_count] }
    }

    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = f64>,
        lr: f64,
    ) {
        for ((p, g), v) in params.zip(grads).zip(self.v.iter_mut()) {
            *v = RMS_DECAY * *v + (1.0 - RMS_DECAY) * g * g;
            *p -= lr * g / (v.sqrt() + RMS_DAMPING);
        }
    }
}

/// One step's loss terms: raw values plus the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub l_a: f64,
    pub l_d: f64,
    pub l_eik: f64,
    pub l_curv: f64,
    pub total: f64,
}

/// Mean squared error between the field and the reference distances.
pub fn alignment_loss<S: ScalarField>(field: &S, batch: &SampleBatch) -> f64 {
    assert!(!batch.is_empty(), "alignment loss needs a nonempty batch");
    let values = field.value_batch(&batch.points);
    values
        .iter()
        .zip(&batch.gt_sdf)
        .map(|(v, gt)| (v - gt) * (v - gt))
        .sum::<f64>()
        / batch.len() as f64
}

/// All four loss terms at the current parameters. `fakes` are maps already
/// rendered from the field this step; pass an empty slice on steps without
/// adversarial supervision and `l_d` is reported as zero.
pub fn total_loss(
    field: &SdfField,
    dis: &Discriminator,
    batch: &SampleBatch,
    fakes: &[&NormalMap],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossBreakdown> {
    let stencil = stencil_for(cfg, epoch);
    let l_a = alignment_loss(field, batch);
    let l_eik = eikonal_loss(field, batch, &stencil);
    let l_curv = curvature_loss_with(field, batch, &stencil, CurvatureReduction::PerAxisAbs);
    let l_d = if cfg.enable_dis && cfg.w_d > 0.0 && !fakes.is_empty() {
        dis.generator_adv_loss(fakes)?.0
    } else {
        0.0
    };
    Ok(LossBreakdown {
        l_a,
        l_d,
        l_eik,
        l_curv,
        total: l_a + cfg.w_d * l_d + cfg.w_e * l_eik + cfg.w_c * l_curv,
    })
}

/// Loss values and the parameter gradient of
/// `L_a + w_e * L_eik + w_c * L_curv` (the non-adversarial part of one
/// step). Returns `(l_a, l_eik, l_curv, gradient)`.
pub fn field_loss_gradient(
    field: &SdfField,
    batch: &SampleBatch,
    stencil: &StencilConfig,
    w_e: f64,
    w_c: f64,
) -> Result<(f64, f64, f64, ParamGradient)> {
    let values = field.eval_batch(&batch.points);
    let n = batch.len() as f64;
    let mut l_a = 0.0;
    let upstream: Vec<f64> = values
        .iter()
        .zip(&batch.gt_sdf)
        .map(|(v, gt)| {
            let r = v - gt;
            l_a += r * r / n;
            2.0 * r / n
        })
        .collect();
    let mut grad = field.backprop_params(&batch.points, &upstream)?;
    let (l_eik, l_curv, reg_grad) =
        loss_backprop(field, batch, stencil, w_e, w_c, CurvatureReduction::PerAxisAbs);
    grad.add_assign(&reg_grad);
    Ok((l_a, l_eik, l_curv, grad))
}

/// Per-epoch means of the loss terms. `l_d` averages over the steps where
/// the adversary actually ran (zero when it never did), and `total`
/// averages the per-step weighted totals, which include the adversarial
/// term only on those steps.
#[derive(Clone, Copy, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_a: f64,
    pub l_d: f64,
    pub l_eik: f64,
    pub l_curv: f64,
    pub total: f64,
    /// Stencil step used this epoch.
    pub epsilon: f64,
}

/// The loss table of one run. [`TrainReport::csv`] is bit-reproducible for
/// a fixed configuration and seed; wall-clock timings live in
/// [`TrainReport::wall_seconds`] (one entry per epoch) and only appear in
/// [`TrainReport::csv_with_wall`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub wall_seconds: Vec<f64>,
    pub config_digest: u64,
    pub seed: u64,
}

impl TrainReport {
    /// Deterministic CSV: a comment row tying the table to its
    /// configuration, a header, then one row per epoch.
    pub fn csv(&self) -> String {
        let mut out = format!("# config={:016x} seed={}\n", self.config_digest, self.seed);
        out.push_str("epoch,l_a,l_d,l_eik,l_curv,total,epsilon\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}\n",
                r.epoch, r.l_a, r.l_d, r.l_eik, r.l_curv, r.total, r.epsilon
            ));
        }
        out
    }

    /// The deterministic table plus a wall-clock column, for humans.
    pub fn csv_with_wall(&self) -> String {
        let mut out = format!("# config={:016x} seed={}\n", self.config_digest, self.seed);
        out.push_str("epoch,l_a,l_d,l_eik,l_curv,total,epsilon,wall_s\n");
        for (r, wall) in self.records.iter().zip(&self.wall_seconds) {
            out.push_str(&format!(
                "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.3}\n",
                r.epoch, r.l_a, r.l_d, r.l_eik, r.l_curv, r.total, r.epsilon, wall
            ));
        }
        out
    }
}

/// Run the full loop: warm-start the field towards its prior, then
/// alternate field and critic updates for `cfg.epochs` epochs.
///
/// `target` provides distance supervision, `scene` the field's prior and
/// inputs, `real_pool` the critic's reference maps (may be empty when the
/// adversary is disabled or weightless). Returns the trained field, the
/// critic, and the loss table. With `epochs = 0` the warm-started field
/// comes back untouched by the main loop.
pub fn train(
    target: &AnalyticSdf,
    scene: PriorScene,
    cfg: &TrainConfig,
    real_pool: &[NormalMap],
) -> Result<(SdfField, Discriminator, TrainReport)> {
    cfg.validate()?;
    let adversarial = cfg.enable_dis && cfg.w_d > 0.0;
    if adversarial {
        if real_pool.is_empty() {
            return Err(Error::InvalidConfig(
                "adversarial training needs a nonempty pool of reference maps".into(),
            ));
        }
        for map in real_pool {
            if map.width < MIN_MAP_SIDE || map.height < MIN_MAP_SIDE {
                return Err(Error::MapTooSmall {
                    w: map.width,
                    h: map.height,
                    min: MIN_MAP_SIDE,
                });
            }
        }
    }

    let root = Rng::new(cfg.seed);
    let mut field = {
        let mut init = root.stream(1);
        SdfField::new(scene, &cfg.hidden, &mut init)
    };
    let mut dis = {
        let mut init = root.stream(2);
        Discriminator::new(&mut init)
    };
    warm_start(&mut field, cfg.warm_start_steps, cfg.batch_n, cfg.lr_field, &root.stream(3));

    let mut optimizer = OptimizerState::new(field.param_count());
    let n_near = ((cfg.batch_n as f64) * cfg.near_fraction).round() as usize;
    let n_near = n_near.min(cfg.batch_n);
    let n_uniform = cfg.batch_n - n_near;

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut wall_seconds = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let timer = Instant::now();
        let stencil = stencil_for(cfg, epoch);
        let mut sums = [0.0f64; 4]; // l_a, l_eik, l_curv, total
        let (mut dis_sum, mut dis_steps) = (0.0f64, 0usize);

        for step in 0..cfg.steps_per_epoch {
            let stream = root.stream(4).stream(epoch as u64).stream(step as u64);
            let batch =
                sample_batch(target, n_near, n_uniform, cfg.sigma, &stream.stream(0));
            let (l_a, l_eik, l_curv, mut grad) =
                field_loss_gradient(&field, &batch, &stencil, cfg.w_e, cfg.w_c)?;

            let render_now = adversarial
                && epoch >= cfg.dis_warmup_epochs
                && global_step.is_multiple_of(cfg.dis_every);
            let mut l_d = 0.0;
            if render_now {
                l_d = adversary_step(
                    &field,
                    &mut dis,
                    cfg,
                    &stencil,
                    real_pool,
                    &stream.stream(1),
                    &mut grad,
                )?;
            }

            let total = l_a
                + if render_now { cfg.w_d * l_d } else { 0.0 }
                + cfg.w_e * l_eik
                + cfg.w_c * l_curv;
            if !total.is_finite() || !grad.is_finite() {
                return Err(Error::DivergenceDetected { epoch, step, value: total });
            }
            optimizer.step(field.params_mut(), grad.params().copied(), cfg.lr_field);
            if !field.params_finite() {
                return Err(Error::DivergenceDetected { epoch, step, value: total });
            }

            sums[0] += l_a;
            sums[1] += l_eik;
            sums[2] += l_curv;
            sums[3] += total;
            if render_now {
                dis_sum += l_d;
                dis_steps += 1;
            }
            global_step += 1;
        }

        let n = cfg.steps_per_epoch.max(1) as f64;
        records.push(EpochRecord {
            epoch,
            l_a: sums[0] / n,
            l_d: if dis_steps > 0 { dis_sum / dis_steps as f64 } else { 0.0 },
            l_eik: sums[1] / n,
            l_curv: sums[2] / n,
            total: sums[3] / n,
            epsilon: stencil.epsilon,
        });
        wall_seconds.push(timer.elapsed().as_secs_f64());
    }

    let report = TrainReport {
        records,
        wall_seconds,
        config_digest: cfg.digest(),
        seed: cfg.seed,
    };
    Ok((field, dis, report))
}

/// Render the adversarial views, push the generator gradient into `grad`,
/// and take one critic step on the same maps against a random real
/// minibatch. Returns the generator's adversarial loss.
fn adversary_step(
    field: &SdfField,
    dis: &mut Discriminator,
    cfg: &TrainConfig,
    stencil: &StencilConfig,
    real_pool: &[NormalMap],
    rng: &Rng,
    grad: &mut ParamGradient,
) -> Result<f64> {
    let views: &[ViewAngle] = match cfg.adv_mode.real_views {
        RealViews::SidesOnly => &ViewAngle::SIDES,
        RealViews::FourViews => &ViewAngle::ALL,
    };
    let params = RenderParams::new(cfg.render_w, cfg.render_h, *stencil);
    let rendered: Vec<RenderedView> =
        views.iter().map(|&view| render_view(field, view, &params)).collect();
    let fakes: Vec<&NormalMap> = rendered.iter().map(|r| &r.map).collect();

    // Generator side: critic frozen, pixel gradients chained through the
    // renderer at the frozen hit points.
    let (l_d, pixel_grads) = dis.generator_adv_loss(&fakes)?;
    for (r, image) in rendered.iter().zip(&pixel_grads) {
        if r.hits.is_empty() {
            continue;
        }
        let upstream: Vec<Vec3> =
            r.hits.iter().map(|h| image[h.pixel] * cfg.w_d).collect();
        grad.add_assign(&render_normal_map_backprop(field, r.view, &r.hits, &upstream, stencil)?);
    }

    // Critic side: one step on the same rendered maps (detached) against a
    // real minibatch of matching size.
    let mut pick = rng.stream(0);
    let reals: Vec<&NormalMap> = (0..fakes.len())
        .map(|_| &real_pool[pick.below(real_pool.len())])
        .collect();
    dis.discriminator_step(&fakes, &reals, cfg.adv_mode, cfg.lr_dis)?;
    Ok(l_d)
}

/// Named configuration variants used by the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// The full method.
    Full,
    /// Adversarial side supervision off.
    WithoutDis,
    /// Finite stencils replaced by local analytic derivatives.
    WithoutM2o,
    /// Stencil step pinned to its initial value (no coarse-to-fine).
    FixedEps,
    /// Critic sees all four views instead of the sides only.
    FourViews,
    /// Critic trains with cross entropy instead of least squares.
    BceLoss,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::WithoutDis,
        Variant::WithoutM2o,
        Variant::FixedEps,
        Variant::FourViews,
        Variant::BceLoss,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutDis => "w/o_dis",
            Variant::WithoutM2o => "w/o_m2o",
            Variant::FixedEps => "fixed_eps",
            Variant::FourViews => "four_views",
            Variant::BceLoss => "bce_loss",
        }
    }

    /// The base configuration with this variant's switch applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::WithoutDis => cfg.enable_dis = false,
            Variant::WithoutM2o => cfg.enable_m2o = false,
            Variant::FixedEps => cfg.fixed_eps = Some(base.eps_schedule.epsilon0),
            Variant::FourViews => cfg.adv_mode.real_views = RealViews::FourViews,
            Variant::BceLoss => cfg.adv_mode.loss_kind = crate::adversary::LossKind::Bce,
        }
        cfg
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

/// Prepare a scene description for training: the target shape for
/// supervision plus a [`PriorScene`] whose front/back maps are rendered
/// from the target at `cfg.fb_res` with analytic normals (they play the
/// role of given inputs).
pub fn build_training_scene(
    desc: &SceneDescription,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(AnalyticSdf, PriorScene)> {
    let target = desc.target.clone();
    let params = RenderParams::new(cfg.fb_res, cfg.fb_res, StencilConfig::analytic());
    let front = render_view(&target, ViewAngle::FRONT, &params).map;
    let back = render_view(&target, ViewAngle::BACK, &params).map;
    let voxel = VoxelGrid::new(cfg.voxel_res, cfg.voxel_channels, 0.1, rng);
    let scene = PriorScene::new(desc.prior.clone(), voxel, front, back)?;
    Ok((target, scene))
}

/// Reference normal maps for the critic: random body-like variants, meshed
/// and rasterized from each requested view. Returns
/// `count * views` maps, deterministic in `seed`.
pub fn build_real_pool(
    count: usize,
    width: usize,
    height: usize,
    views: RealViews,
    mc_res: usize,
    seed: u64,
) -> Result<Vec<NormalMap>> {
    let view_list: &[ViewAngle] = match views {
        RealViews::SidesOnly => &ViewAngle::SIDES,
        RealViews::FourViews => &ViewAngle::ALL,
    };
    let root = Rng::new(seed);
    let mut pool = Vec::with_capacity(count * view_list.len());
    for k in 0..count {
        let mut vr = root.stream(k as u64);
        let shape = capsule_person_variant(&mut vr);
        let mesh = marching_cubes(&shape, mc_res, 0.0)?;
        for &view in view_list {
            pool.push(rasterize_normal_map(&mesh, view, width, height));
        }
    }
    Ok(pool)
}
