//! Diffusion forward process, the guidance-model interface, and the three
//! score-distillation gradients: multi-view SDS, VSD with a camera-conditioned
//! low-rank adapter, and video SDS.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Differentiable, Gradients, Param, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::render::{
    render_on_tape, upsample_on_tape, Camera, RadianceModel, RenderOptions, TimeSampling, View,
};
use crate::scheduler::UpdateKind;
use crate::synthetic::SyntheticScene;
use crate::tensor::Tensor;

/// Discrete linear-β schedule, interpolated to continuous `t_d ∈ (0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    alphas_cumprod: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02)
    }
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(steps >= 2, "schedule needs at least two steps");
        let mut prod = 1.0;
        let alphas_cumprod = (0..steps)
            .map(|i| {
                let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
                prod *= 1.0 - beta;
                prod
            })
            .collect();
        Self { alphas_cumprod }
    }

    pub fn steps(&self) -> usize {
        self.alphas_cumprod.len()
    }

    /// `ᾱ(t_d)`, linear between the discrete steps.
    pub fn alpha_bar(&self, t_d: f64) -> f64 {
        let last = self.steps() - 1;
        let x = t_d.clamp(0.0, 1.0) * last as f64;
        let i = (x.floor() as usize).min(last - 1);
        let f = x - i as f64;
        self.alphas_cumprod[i] * (1.0 - f) + self.alphas_cumprod[i + 1] * f
    }

    /// `w(t_d) = 1 − ᾱ(t_d)`.
    pub fn weight(&self, t_d: f64) -> f64 {
        1.0 - self.alpha_bar(t_d)
    }

    pub fn level(&self, t_d: f32) -> Result<NoiseLevel> {
        if !(t_d > 0.0 && t_d < 1.0) {
            return Err(Error::range("t_d", format!("{t_d} not in (0, 1)")));
        }
        Ok(NoiseLevel {
            t_d,
            alpha_bar: self.alpha_bar(f64::from(t_d)),
            weight: self.weight(f64::from(t_d)),
        })
    }
}

/// Noise level of one distillation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub t_d: f32,
    pub alpha_bar: f64,
    pub weight: f64,
}

/// `√ᾱ·x + √(1−ᾱ)·ε`.
pub fn add_noise(x: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if x.shape() != eps.shape() {
        return Err(Error::shape(
            "add_noise",
            format!("{:?} vs {:?}", x.shape(), eps.shape()),
        ));
    }
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&v, &e)| (a * f64::from(v) + s * f64::from(e)) as f32)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Classifier-free guidance: `ε_u + s·(ε_c − ε_u)`.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, scale: f32) -> Result<Tensor> {
    if cond.shape() != uncond.shape() {
        return Err(Error::shape(
            "cfg_combine",
            format!("{:?} vs {:?}", cond.shape(), uncond.shape()),
        ));
    }
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(&c, &u)| u + scale * (c - u))
        .collect();
    Tensor::new(cond.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GuidanceKind {
    Image,
    ThreeDAware,
    Video,
}

impl GuidanceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Image => "image",
            Self::ThreeDAware => "3d_aware",
            Self::Video => "video",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "image" => Some(Self::Image),
            "3d_aware" => Some(Self::ThreeDAware),
            "video" => Some(Self::Video),
            _ => None,
        }
    }
}

impl fmt::Display for GuidanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Input to a noise prediction.
#[derive(Clone, Copy, Debug)]
pub struct NoiseRequest<'a> {
    pub kind: GuidanceKind,
    /// `[N, H, W, 3]` noisy views or frames.
    pub noisy: &'a Tensor,
    pub level: NoiseLevel,
    /// One camera per view or frame, at the noisy sample's resolution.
    pub cameras: &'a [Camera],
    pub times: &'a [f32],
    pub prompt: &'a str,
    pub guidance_scale: f32,
}

/// A (frozen) denoiser. Predictions are treated as constants.
pub trait GuidanceModel {
    fn kind(&self) -> GuidanceKind;
    /// `(width, height)` the model operates at.
    fn resolution(&self) -> (usize, usize);
    /// Guided noise prediction with the shape of `req.noisy`.
    fn predict_noise(&mut self, req: &NoiseRequest<'_>) -> Result<Tensor>;
}

/// Clean target images for a camera and time, `[H, W, 3]`.
pub trait TargetProvider {
    fn target(&self, camera: &Camera, time: f32) -> Result<Tensor>;
}

/// Renders a procedural scene as the target.
#[derive(Clone, Debug)]
pub struct SceneTargets {
    pub scene: SyntheticScene,
    pub render: RenderOptions,
}

impl TargetProvider for SceneTargets {
    fn target(&self, camera: &Camera, time: f32) -> Result<Tensor> {
        let opts = RenderOptions {
            stratified: false,
            ..self.render
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.scene.render(camera, time, &opts, &mut rng)?.rgb)
    }
}

enum Targets {
    Fixed(Tensor),
    Provider(Box<dyn TargetProvider>),
}

const TARGET_CACHE_LIMIT: usize = 512;

/// Perfect denoiser toward a known clean sample `x*`:
/// `ε_φ(x_t) = (x_t − √ᾱ·x*) / √(1−ᾱ)`.
pub struct AnalyticGuidance {
    kind: GuidanceKind,
    resolution: (usize, usize),
    targets: Targets,
    cache: HashMap<Vec<u32>, Tensor>,
}

impl AnalyticGuidance {
    /// The same `[N, H, W, 3]` target for every request.
    pub fn fixed(kind: GuidanceKind, target: Tensor) -> Result<Self> {
        let (h, w) = match target.shape() {
            [_, h, w, 3] => (*h, *w),
            s => return Err(Error::shape("analytic target", format!("{s:?} is not [N, H, W, 3]"))),
        };
        Ok(Self {
            kind,
            resolution: (w, h),
            targets: Targets::Fixed(target),
            cache: HashMap::new(),
        })
    }

    /// Targets rendered per camera and time.
    pub fn with_provider(
        kind: GuidanceKind,
        resolution: (usize, usize),
        provider: Box<dyn TargetProvider>,
    ) -> Self {
        Self {
            kind,
            resolution,
            targets: Targets::Provider(provider),
            cache: HashMap::new(),
        }
    }

    pub fn from_scene(
        kind: GuidanceKind,
        resolution: (usize, usize),
        scene: SyntheticScene,
        render: RenderOptions,
    ) -> Self {
        Self::with_provider(kind, resolution, Box::new(SceneTargets { scene, render }))
    }

    fn target_for(&mut self, camera: &Camera, time: f32) -> Result<Tensor> {
        let Targets::Provider(p) = &self.targets else {
            unreachable!("fixed targets are handled by the caller")
        };
        let mut key: Vec<u32> = camera.extrinsics().iter().map(|v| v.to_bits()).collect();
        key.extend([
            camera.fov_degrees.to_bits(),
            camera.width as u32,
            camera.height as u32,
            camera.near.to_bits(),
            camera.far.to_bits(),
            time.to_bits(),
        ]);
        if let Some(t) = self.cache.get(&key) {
            return Ok(t.clone());
        }
        let t = p.target(camera, time)?;
        if self.cache.len() >= TARGET_CACHE_LIMIT {
            self.cache.clear();
        }
        self.cache.insert(key, t.clone());
        Ok(t)
    }

    /// The clean sample a request is steered toward.
    pub fn clean_target(&mut self, req: &NoiseRequest<'_>) -> Result<Tensor> {
        if let Targets::Fixed(t) = &self.targets {
            return Ok(t.clone());
        }
        let (n, h, w) = match req.noisy.shape() {
            [n, h, w, 3] => (*n, *h, *w),
            s => return Err(Error::shape("analytic guidance", format!("{s:?}"))),
        };
        if req.cameras.len() != n || req.times.len() != n {
            return Err(Error::shape(
                "analytic guidance",
                format!("{n} views but {} cameras and {} times", req.cameras.len(), req.times.len()),
            ));
        }
        let mut data = Vec::with_capacity(req.noisy.numel());
        for (cam, &t) in req.cameras.iter().zip(req.times) {
            let cam = cam.with_resolution(w, h);
            data.extend_from_slice(self.target_for(&cam, t)?.data());
        }
        Tensor::new(vec![n, h, w, 3], data)
    }
}

impl GuidanceModel for AnalyticGuidance {
    fn kind(&self) -> GuidanceKind {
        self.kind
    }

    fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    fn predict_noise(&mut self, req: &NoiseRequest<'_>) -> Result<Tensor> {
        let target = self.clean_target(req)?;
        if target.shape() != req.noisy.shape() {
            return Err(Error::shape(
                "analytic guidance",
                format!("target {:?} vs sample {:?}", target.shape(), req.noisy.shape()),
            ));
        }
        let a = req.level.alpha_bar;
        let (sa, s1) = (a.sqrt(), (1.0 - a).sqrt());
        let data = req
            .noisy
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| ((f64::from(x) - sa * f64::from(t)) / s1) as f32)
            .collect();
        Tensor::new(req.noisy.shape().to_vec(), data)
    }
}

/// A fixed noise level and noise tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub level: NoiseLevel,
    pub noise: Tensor,
}

/// How a distillation step obtains its `(t_d, ε)`.
#[derive(Clone, Debug)]
pub enum NoiseDraw {
    /// Given `t_d`, fresh standard-normal ε from the rng.
    Timestep(f32),
    /// Given noise level, fresh ε from the rng.
    Level(NoiseLevel),
    Fixed(Draw),
}

impl NoiseDraw {
    pub fn resolve(
        self,
        schedule: &DiffusionSchedule,
        shape: &[usize],
        rng: &mut dyn RngCore,
    ) -> Result<Draw> {
        let level = match self {
            Self::Fixed(d) => {
                if d.noise.shape() != shape {
                    return Err(Error::shape(
                        "noise draw",
                        format!("{:?} vs {:?}", d.noise.shape(), shape),
                    ));
                }
                return Ok(d);
            }
            Self::Timestep(t) => schedule.level(t)?,
            Self::Level(l) => l,
        };
        let n: usize = shape.iter().product();
        let noise = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Ok(Draw {
            level,
            noise: Tensor::new(shape.to_vec(), noise)?,
        })
    }
}

/// Settings shared by one distillation call.
#[derive(Clone, Copy, Debug)]
pub struct DistillContext<'s> {
    pub schedule: &'s DiffusionSchedule,
    pub prompt: &'s str,
    pub guidance_scale: f32,
    pub render: RenderOptions,
    /// `(width, height)` rendered before upsampling to the guidance's own
    /// resolution.
    pub resolution: (usize, usize),
}

/// Result of one distillation step.
#[derive(Clone, Debug)]
pub struct SdsOutcome {
    pub gradients: Gradients,
    pub level: NoiseLevel,
    /// L2 norm of the weighted residual.
    pub residual_norm: f64,
    /// Detached render at guidance resolution, `[N, H, W, 3]`.
    pub rendered: Tensor,
    pub cameras: Vec<Camera>,
    pub times: Vec<f32>,
}

struct NativeRender {
    var: Var,
    value: Tensor,
    cameras: Vec<Camera>,
    times: Vec<f32>,
}

fn render_native<'a>(
    tape: &mut Tape<'a>,
    model: &'a RadianceModel,
    cameras: &[Camera],
    times: &[f32],
    ctx: &DistillContext<'_>,
    native: (usize, usize),
    rng: &mut dyn RngCore,
) -> Result<NativeRender> {
    let (rw, rh) = ctx.resolution;
    let (nw, nh) = native;
    let views: Vec<View> = cameras
        .iter()
        .zip(times)
        .map(|(c, &t)| View {
            camera: c.with_resolution(rw, rh),
            time: t,
        })
        .collect();
    let batch = render_on_tape(tape, model, &views, &ctx.render, rng)?;
    let n = views.len();
    let var = upsample_on_tape(tape, batch.rgb, n, (rh, rw), (nh, nw))?;
    let value = tape.value(var).clone().reshape(&[n, nh, nw, 3])?;
    Ok(NativeRender {
        var,
        value,
        cameras: cameras.iter().map(|c| c.with_resolution(nw, nh)).collect(),
        times: times.to_vec(),
    })
}

fn check_kind(model: &dyn GuidanceModel, expected: GuidanceKind) -> Result<()> {
    if model.kind() != expected {
        return Err(Error::GuidanceKind {
            expected: expected.as_str().into(),
            actual: model.kind().as_str().into(),
        });
    }
    Ok(())
}

/// Back-propagates a constant residual through the render.
fn finish(
    tape: &Tape<'_>,
    render: NativeRender,
    level: NoiseLevel,
    residual: Vec<f32>,
) -> Result<SdsOutcome> {
    let residual_norm = residual
        .iter()
        .map(|&r| f64::from(r) * f64::from(r))
        .sum::<f64>()
        .sqrt();
    let seed = Tensor::new(tape.shape(render.var).to_vec(), residual)?;
    let gradients = tape.vjp(render.var, &seed)?;
    Ok(SdsOutcome {
        gradients,
        level,
        residual_norm,
        rendered: render.value,
        cameras: render.cameras,
        times: render.times,
    })
}

fn weighted_difference(a: &Tensor, b: &Tensor, weight: f64) -> Result<Vec<f32>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "guidance output",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| (weight * (f64::from(p) - f64::from(q))) as f32)
        .collect())
}

/// The weighted SDS residual `w(t_d)·(ε_φ(x_t) − ε)` for a clean sample
/// `x` of shape `[N, H, W, 3]` at the guidance's resolution.
#[allow(clippy::too_many_arguments)]
pub fn sds_residual(
    guidance: &mut dyn GuidanceModel,
    x: &Tensor,
    cameras: &[Camera],
    times: &[f32],
    ctx: &DistillContext<'_>,
    draw: NoiseDraw,
    rng: &mut dyn RngCore,
) -> Result<(Tensor, NoiseLevel)> {
    let draw = draw.resolve(ctx.schedule, x.shape(), rng)?;
    let noisy = add_noise(x, draw.level.alpha_bar, &draw.noise)?;
    let req = NoiseRequest {
        kind: guidance.kind(),
        noisy: &noisy,
        level: draw.level,
        cameras,
        times,
        prompt: ctx.prompt,
        guidance_scale: ctx.guidance_scale,
    };
    let predicted = guidance.predict_noise(&req)?;
    let residual = weighted_difference(&predicted, &draw.noise, draw.level.weight)?;
    Ok((Tensor::new(x.shape().to_vec(), residual)?, draw.level))
}

fn sds_common(
    model: &RadianceModel,
    cameras: &[Camera],
    times: &[f32],
    guidance: &mut dyn GuidanceModel,
    ctx: &DistillContext<'_>,
    draw: NoiseDraw,
    rng: &mut dyn RngCore,
) -> Result<SdsOutcome> {
    let mut tape = Tape::new();
    let render = render_native(&mut tape, model, cameras, times, ctx, guidance.resolution(), rng)?;
    let (residual, level) = sds_residual(
        guidance,
        &render.value,
        &render.cameras,
        &render.times,
        ctx,
        draw,
        rng,
    )?;
    finish(&tape, render, level, residual.into_data())
}

/// Multi-view SDS: `w(t_d)·(ε_φ(x_t; y, T) − ε)·∂x/∂θ` for a view batch
/// rendered at time `t`, with one `t_d` shared by all views.
pub fn sds_grad_3d(
    model: &RadianceModel,
    cameras: &[Camera],
    t: f32,
    guidance: &mut dyn GuidanceModel,
    ctx: &DistillContext<'_>,
    draw: NoiseDraw,
    rng: &mut dyn RngCore,
) -> Result<SdsOutcome> {
    check_kind(guidance, GuidanceKind::ThreeDAware)?;
    let times = vec![t; cameras.len()];
    sds_common(model, cameras, &times, guidance, ctx, draw, rng)
}

/// Video SDS over a clip: one `t_d` for the clip, independent ε per frame.
pub fn video_sds_grad(
    model: &RadianceModel,
    cameras: &[Camera],
    sampling: &TimeSampling,
    guidance: &mut dyn GuidanceModel,
    ctx: &DistillContext<'_>,
    draw: NoiseDraw,
    rng: &mut dyn RngCore,
) -> Result<SdsOutcome> {
    check_kind(guidance, GuidanceKind::Video)?;
    let times = sampling.times();
    let cameras = crate::render::expand_cameras(cameras, times.len())?;
    sds_common(model, &cameras, &times, guidance, ctx, draw, rng)
}

/// Single-image SDS with image guidance; the building block that VSD
/// reduces to when the adapter predicts the true noise.
pub fn image_sds_grad(
    model: &RadianceModel,
    camera: &Camera,
    t: f32,
    guidance: &mut dyn GuidanceModel,
    ctx: &DistillContext<'_>,
    draw: NoiseDraw,
    rng: &mut dyn RngCore,
) -> Result<SdsOutcome> {
    check_kind(guidance, GuidanceKind::Image)?;
    sds_common(model, std::slice::from_ref(camera), &[t], guidance, ctx, draw, rng)
}

/// Camera-conditioned correction on top of a base image denoiser.
pub trait AdapterModel {
    /// `ε'_φ(x_t; t_d, y, T)` given the base prediction `ε_φ(x_t; t_d, y)`.
    fn predict(
        &mut self,
        base: &Tensor,
        noisy: &Tensor,
        level: &NoiseLevel,
        camera: &Camera,
    ) -> Result<Tensor>;

    /// One step on `‖ε'_φ(x_t) − ε‖²` for a detached render `x`; returns the
    /// loss before the step.
    #[allow(clippy::too_many_arguments)]
    fn finetune_step(
        &mut self,
        base: &mut dyn GuidanceModel,
        x: &Tensor,
        camera: &Camera,
        time: f32,
        ctx: &DistillContext<'_>,
        draw: NoiseDraw,
        lr: f32,
        rng: &mut dyn RngCore,
    ) -> Result<f32>;

    /// Named tensors needed to restore the adapter exactly.
    fn state(&self) -> Vec<(String, Tensor)> {
        Vec::new()
    }

    /// Restores from `tensors`, removing the entries it consumes.
    fn load_state(&mut self, _tensors: &mut Vec<(String, Tensor)>) -> Result<()> {
        Ok(())
    }
}

/// Removes the tensor called `name` from `tensors`.
pub(crate) fn take_tensor(tensors: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    let i = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
    Ok(tensors.remove(i).1)
}

/// Conditioning width: 12 extrinsics, `t_d`, and a constant.
pub const ADAPTER_CONDITION: usize = 14;

/// Rank-`r` residual `Δ = (x_t·V + c·E)·U` added to the base prediction,
/// with `U` zero-initialized so the adapter starts as a no-op.
#[derive(Clone, Debug)]
pub struct LowRankAdapter {
    pub rank: usize,
    pub dim: usize,
    /// `[D, r]`.
    pub down: Param,
    /// `[14, r]`.
    pub condition: Param,
    /// `[r, D]`, zero at init.
    pub up: Param,
    pub optimizer: Adam,
}

impl LowRankAdapter {
    pub const DEFAULT_RANK: usize = 4;

    pub fn new(dim: usize, rank: usize, seed: u64) -> Result<Self> {
        if dim == 0 || rank == 0 {
            return Err(Error::range("adapter", "dimension and rank must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, fan_in: usize| -> Vec<f32> {
            let d = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite std");
            (0..n).map(|_| d.sample(&mut rng) as f32).collect()
        };
        Ok(Self {
            rank,
            dim,
            down: Param::new("adapter.down", Tensor::new(vec![dim, rank], normal(dim * rank, dim))?),
            condition: Param::new(
                "adapter.condition",
                Tensor::new(
                    vec![ADAPTER_CONDITION, rank],
                    normal(ADAPTER_CONDITION * rank, ADAPTER_CONDITION),
                )?,
            ),
            up: Param::new("adapter.up", Tensor::zeros(&[rank, dim])),
            optimizer: Adam::new(AdamConfig::default()),
        })
    }

    /// Adapter for the resolution of `base`.
    pub fn for_guidance(base: &dyn GuidanceModel, seed: u64) -> Result<Self> {
        let (w, h) = base.resolution();
        Self::new(w * h * 3, Self::DEFAULT_RANK, seed)
    }

    fn conditioning(camera: &Camera, level: &NoiseLevel) -> Tensor {
        let mut c: Vec<f32> = camera.extrinsics().to_vec();
        c.extend([level.t_d, 1.0]);
        Tensor::new(vec![1, ADAPTER_CONDITION], c).expect("conditioning shape")
    }

    /// `Δ` recorded on `tape`, shape `[1, D]`.
    fn delta_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        noisy: &Tensor,
        level: &NoiseLevel,
        camera: &Camera,
    ) -> Result<Var> {
        if noisy.numel() != self.dim {
            return Err(Error::shape(
                "adapter",
                format!("sample of {} values for adapter of dimension {}", noisy.numel(), self.dim),
            ));
        }
        let x = tape.constant(noisy.clone().reshape(&[1, self.dim])?)?;
        let c = tape.constant(Self::conditioning(camera, level))?;
        let (down, cond, up) = (
            tape.param(&self.down),
            tape.param(&self.condition),
            tape.param(&self.up),
        );
        let h = tape.matmul(x, down)?;
        let hc = tape.matmul(c, cond)?;
        let h = tape.add(h, hc)?;
        tape.matmul(h, up)
    }
}

impl Differentiable for LowRankAdapter {
    fn params(&self) -> Vec<&Param> {
        vec![&self.down, &self.condition, &self.up]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.down, &mut self.condition, &mut self.up]
    }
}

impl AdapterModel for LowRankAdapter {
    fn predict(
        &mut self,
        base: &Tensor,
        noisy: &Tensor,
        level: &NoiseLevel,
        camera: &Camera,
    ) -> Result<Tensor> {
        if base.shape() != noisy.shape() {
            return Err(Error::shape(
                "adapter",
                format!("base {:?} vs sample {:?}", base.shape(), noisy.shape()),
            ));
        }
        let mut tape = Tape::new();
        let d = self.delta_on_tape(&mut tape, noisy, level, camera)?;
        let data = base
            .data()
            .iter()
            .zip(tape.value(d).data())
            .map(|(&b, &d)| b + d)
            .collect();
        Tensor::new(base.shape().to_vec(), data)
    }

    fn state(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params()
            .into_iter()
            .map(|p| (p.name().to_string(), p.value.clone()))
            .collect();
        out.extend(crate::optim::export_moments(&self.optimizer, "adapter.adam"));
        out
    }

    fn load_state(&mut self, tensors: &mut Vec<(String, Tensor)>) -> Result<()> {
        for p in self.params_mut() {
            let t = take_tensor(tensors, p.name())?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!("{} has shape {:?}", p.name(), t.shape())));
            }
            p.value = t;
        }
        self.optimizer.moments = crate::optim::import_moments(tensors, "adapter.adam")?;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn finetune_step(
        &mut self,
        base: &mut dyn GuidanceModel,
        x: &Tensor,
        camera: &Camera,
        time: f32,
        ctx: &DistillContext<'_>,
        draw: NoiseDraw,
        lr: f32,
        rng: &mut dyn RngCore,
    ) -> Result<f32> {
        check_kind(base, GuidanceKind::Image)?;
        let draw = draw.resolve(ctx.schedule, x.shape(), rng)?;
        let noisy = add_noise(x, draw.level.alpha_bar, &draw.noise)?;
        let cameras = [camera.clone()];
        let req = NoiseRequest {
            kind: GuidanceKind::Image,
            noisy: &noisy,
            level: draw.level,
            cameras: &cameras,
            times: &[time],
            prompt: ctx.prompt,
            guidance_scale: ctx.guidance_scale,
        };
        let base_eps = base.predict_noise(&req)?;
        // Residual target ε − ε_φ is constant; the loss is ‖Δ − (ε − ε_φ)‖².
        let target: Vec<f32> = draw
            .noise
            .data()
            .iter()
            .zip(base_eps.data())
            .map(|(&e, &b)| e - b)
            .collect();
        let grads = {
            let mut tape = Tape::new();
            let d = self.delta_on_tape(&mut tape, &noisy, &draw.level, camera)?;
            let t = tape.constant(Tensor::new(vec![1, self.dim], target)?)?;
            let diff = tape.sub(d, t)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.sum(sq)?;
            let value = tape.scalar_f64(loss)? as f32;
            (tape.backward(loss)?, value)
        };
        let (grads, loss) = grads;
        let Self {
            down,
            condition,
            up,
            optimizer,
            ..
        } = self;
        optimizer.step([down, condition, up], &grads, |_| lr)?;
        Ok(loss)
    }
}

/// VSD: `w(t_d)·(ε_φ(x_t; y) − ε'_φ(x_t; y, T))·∂x/∂θ` for one image.
#[allow(clippy::too_many_arguments)]
pub fn vsd_grad(
    model: &RadianceModel,
    camera: &Camera,
    t: f32,
    base: &mut dyn GuidanceModel,
    adapter: &mut dyn AdapterModel,
    ctx: &DistillContext<'_>,
    draw: NoiseDraw,
    rng: &mut dyn RngCore,
) -> Result<SdsOutcome> {
    check_kind(base, GuidanceKind::Image)?;
    let mut tape = Tape::new();
    let render = render_native(
        &mut tape,
        model,
        std::slice::from_ref(camera),
        &[t],
        ctx,
        base.resolution(),
        rng,
    )?;
    let draw = draw.resolve(ctx.schedule, render.value.shape(), rng)?;
    let noisy = add_noise(&render.value, draw.level.alpha_bar, &draw.noise)?;
    let req = NoiseRequest {
        kind: GuidanceKind::Image,
        noisy: &noisy,
        level: draw.level,
        cameras: &render.cameras,
        times: &render.times,
        prompt: ctx.prompt,
        guidance_scale: ctx.guidance_scale,
    };
    let base_eps = base.predict_noise(&req)?;
    let adapted = adapter.predict(&base_eps, &noisy, &draw.level, &render.cameras[0])?;
    let residual = weighted_difference(&base_eps, &adapted, draw.level.weight)?;
    finish(&tape, render, draw.level, residual)
}

/// One adapter finetuning step on a detached render; never touches θ.
#[allow(clippy::too_many_arguments)]
pub fn finetune_adapter_step(
    adapter: &mut dyn AdapterModel,
    base: &mut dyn GuidanceModel,
    x: &Tensor,
    camera: &Camera,
    time: f32,
    ctx: &DistillContext<'_>,
    draw: NoiseDraw,
    lr: f32,
    rng: &mut dyn RngCore,
) -> Result<f32> {
    adapter.finetune_step(base, x, camera, time, ctx, draw, lr, rng)
}

/// Range of sampled diffusion timesteps and its annealing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepAnneal {
    pub min: f32,
    pub max_start: f32,
    pub max_end: f32,
    /// Iterations over which the upper bound moves from `max_start` to
    /// `max_end`.
    pub iterations: u64,
}

impl Default for TimestepAnneal {
    fn default() -> Self {
        Self {
            min: 0.02,
            max_start: 0.98,
            max_end: 0.5,
            iterations: 5000,
        }
    }
}

impl TimestepAnneal {
    /// Sampling interval at `iteration` (counted from the start of the run).
    pub fn range(&self, iteration: u64, kind: UpdateKind) -> (f32, f32) {
        if kind == UpdateKind::Vid {
            return (self.min, self.max_start);
        }
        let f = if self.iterations == 0 {
            1.0
        } else {
            (iteration as f64 / self.iterations as f64).min(1.0)
        };
        let hi = f64::from(self.max_start) + f * f64::from(self.max_end - self.max_start);
        (self.min, hi as f32)
    }
}

/// Uniform `t_d` over the current range for `kind`.
pub fn sample_timestep(
    iteration: u64,
    kind: UpdateKind,
    anneal: &TimestepAnneal,
    rng: &mut dyn RngCore,
) -> f32 {
    let (lo, hi) = anneal.range(iteration, kind);
    let u: f32 = rng.random();
    (lo + u * (hi - lo)).clamp(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_monotone_with_sensible_limits() {
        let s = DiffusionSchedule::default();
        assert!(s.alpha_bar(0.0) > 0.999);
        assert!(s.alpha_bar(1.0) < 1e-4);
        let mut prev = 1.0;
        for i in 0..=100 {
            let a = s.alpha_bar(i as f64 / 100.0);
            assert!(a < prev);
            prev = a;
        }
        assert!(s.level(0.0).is_err());
        assert!(s.level(1.0).is_err());
    }

    #[test]
    fn add_noise_examples() {
        let x = Tensor::scalar(1.0);
        let e = Tensor::scalar(1.0);
        let xt = add_noise(&x, 0.25, &e).unwrap().item().unwrap();
        assert!((xt - 1.366025).abs() < 1e-6);
        let x = Tensor::vector(vec![0.3, -0.2]);
        let e = Tensor::vector(vec![1.5, 0.7]);
        assert!(add_noise(&x, 1.0 - 1e-12, &e).unwrap().max_abs_diff(&x).unwrap() < 1e-5);
        assert!(add_noise(&x, 1e-12, &e).unwrap().max_abs_diff(&e).unwrap() < 1e-5);
        assert!(add_noise(&x, 0.5, &Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn cfg_examples() {
        let c = Tensor::scalar(1.0);
        let u = Tensor::scalar(0.0);
        assert_eq!(cfg_combine(&c, &u, 7.5).unwrap().item().unwrap(), 7.5);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &c, 42.0).unwrap(), c);
    }

    #[test]
    fn timestep_ranges() {
        let a = TimestepAnneal::default();
        assert_eq!(a.range(0, UpdateKind::ThreeD), (0.02, 0.98));
        assert_eq!(a.range(5000, UpdateKind::Img), (0.02, 0.5));
        assert_eq!(a.range(2500, UpdateKind::ThreeD).1, 0.74);
        assert_eq!(a.range(9000, UpdateKind::Vid), (0.02, 0.98));
    }
}
