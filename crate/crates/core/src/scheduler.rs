//! The three-stage alternating optimization: update-type sampling,
//! parameter-group freezing, learning-rate staging and the training loop.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Differentiable;
use crate::error::{Error, Result};
use crate::guidance::{
    finetune_adapter_step, sample_timestep, sds_grad_3d, video_sds_grad, vsd_grad, AdapterModel,
    DiffusionSchedule, DistillContext, GuidanceModel, NoiseDraw, SdsOutcome, TimestepAnneal,
};
use crate::optim::Adam;
use crate::render::{
    sample_cameras, Camera, CameraDistribution, CameraMode, RadianceModel, RenderOptions,
    TimeSampling,
};
use crate::scene::ParamGroup;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UpdateKind {
    ThreeD,
    Img,
    Vid,
}

impl UpdateKind {
    pub const ALL: [UpdateKind; 3] = [Self::ThreeD, Self::Img, Self::Vid];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ThreeD => "3d",
            Self::Img => "img",
            Self::Vid => "vid",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Step sizes per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub static_grid: f32,
    pub dynamic_grid: f32,
    pub mlp: f32,
    /// Static-grid rate during stage 3.
    pub static_grid_stage3: f32,
    /// Background follows the MLP rate when set, the static-grid rate otherwise.
    pub background_follows_mlp: bool,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            static_grid: 0.01,
            dynamic_grid: 0.01,
            mlp: 0.001,
            static_grid_stage3: 0.0001,
            background_follows_mlp: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub iterations: [u64; 3],
    pub p_3d: f64,
    pub p_img: f64,
    /// Stage-3 overrides of `p_3d` and `p_img`.
    #[serde(default)]
    pub p_3d_stage3: Option<f64>,
    #[serde(default)]
    pub p_img_stage3: Option<f64>,
    pub learning_rates: LearningRates,
    /// Gradient multiplier per update kind, indexed by [`UpdateKind::index`].
    pub grad_scale: [f32; 3],
}

impl StageConfig {
    pub fn full() -> Self {
        Self {
            iterations: [10_000, 10_000, 100_000],
            p_3d: 0.5,
            p_img: 0.5,
            p_3d_stage3: None,
            p_img_stage3: None,
            learning_rates: LearningRates::default(),
            grad_scale: [1.0, 1.0, 0.1],
        }
    }

    pub fn desk() -> Self {
        Self {
            iterations: [300, 300, 1000],
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (p3, pi) = self.probabilities(3);
        for (name, p) in [
            ("p_3d", self.p_3d),
            ("p_img", self.p_img),
            ("p_3d_stage3", p3),
            ("p_img_stage3", pi),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if p3 + p3 * pi > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "stage-3 p_3d + p_3d * p_img = {} exceeds 1",
                p3 + p3 * pi
            )));
        }
        Ok(())
    }

    /// `(p_3d, p_img)` in effect during `stage`.
    pub fn probabilities(&self, stage: u8) -> (f64, f64) {
        if stage == 3 {
            (
                self.p_3d_stage3.unwrap_or(self.p_3d),
                self.p_img_stage3.unwrap_or(self.p_img),
            )
        } else {
            (self.p_3d, self.p_img)
        }
    }

    pub fn total_iterations(&self) -> u64 {
        self.iterations.iter().sum()
    }

    /// Stage (1, 2 or 3) that global iteration `i` belongs to.
    pub fn stage_of(&self, i: u64) -> u8 {
        if i < self.iterations[0] {
            1
        } else if i < self.iterations[0] + self.iterations[1] {
            2
        } else {
            3
        }
    }
}

/// Samples the update kind for one iteration.
pub fn select_update(stage: u8, config: &StageConfig, rng: &mut dyn RngCore) -> Result<UpdateKind> {
    match stage {
        1 => Ok(UpdateKind::ThreeD),
        2 => {
            config.validate()?;
            let (p_3d, _) = config.probabilities(2);
            let u: f64 = rng.random();
            Ok(if u < p_3d {
                UpdateKind::ThreeD
            } else {
                UpdateKind::Img
            })
        }
        3 => {
            config.validate()?;
            let (p_3d, p_img) = config.probabilities(3);
            let u: f64 = rng.random();
            Ok(if u < p_3d {
                UpdateKind::ThreeD
            } else if u < p_3d + p_3d * p_img {
                UpdateKind::Img
            } else {
                UpdateKind::Vid
            })
        }
        s => Err(Error::range("stage", format!("{s} not in 1..=3"))),
    }
}

/// Which groups receive gradients from which updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezePolicy {
    /// The background network also learns from video updates.
    pub background_from_video: bool,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self {
            background_from_video: true,
        }
    }
}

/// Sets freeze flags: the dynamic grid trains only on stage-3 video updates.
pub fn apply_freeze_policy(
    model: &mut RadianceModel,
    stage: u8,
    kind: UpdateKind,
    policy: &FreezePolicy,
) {
    model.set_frozen(ParamGroup::Static, false);
    model.set_frozen(ParamGroup::Mlp, false);
    model.set_frozen(ParamGroup::Dynamic, !(stage == 3 && kind == UpdateKind::Vid));
    model.set_frozen(
        ParamGroup::Background,
        kind == UpdateKind::Vid && !policy.background_from_video,
    );
}

/// Adam step size for a group.
pub fn learning_rate_for(group: ParamGroup, stage: u8, config: &StageConfig) -> f32 {
    let lr = &config.learning_rates;
    let static_lr = if stage == 3 {
        lr.static_grid_stage3
    } else {
        lr.static_grid
    };
    match group {
        ParamGroup::Static => static_lr,
        ParamGroup::Dynamic => lr.dynamic_grid,
        ParamGroup::Mlp => lr.mlp,
        ParamGroup::Background if lr.background_follows_mlp => lr.mlp,
        ParamGroup::Background => static_lr,
    }
}

/// Gradient multiplier for an update kind.
pub fn grad_scale_for(kind: UpdateKind, config: &StageConfig) -> f32 {
    config.grad_scale[kind.index()]
}

/// Render resolutions `(width, height)` before upsampling, per update kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolutions {
    pub three_d: (usize, usize),
    pub image: (usize, usize),
    pub video: (usize, usize),
}

impl Resolutions {
    pub fn full() -> Self {
        Self {
            three_d: (256, 256),
            image: (256, 256),
            video: (288, 160),
        }
    }

    pub fn divided(&self, k: usize) -> Self {
        let d = |(w, h): (usize, usize)| ((w / k).max(1), (h / k).max(1));
        Self {
            three_d: d(self.three_d),
            image: d(self.image),
            video: d(self.video),
        }
    }
}

/// Classifier-free guidance scale per guidance model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceScales {
    pub three_d: f32,
    pub image: f32,
    pub video: f32,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self {
            three_d: 50.0,
            image: 50.0,
            video: 100.0,
        }
    }
}

/// Everything the loop needs besides the model and the guidance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub prompt: String,
    pub stages: StageConfig,
    pub anneal: TimestepAnneal,
    pub render: RenderOptions,
    pub resolutions: Resolutions,
    pub video_frames: usize,
    pub cameras: CameraDistribution,
    pub guidance_scales: GuidanceScales,
    pub adapter_lr: f32,
    pub freeze: FreezePolicy,
    pub seed: u64,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            prompt: String::new(),
            stages: StageConfig::full(),
            anneal: TimestepAnneal::default(),
            render: RenderOptions::stratified(512),
            resolutions: Resolutions::full(),
            video_frames: 16,
            cameras: CameraDistribution::default(),
            guidance_scales: GuidanceScales::default(),
            adapter_lr: 1e-3,
            freeze: FreezePolicy::default(),
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            stages: StageConfig::desk(),
            render: RenderOptions::stratified(32),
            resolutions: Resolutions::full().divided(8),
            ..Self::full()
        }
    }
}

/// The guidance models one run distills from.
pub struct GuidanceSet {
    pub three_d: Box<dyn GuidanceModel>,
    pub image: Box<dyn GuidanceModel>,
    pub video: Box<dyn GuidanceModel>,
    pub adapter: Box<dyn AdapterModel>,
}

/// Where training cameras come from.
#[derive(Clone, Debug, PartialEq)]
pub enum CameraSource {
    /// Drawn from the configured distribution each iteration.
    Random,
    /// A fixed set of poses: multi-view batches pick one of `batches`, single
    /// views pick any camera of any batch.
    Fixed { batches: Vec<Vec<Camera>> },
}

impl CameraSource {
    fn multiview(&self, dist: &CameraDistribution, rng: &mut dyn RngCore) -> Result<Vec<Camera>> {
        match self {
            Self::Random => sample_cameras(CameraMode::Multiview4, dist, (1, 1), rng),
            Self::Fixed { batches } => {
                let i = rng.random_range(0..batches.len());
                Ok(batches[i].clone())
            }
        }
    }

    fn single(&self, dist: &CameraDistribution, rng: &mut dyn RngCore) -> Result<Camera> {
        match self {
            Self::Random => Ok(sample_cameras(CameraMode::Single, dist, (1, 1), rng)?.remove(0)),
            Self::Fixed { batches } => {
                let all: Vec<&Camera> = batches.iter().flatten().collect();
                Ok(all[rng.random_range(0..all.len())].clone())
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let Self::Fixed { batches } = self {
            if batches.is_empty() || batches.iter().any(Vec::is_empty) {
                return Err(Error::Config("fixed camera source needs non-empty batches".into()));
            }
        }
        Ok(())
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub stage: u8,
    pub kind: UpdateKind,
    pub t_d: f32,
    pub residual_norm: f64,
    pub adapter_loss: Option<f32>,
}

/// Loop state that must survive a checkpoint.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Next global iteration to run.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub optimizer: Adam,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self {
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            optimizer: Adam::default(),
        }
    }

    pub fn stage(&self, config: &StageConfig) -> u8 {
        config.stage_of(self.iteration)
    }
}

/// Model, loop state and configuration of one run.
pub struct Trainer {
    pub model: RadianceModel,
    pub state: TrainState,
    pub config: TrainConfig,
    pub cameras: CameraSource,
    pub schedule: DiffusionSchedule,
}

impl Trainer {
    pub fn new(model: RadianceModel, config: TrainConfig) -> Result<Self> {
        config.stages.validate()?;
        if config.video_frames == 0 {
            return Err(Error::Config("video frame count must be positive".into()));
        }
        Ok(Self {
            state: TrainState::new(config.seed),
            model,
            config,
            cameras: CameraSource::Random,
            schedule: DiffusionSchedule::default(),
        })
    }

    pub fn with_cameras(mut self, cameras: CameraSource) -> Result<Self> {
        cameras.validate()?;
        self.cameras = cameras;
        Ok(self)
    }

    pub fn finished(&self) -> bool {
        self.state.iteration >= self.config.stages.total_iterations()
    }

    /// Runs one iteration. On failure the state is rolled back to the start
    /// of the iteration, so a checkpoint taken afterwards resumes it.
    pub fn step(&mut self, guidance: &mut GuidanceSet) -> Result<LogRecord> {
        let saved_rng = self.state.rng.clone();
        match self.try_step(guidance) {
            Ok(r) => Ok(r),
            Err(e) => {
                self.state.rng = saved_rng;
                Err(e)
            }
        }
    }

    fn try_step(&mut self, guidance: &mut GuidanceSet) -> Result<LogRecord> {
        let cfg = &self.config;
        let iteration = self.state.iteration;
        let stage = cfg.stages.stage_of(iteration);
        let rng = &mut self.state.rng;
        let kind = select_update(stage, &cfg.stages, rng)?;
        apply_freeze_policy(&mut self.model, stage, kind, &cfg.freeze);
        let t_d = sample_timestep(iteration, kind, &cfg.anneal, rng);
        let draw = NoiseDraw::Timestep(t_d);

        let ctx = |scale: f32, resolution| DistillContext {
            schedule: &self.schedule,
            prompt: &cfg.prompt,
            guidance_scale: scale,
            render: cfg.render,
            resolution,
        };
        let mut adapter_loss = None;
        let outcome: SdsOutcome = match kind {
            UpdateKind::ThreeD => {
                let cams = self.cameras.multiview(&cfg.cameras, rng)?;
                let t: f32 = rng.random();
                let c = ctx(cfg.guidance_scales.three_d, cfg.resolutions.three_d);
                sds_grad_3d(&self.model, &cams, t, guidance.three_d.as_mut(), &c, draw, rng)?
            }
            UpdateKind::Img => {
                let cam = self.cameras.single(&cfg.cameras, rng)?;
                let t: f32 = rng.random();
                let c = ctx(cfg.guidance_scales.image, cfg.resolutions.image);
                let out = vsd_grad(
                    &self.model,
                    &cam,
                    t,
                    guidance.image.as_mut(),
                    guidance.adapter.as_mut(),
                    &c,
                    draw,
                    rng,
                )?;
                adapter_loss = Some(finetune_adapter_step(
                    guidance.adapter.as_mut(),
                    guidance.image.as_mut(),
                    &out.rendered,
                    &out.cameras[0],
                    t,
                    &c,
                    NoiseDraw::Timestep(t_d),
                    cfg.adapter_lr,
                    rng,
                )?);
                out
            }
            UpdateKind::Vid => {
                let cam = self.cameras.single(&cfg.cameras, rng)?;
                let sampling = TimeSampling::random(cfg.video_frames, rng)?;
                let c = ctx(cfg.guidance_scales.video, cfg.resolutions.video);
                video_sds_grad(
                    &self.model,
                    std::slice::from_ref(&cam),
                    &sampling,
                    guidance.video.as_mut(),
                    &c,
                    draw,
                    rng,
                )?
            }
        };

        let mut grads = outcome.gradients;
        grads.scale(grad_scale_for(kind, &cfg.stages));
        for group in ParamGroup::ALL {
            let lr = learning_rate_for(group, stage, &cfg.stages);
            self.state
                .optimizer
                .step(self.model.group_params_mut(group), &grads, |_| lr)?;
        }
        self.state.iteration += 1;
        Ok(LogRecord {
            iteration,
            stage,
            kind,
            t_d: outcome.level.t_d,
            residual_norm: outcome.residual_norm,
            adapter_loss,
        })
    }

    /// Runs until global iteration `stop` (or the end of the schedule),
    /// calling `on_step` after every iteration.
    pub fn run_until(
        &mut self,
        guidance: &mut GuidanceSet,
        stop: u64,
        on_step: &mut dyn FnMut(&Trainer, &LogRecord) -> Result<()>,
    ) -> Result<Vec<LogRecord>> {
        let stop = stop.min(self.config.stages.total_iterations());
        let mut log = Vec::new();
        while self.state.iteration < stop {
            let record = self.step(guidance)?;
            on_step(self, &record)?;
            log.push(record);
        }
        Ok(log)
    }

    /// Runs all remaining iterations.
    pub fn run(
        &mut self,
        guidance: &mut GuidanceSet,
        on_step: &mut dyn FnMut(&Trainer, &LogRecord) -> Result<()>,
    ) -> Result<Vec<LogRecord>> {
        self.run_until(guidance, u64::MAX, on_step)
    }

    /// Parameter values of the whole model, for bitwise comparisons.
    pub fn parameter_snapshot(&self) -> Vec<(String, Vec<f32>)> {
        self.model
            .params()
            .into_iter()
            .map(|p| (p.name().to_string(), p.value.data().to_vec()))
            .collect()
    }
}
