//! A run assembled from a [`RunConfig`]: model, trainer and guidance.

use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::guidance::{AdapterModel, AnalyticGuidance, GuidanceKind, GuidanceModel, LowRankAdapter};
use crate::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::io::config::{EvalConfig, GuidanceTarget, RunConfig};
use crate::io::wire::{RemoteAdapter, RemoteGuidance, WireClient};
use crate::render::{orbit_trajectory, render_video, RadianceModel, RenderOptions, RenderedVideo, TimeSampling};
use crate::scheduler::{GuidanceSet, LogRecord, Trainer};
use crate::synthetic::SyntheticScene;

pub const CHECKPOINT_NAME: &str = "checkpoint.ckpt";
pub const FRAMES_DIR: &str = "frames";

const CONNECT_TIMEOUT: Duration = Duration::from_secs(30);
const REPLY_TIMEOUT: Duration = Duration::from_secs(600);

pub fn connect(address: &str) -> Result<WireClient> {
    let client = WireClient::connect(address, CONNECT_TIMEOUT)?;
    client.set_reply_timeout(REPLY_TIMEOUT)?;
    Ok(client)
}

fn load_scene(target: &GuidanceTarget) -> Result<Option<SyntheticScene>> {
    Ok(match target {
        GuidanceTarget::Builtin(name) => Some(SyntheticScene::builtin(name)?),
        GuidanceTarget::SceneFile(path) => Some(SyntheticScene::from_json(&std::fs::read_to_string(path)?)?),
        GuidanceTarget::Remote(_) => None,
    })
}

/// Builds the three guidance models and the adapter named by `config`.
pub fn build_guidance(config: &RunConfig) -> Result<GuidanceSet> {
    let targets = config.guidance.targets()?;
    let native = config.guidance.native;
    // Targets render without jitter so repeated queries agree.
    let target_render = RenderOptions::deterministic(config.render.samples_per_ray);
    let kinds = [
        (GuidanceKind::ThreeDAware, native.three_d),
        (GuidanceKind::Image, native.image),
        (GuidanceKind::Video, native.video),
    ];
    let mut models: Vec<Box<dyn GuidanceModel>> = Vec::with_capacity(3);
    for (target, (kind, res)) in targets.iter().zip(kinds) {
        models.push(match load_scene(target)? {
            Some(scene) => Box::new(AnalyticGuidance::from_scene(kind, res, scene, target_render)),
            None => {
                let GuidanceTarget::Remote(addr) = target else { unreachable!() };
                Box::new(RemoteGuidance::new(connect(addr)?, kind, res))
            }
        });
    }
    let adapter: Box<dyn AdapterModel> = match &targets[1] {
        GuidanceTarget::Remote(addr) => Box::new(RemoteAdapter::new(
            connect(addr)?,
            format!("run-{:016x}", config.seed),
        )),
        _ => Box::new(LowRankAdapter::new(
            native.image.0 * native.image.1 * 3,
            config.guidance.adapter_rank,
            config.seed ^ 0xada7_0000,
        )?),
    };
    let mut models = models.into_iter();
    Ok(GuidanceSet {
        three_d: models.next().expect("three models"),
        image: models.next().expect("three models"),
        video: models.next().expect("three models"),
        adapter,
    })
}

pub struct Session {
    pub config: RunConfig,
    pub trainer: Trainer,
    pub guidance: GuidanceSet,
}

impl Session {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = RadianceModel::new(&config.scene, config.seed)?;
        let trainer = Trainer::new(model, config.train_config())?;
        let guidance = build_guidance(&config)?;
        Ok(Self {
            config,
            trainer,
            guidance,
        })
    }

    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        let config = checkpoint.config()?;
        let trainer = checkpoint.restore_trainer(&config)?;
        let mut guidance = build_guidance(&config)?;
        checkpoint.restore_adapter(guidance.adapter.as_mut())?;
        Ok(Self {
            config,
            trainer,
            guidance,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.trainer, self.guidance.adapter.as_ref(), &self.config)
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.config.output_dir)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        save_checkpoint(&self.checkpoint(), path)
    }

    /// Trains up to global iteration `stop`, saving to `checkpoint` every
    /// `checkpoint_every` iterations when a path is given.
    pub fn run_until(
        &mut self,
        stop: u64,
        checkpoint: Option<&Path>,
        on_step: &mut dyn FnMut(&LogRecord),
    ) -> Result<Vec<LogRecord>> {
        let stop = stop.min(self.config.stages.total_iterations());
        let every = self.config.checkpoint_every;
        let mut log = Vec::new();
        while self.trainer.state.iteration < stop {
            let record = self.trainer.step(&mut self.guidance)?;
            on_step(&record);
            log.push(record);
            if let Some(path) = checkpoint {
                if every > 0 && self.trainer.state.iteration.is_multiple_of(every) {
                    self.save(path)?;
                }
            }
        }
        Ok(log)
    }

    /// Renders the inference orbit described by `eval`.
    pub fn render_orbit(&self, eval: &EvalConfig, orbit: bool) -> Result<RenderedVideo> {
        render_orbit(&self.trainer.model, eval, orbit)
    }
}

/// `eval.frames` evenly spaced times seen from a camera circling at fixed
/// elevation, or from the first orbit camera when `orbit` is false.
pub fn render_orbit(model: &RadianceModel, eval: &EvalConfig, orbit: bool) -> Result<RenderedVideo> {
    let mut cameras = orbit_trajectory(eval.frames, eval.elevation, eval.radius, eval.fov, eval.resolution)?;
    if !orbit {
        cameras.truncate(1);
    }
    let sampling = TimeSampling::evenly_spaced(eval.frames)?;
    let opts = RenderOptions::deterministic(eval.samples_per_ray);
    // Deterministic sampling draws nothing; the rng only satisfies the API.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    render_video(model, &cameras, &sampling, &opts, &mut rng)
}
