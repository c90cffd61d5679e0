//! Procedural ground-truth scenes used as analytic guidance targets.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{composite, generate_rays, march, Camera, RenderOptions, RenderedImage, View};
use crate::tensor::Tensor;

/// A soft sphere that may move and change color linearly in time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f32; 3],
    /// Center at `t = 1`; equals `center` for a static blob.
    pub center_end: [f32; 3],
    pub radius: f32,
    /// Density inside the blob.
    pub density: f32,
    /// Edge steepness, in inverse scene units.
    pub sharpness: f32,
    pub color: [f32; 3],
    /// Color at `t = 1`.
    pub color_end: [f32; 3],
    /// Amplitude of the position-dependent color variation.
    pub shading: f32,
}

impl Blob {
    fn center_at(&self, t: f32) -> [f32; 3] {
        std::array::from_fn(|k| self.center[k] + t * (self.center_end[k] - self.center[k]))
    }

    fn density_at(&self, mu: [f32; 3], t: f32) -> f32 {
        let c = self.center_at(t);
        let d = (0..3).map(|k| (mu[k] - c[k]).powi(2)).sum::<f32>().sqrt();
        let x = (self.radius - d) * self.sharpness;
        self.density / (1.0 + (-x).exp())
    }

    fn color_at(&self, mu: [f32; 3], t: f32) -> [f32; 3] {
        let c = self.center_at(t);
        std::array::from_fn(|k| {
            let base = self.color[k] + t * (self.color_end[k] - self.color[k]);
            let offset = (mu[k] - c[k]) / self.radius;
            (base + self.shading * offset).clamp(0.0, 1.0)
        })
    }

    pub fn is_static(&self) -> bool {
        self.center == self.center_end && self.color == self.color_end
    }
}

/// Sum of blobs over a vertical-gradient background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub blobs: Vec<Blob>,
    pub sky: [f32; 3],
    pub ground: [f32; 3],
}

impl SyntheticScene {
    /// One smoothly shaded static sphere.
    pub fn sphere() -> Self {
        Self {
            blobs: vec![Blob {
                center: [0.0; 3],
                center_end: [0.0; 3],
                radius: 0.5,
                density: 40.0,
                sharpness: 30.0,
                color: [0.75, 0.45, 0.3],
                color_end: [0.75, 0.45, 0.3],
                shading: 0.2,
            }],
            sky: [0.55, 0.65, 0.8],
            ground: [0.35, 0.3, 0.25],
        }
    }

    /// The sphere plus a smaller body moving across its front.
    pub fn moving() -> Self {
        let mut scene = Self::sphere();
        scene.blobs.push(Blob {
            center: [-0.3, 0.35, 0.3],
            center_end: [0.3, 0.35, 0.3],
            radius: 0.25,
            density: 40.0,
            sharpness: 30.0,
            color: [0.2, 0.7, 0.3],
            color_end: [0.2, 0.7, 0.3],
            shading: 0.1,
        });
        scene
    }

    /// The sphere with a cap that changes color over time.
    pub fn changing() -> Self {
        let mut scene = Self::sphere();
        scene.blobs.push(Blob {
            center: [0.0, 0.45, 0.0],
            center_end: [0.0, 0.45, 0.0],
            radius: 0.3,
            density: 40.0,
            sharpness: 30.0,
            color: [0.9, 0.2, 0.2],
            color_end: [0.2, 0.3, 0.9],
            shading: 0.1,
        });
        scene
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "sphere" => Ok(Self::sphere()),
            "moving" => Ok(Self::moving()),
            "changing" => Ok(Self::changing()),
            other => Err(Error::Config(format!("unknown builtin scene {other:?}"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("scene description: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn is_static(&self) -> bool {
        self.blobs.iter().all(Blob::is_static)
    }

    /// Density and density-weighted color at a point.
    pub fn field(&self, mu: [f32; 3], t: f32) -> (f32, [f32; 3]) {
        let mut total = 0.0f32;
        let mut rgb = [0.0f32; 3];
        for b in &self.blobs {
            let d = b.density_at(mu, t);
            let c = b.color_at(mu, t);
            total += d;
            for k in 0..3 {
                rgb[k] += d * c[k];
            }
        }
        if total > 0.0 {
            (total, rgb.map(|v| v / total))
        } else {
            (0.0, [0.0; 3])
        }
    }

    pub fn background(&self, direction: [f32; 3]) -> [f32; 3] {
        let s = 0.5 * (direction[1] + 1.0);
        std::array::from_fn(|k| self.ground[k] + s * (self.sky[k] - self.ground[k]))
    }

    /// Renders with the same marching as the learned model.
    pub fn render(
        &self,
        camera: &Camera,
        t: f32,
        opts: &RenderOptions,
        rng: &mut dyn RngCore,
    ) -> Result<RenderedImage> {
        let view = View {
            camera: camera.clone(),
            time: t,
        };
        let plan = march(std::slice::from_ref(&view), opts, rng)?;
        let rays = generate_rays(camera)?;
        let (h, w) = (camera.height, camera.width);
        let mut rgb = Vec::with_capacity(h * w * 3);
        let mut depth = Vec::with_capacity(h * w);
        let mut opacity = Vec::with_capacity(h * w);
        for (r, ray) in rays.iter().enumerate() {
            let (s, e) = (plan.offsets[r], plan.offsets[r + 1]);
            let mut dens = Vec::with_capacity(e - s);
            let mut cols = Vec::with_capacity(e - s);
            for i in s..e {
                let (d, c) = self.field(plan.positions[i], t);
                dens.push(d);
                cols.push(c);
            }
            let c = composite(
                &dens,
                &cols,
                &plan.deltas[s..e],
                &plan.depths[s..e],
                self.background(ray.direction),
            )?;
            rgb.extend_from_slice(&c.color);
            depth.push(c.depth);
            opacity.push(c.opacity);
        }
        Ok(RenderedImage {
            rgb: Tensor::new(vec![h, w, 3], rgb)?,
            depth: Tensor::new(vec![h, w], depth)?,
            opacity: Tensor::new(vec![h, w], opacity)?,
        })
    }
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`, optionally
/// restricted to pixels where `mask` is set.
pub fn psnr(a: &Tensor, b: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let channels = a.shape().last().copied().unwrap_or(1);
    let pixels = a.numel() / channels.max(1);
    if let Some(m) = mask {
        if m.len() != pixels {
            return Err(Error::shape("psnr", format!("mask of {} for {pixels} pixels", m.len())));
        }
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for p in 0..pixels {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        for c in 0..channels {
            let d = f64::from(a.data()[p * channels + c]) - f64::from(b.data()[p * channels + c]);
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::range("psnr", "empty mask"));
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}
