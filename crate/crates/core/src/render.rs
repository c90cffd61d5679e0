//! Differentiable volume rendering: pinhole cameras, stratified ray
//! marching, front-to-back alpha compositing over a learned background, and
//! bilinear upsampling.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Differentiable, GatherSpec, Param, Primitive, Tape, Var};
use crate::error::{Error, Result};
use crate::scene::{Linear, ParamGroup, SceneConfig, SceneModel};
use crate::tensor::Tensor;

/// Lower bound on accumulated opacity when normalizing depth.
pub const DEPTH_EPS: f64 = 1e-6;

type Vec3 = [f32; 3];

fn dot(a: Vec3, b: Vec3) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Vec3) -> Option<Vec3> {
    let n = dot(a, a).sqrt();
    (n > 1e-8).then(|| a.map(|v| v / n))
}

/// Pinhole camera. `rotation` maps camera axes to world axes (columns are
/// right, up and backward); the camera looks along its local `-z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: [[f32; 3]; 3],
    pub position: Vec3,
    /// Vertical field of view in degrees.
    pub fov_degrees: f32,
    pub width: usize,
    pub height: usize,
    pub near: f32,
    pub far: f32,
}

impl Camera {
    /// Camera on a sphere around the origin, looking at the origin with +y up.
    pub fn orbit(
        azimuth_deg: f32,
        elevation_deg: f32,
        radius: f32,
        fov_degrees: f32,
        (width, height): (usize, usize),
    ) -> Result<Self> {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let position = [
            radius * el.cos() * az.sin(),
            radius * el.sin(),
            radius * el.cos() * az.cos(),
        ];
        let forward = normalize(position.map(|v| -v))
            .ok_or_else(|| Error::DegeneratePose("camera at the origin".into()))?;
        if forward[1].abs() > 1.0 - 1e-6 {
            return Err(Error::DegeneratePose("view direction parallel to up".into()));
        }
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]))
            .ok_or_else(|| Error::DegeneratePose("view direction parallel to up".into()))?;
        let up = cross(right, forward);
        let back = forward.map(|v| -v);
        let rotation = [
            [right[0], up[0], back[0]],
            [right[1], up[1], back[1]],
            [right[2], up[2], back[2]],
        ];
        let cam = Self {
            rotation,
            position,
            fov_degrees,
            width,
            height,
            near: (radius - 1.0).max(0.05),
            far: radius + 1.0,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_resolution(&self, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..self.clone()
        }
    }

    /// Camera-to-world `[R | t]`, 12 values row-major.
    pub fn extrinsics(&self) -> [f32; 12] {
        let r = &self.rotation;
        let p = &self.position;
        [
            r[0][0], r[0][1], r[0][2], p[0], r[1][0], r[1][1], r[1][2], p[1], r[2][0], r[2][1],
            r[2][2], p[2],
        ]
    }

    pub fn from_extrinsics(
        e: &[f32; 12],
        fov_degrees: f32,
        (width, height): (usize, usize),
        (near, far): (f32, f32),
    ) -> Result<Self> {
        let cam = Self {
            rotation: [[e[0], e[1], e[2]], [e[4], e[5], e[6]], [e[8], e[9], e[10]]],
            position: [e[3], e[7], e[11]],
            fov_degrees,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let col = |j: usize| [r[0][j], r[1][j], r[2][j]];
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot(col(i), col(j)) - expected).abs() > 1e-4 {
                    return Err(Error::DegeneratePose("rotation is not orthonormal".into()));
                }
            }
        }
        if (dot(cross(col(0), col(1)), col(2)) - 1.0).abs() > 1e-4 {
            return Err(Error::DegeneratePose("rotation determinant is not +1".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::DegeneratePose("empty image".into()));
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return Err(Error::DegeneratePose(format!("fov {}", self.fov_degrees)));
        }
        if !(self.near >= 0.0 && self.near < self.far) {
            return Err(Error::DegeneratePose("near must be below far".into()));
        }
        Ok(())
    }

    fn focal(&self) -> f32 {
        0.5 * self.height as f32 / (0.5 * self.fov_degrees.to_radians()).tan()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

/// One ray per pixel through pixel centres, row-major from the top-left.
pub fn generate_rays(camera: &Camera) -> Result<Vec<Ray>> {
    camera.validate()?;
    let f = camera.focal();
    let (w, h) = (camera.width as f32, camera.height as f32);
    let r = &camera.rotation;
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for j in 0..camera.height {
        for i in 0..camera.width {
            let local = [
                (i as f32 + 0.5 - 0.5 * w) / f,
                -(j as f32 + 0.5 - 0.5 * h) / f,
                -1.0,
            ];
            let world = [
                dot(r[0], local),
                dot(r[1], local),
                dot(r[2], local),
            ];
            let direction = normalize(world)
                .ok_or_else(|| Error::DegeneratePose("zero ray direction".into()))?;
            rays.push(Ray {
                origin: camera.position,
                direction,
            });
        }
    }
    Ok(rays)
}

/// Sample positions along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub positions: Vec<Vec3>,
    /// Distance of each sample from the ray origin.
    pub depths: Vec<f32>,
    /// Segment length to the next sample; the last sample's segment is one
    /// stratum wide.
    pub deltas: Vec<f32>,
}

/// Stratified samples: one uniform draw in each of `n` equal sub-intervals of
/// `[near, far]`, or the sub-interval midpoints when `rng` is `None`.
pub fn sample_points(
    ray: &Ray,
    n: usize,
    near: f32,
    far: f32,
    rng: Option<&mut dyn RngCore>,
) -> Result<RaySamples> {
    if n < 2 {
        return Err(Error::range("samples per ray", format!("{n} < 2")));
    }
    if !(near < far) {
        return Err(Error::range("ray bounds", format!("near {near} >= far {far}")));
    }
    let width = (far - near) / n as f32;
    let mut depths = Vec::with_capacity(n);
    match rng {
        Some(rng) => {
            for i in 0..n {
                let u: f32 = rng.random::<f32>();
                depths.push(near + (i as f32 + u) * width);
            }
        }
        None => depths.extend((0..n).map(|i| near + (i as f32 + 0.5) * width)),
    }
    let positions: Vec<Vec3> = depths
        .iter()
        .map(|&z| std::array::from_fn(|k| ray.origin[k] + z * ray.direction[k]))
        .collect();
    let mut deltas = Vec::with_capacity(n);
    for i in 0..n - 1 {
        let d: Vec3 = std::array::from_fn(|k| positions[i + 1][k] - positions[i][k]);
        deltas.push(dot(d, d).sqrt());
    }
    deltas.push(width);
    Ok(RaySamples {
        positions,
        depths,
        deltas,
    })
}

/// Result of compositing one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Composited {
    pub color: Vec3,
    pub opacity: f32,
    pub depth: f32,
}

fn composite_ray(
    density: &[f32],
    color: &[f32],
    deltas: &[f32],
    depths: &[f32],
    background: &[f32],
) -> Composited {
    let mut transmittance = 1.0f64;
    let mut rgb = [0.0f64; 3];
    let mut depth = 0.0f64;
    let mut weight_sum = 0.0f64;
    for i in 0..density.len() {
        let attenuation = (-f64::from(density[i]) * f64::from(deltas[i])).exp();
        let w = transmittance * (1.0 - attenuation);
        for c in 0..3 {
            rgb[c] += w * f64::from(color[3 * i + c]);
        }
        depth += w * f64::from(depths[i]);
        weight_sum += w;
        transmittance *= attenuation;
    }
    for c in 0..3 {
        rgb[c] += (1.0 - weight_sum) * f64::from(background[c]);
    }
    Composited {
        color: rgb.map(|v| v as f32),
        opacity: weight_sum as f32,
        depth: (depth / weight_sum.max(DEPTH_EPS)) as f32,
    }
}

/// Alpha-composites `(τ_i, c_i, δ_i)` front to back over `background`.
pub fn composite(
    density: &[f32],
    color: &[Vec3],
    deltas: &[f32],
    depths: &[f32],
    background: Vec3,
) -> Result<Composited> {
    let n = density.len();
    if color.len() != n || deltas.len() != n || depths.len() != n {
        return Err(Error::shape("composite", "sample arrays differ in length"));
    }
    let finite = density.iter().chain(deltas).chain(depths).all(|v| v.is_finite())
        && color.iter().flatten().chain(&background).all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite { op: "composite" });
    }
    if density.iter().any(|&t| t < 0.0) || deltas.iter().any(|&d| d <= 0.0) {
        return Err(Error::range("composite", "densities must be >= 0 and deltas > 0"));
    }
    let flat: Vec<f32> = color.iter().flatten().copied().collect();
    Ok(composite_ray(density, &flat, deltas, depths, &background))
}

/// Tape primitive for batched compositing of rays with varying numbers of
/// samples. Inputs: density `[P, 1]`, color `[P, 3]`, background `[R, 3]`;
/// output `[R, 3]`. Ray `r` owns samples `offsets[r]..offsets[r + 1]`.
struct CompositeOp {
    offsets: Vec<usize>,
    deltas: Vec<f32>,
}

impl Primitive for CompositeOp {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &[f32],
        grad_inputs: &mut [Option<&mut [f32]>],
    ) {
        let (density, color, background) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let mut behind_all = Vec::new();
        let mut trans_after = Vec::new();
        for r in 0..self.offsets.len() - 1 {
            let (s, e) = (self.offsets[r], self.offsets[r + 1]);
            let n = e - s;
            let g = &grad_output[3 * r..3 * r + 3];
            // T_{i+1} for every sample.
            trans_after.clear();
            let mut t = 1.0f64;
            for i in s..e {
                t *= (-f64::from(density[i]) * f64::from(self.deltas[i])).exp();
                trans_after.push(t);
            }
            // Color seen behind each sample: R_last = bg, R_{i-1} = α_i c_i + (1 - α_i) R_i.
            behind_all.clear();
            behind_all.resize(3 * n, 0.0f64);
            let mut behind: [f64; 3] = std::array::from_fn(|c| f64::from(background[3 * r + c]));
            for k in (0..n).rev() {
                let i = s + k;
                behind_all[3 * k..3 * k + 3].copy_from_slice(&behind);
                let a = (-f64::from(density[i]) * f64::from(self.deltas[i])).exp();
                for c in 0..3 {
                    behind[c] = (1.0 - a) * f64::from(color[3 * i + c]) + a * behind[c];
                }
            }
            if let Some(gd) = grad_inputs[0].as_deref_mut() {
                for k in 0..n {
                    let i = s + k;
                    let mut acc = 0.0f64;
                    for c in 0..3 {
                        acc += f64::from(g[c]) * (f64::from(color[3 * i + c]) - behind_all[3 * k + c]);
                    }
                    gd[i] += (f64::from(self.deltas[i]) * trans_after[k] * acc) as f32;
                }
            }
            if let Some(gc) = grad_inputs[1].as_deref_mut() {
                let mut t = 1.0f64;
                for k in 0..n {
                    let w = t - trans_after[k];
                    t = trans_after[k];
                    for c in 0..3 {
                        gc[3 * (s + k) + c] += (w * f64::from(g[c])) as f32;
                    }
                }
            }
            if let Some(gb) = grad_inputs[2].as_deref_mut() {
                let tn = trans_after.last().copied().unwrap_or(1.0);
                for c in 0..3 {
                    gb[3 * r + c] += (tn * f64::from(g[c])) as f32;
                }
            }
        }
    }
}

/// Learned background color as a function of ray direction.
#[derive(Clone, Debug)]
pub struct BackgroundMlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl BackgroundMlp {
    pub const HIDDEN: usize = 16;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            hidden: Linear::new("background.hidden", 3, Self::HIDDEN, 2.0, &mut rng),
            output: Linear::new("background.output", Self::HIDDEN, 3, 1.0, &mut rng),
        }
    }

    /// Colors `[R, 3]` for unit directions.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, directions: &[Vec3]) -> Result<Var> {
        let d = Tensor::new(
            vec![directions.len(), 3],
            directions.iter().flatten().copied().collect(),
        )?;
        let d = tape.constant(d)?;
        let h = self.hidden.forward(tape, d)?;
        let h = tape.softplus(h)?;
        let o = self.output.forward(tape, h)?;
        tape.sigmoid(o)
    }

    pub fn color(&self, direction: Vec3) -> Result<Vec3> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, &[direction])?;
        let c = tape.value(v).data();
        Ok([c[0], c[1], c[2]])
    }
}

impl Differentiable for BackgroundMlp {
    fn params(&self) -> Vec<&Param> {
        self.hidden.params().into_iter().chain(self.output.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let Self { hidden, output } = self;
        hidden.params_mut().into_iter().chain(output.params_mut()).collect()
    }
}

/// Scene plus background: everything a render depends on.
#[derive(Clone, Debug)]
pub struct RadianceModel {
    pub scene: SceneModel,
    pub background: BackgroundMlp,
}

impl RadianceModel {
    pub fn new(config: &SceneConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            scene: SceneModel::new(config, seed)?,
            background: BackgroundMlp::new(seed ^ 0xb6_0000),
        })
    }

    pub fn group_params(&self, group: ParamGroup) -> Vec<&Param> {
        match group {
            ParamGroup::Background => self.background.params(),
            g => self.scene.group_params(g),
        }
    }

    pub fn group_params_mut(&mut self, group: ParamGroup) -> Vec<&mut Param> {
        match group {
            ParamGroup::Background => self.background.params_mut(),
            g => self.scene.group_params_mut(g),
        }
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for p in self.group_params_mut(group) {
            p.frozen = frozen;
        }
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.group_params(group).iter().all(|p| p.frozen)
    }

    /// Group of the parameter with the given name.
    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .find(|&g| self.group_params(g).iter().any(|p| p.name() == name))
    }
}

impl Differentiable for RadianceModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.scene.params();
        v.extend(self.background.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let Self { scene, background } = self;
        let mut v = scene.params_mut();
        v.extend(background.params_mut());
        v
    }
}

/// Ray-marching settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub samples_per_ray: usize,
    /// Jitter samples within their strata; midpoints otherwise.
    pub stratified: bool,
    /// Samples farther than this from the origin are treated as empty space.
    pub bound_radius: Option<f32>,
}

impl RenderOptions {
    pub fn deterministic(samples_per_ray: usize) -> Self {
        Self {
            samples_per_ray,
            stratified: false,
            bound_radius: Some(1.0),
        }
    }

    pub fn stratified(samples_per_ray: usize) -> Self {
        Self {
            stratified: true,
            ..Self::deterministic(samples_per_ray)
        }
    }
}

/// One image to render as part of a batch.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub time: f32,
}

/// Batched differentiable render of several views.
#[derive(Clone, Debug)]
pub struct RenderedBatch {
    /// `[Σ H·W, 3]`, views stacked in order.
    pub rgb: Var,
    pub opacity: Vec<f32>,
    pub depth: Vec<f32>,
    /// `(height, width)` per view.
    pub sizes: Vec<(usize, usize)>,
}

/// Marched samples of a set of views, with out-of-bound samples removed.
pub struct MarchPlan {
    pub positions: Vec<Vec3>,
    pub times: Vec<f32>,
    pub deltas: Vec<f32>,
    pub depths: Vec<f32>,
    pub offsets: Vec<usize>,
    pub directions: Vec<Vec3>,
    pub sizes: Vec<(usize, usize)>,
}

pub fn march(
    views: &[View],
    opts: &RenderOptions,
    rng: &mut dyn RngCore,
) -> Result<MarchPlan> {
    let n = opts.samples_per_ray;
    let bound2 = opts.bound_radius.map(|b| b * b);
    let mut plan = MarchPlan {
        positions: Vec::new(),
        times: Vec::new(),
        deltas: Vec::new(),
        depths: Vec::new(),
        offsets: vec![0],
        directions: Vec::new(),
        sizes: Vec::with_capacity(views.len()),
    };
    for view in views {
        if !(0.0..=1.0).contains(&view.time) {
            return Err(Error::range("time", format!("{} not in [0, 1]", view.time)));
        }
        let rays = generate_rays(&view.camera)?;
        plan.sizes.push((view.camera.height, view.camera.width));
        for ray in &rays {
            let s = if opts.stratified {
                sample_points(ray, n, view.camera.near, view.camera.far, Some(&mut *rng))?
            } else {
                sample_points(ray, n, view.camera.near, view.camera.far, None)?
            };
            for i in 0..n {
                let p = s.positions[i];
                if bound2.is_some_and(|b2| dot(p, p) > b2) {
                    continue;
                }
                plan.positions.push(p);
                plan.deltas.push(s.deltas[i]);
                plan.depths.push(s.depths[i]);
                plan.times.push(view.time);
            }
            plan.offsets.push(plan.positions.len());
            plan.directions.push(ray.direction);
        }
    }
    Ok(plan)
}

/// Renders `views` on `tape`.
pub fn render_on_tape<'a>(
    tape: &mut Tape<'a>,
    model: &'a RadianceModel,
    views: &[View],
    opts: &RenderOptions,
    rng: &mut dyn RngCore,
) -> Result<RenderedBatch> {
    let plan = march(views, opts, rng)?;
    let field = model.scene.query_on_tape(tape, &plan.positions, &plan.times)?;
    let bg = model.background.forward(tape, &plan.directions)?;

    let (density, color, bgv) = (
        tape.value(field.density).data(),
        tape.value(field.color).data(),
        tape.value(bg).data(),
    );
    let rays = plan.directions.len();
    let mut rgb = Vec::with_capacity(rays * 3);
    let mut opacity = Vec::with_capacity(rays);
    let mut depth = Vec::with_capacity(rays);
    for r in 0..rays {
        let (s, e) = (plan.offsets[r], plan.offsets[r + 1]);
        let c = composite_ray(
            &density[s..e],
            &color[3 * s..3 * e],
            &plan.deltas[s..e],
            &plan.depths[s..e],
            &bgv[3 * r..3 * r + 3],
        );
        rgb.extend_from_slice(&c.color);
        opacity.push(c.opacity);
        depth.push(c.depth);
    }
    let out = Tensor::new(vec![rays, 3], rgb)?;
    let rgb = tape.custom(
        &[field.density, field.color, bg],
        out,
        Box::new(CompositeOp {
            offsets: plan.offsets,
            deltas: plan.deltas,
        }),
    )?;
    Ok(RenderedBatch {
        rgb,
        opacity,
        depth,
        sizes: plan.sizes,
    })
}

/// Rendered color, expected termination depth and accumulated opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    /// `[H, W, 3]`.
    pub rgb: Tensor,
    /// `[H, W]`.
    pub depth: Tensor,
    /// `[H, W]`.
    pub opacity: Tensor,
}

impl RenderedImage {
    pub fn height(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedVideo {
    pub frames: Vec<RenderedImage>,
    pub cameras: Vec<Camera>,
    pub times: Vec<f32>,
}

pub fn split_batch(tape: &Tape<'_>, batch: &RenderedBatch) -> Result<Vec<RenderedImage>> {
    let rgb = tape.value(batch.rgb).data();
    let mut offset = 0;
    let mut out = Vec::with_capacity(batch.sizes.len());
    for &(h, w) in &batch.sizes {
        let n = h * w;
        out.push(RenderedImage {
            rgb: Tensor::new(vec![h, w, 3], rgb[3 * offset..3 * (offset + n)].to_vec())?,
            depth: Tensor::new(vec![h, w], batch.depth[offset..offset + n].to_vec())?,
            opacity: Tensor::new(vec![h, w], batch.opacity[offset..offset + n].to_vec())?,
        });
        offset += n;
    }
    Ok(out)
}

/// Forward-only render of one view.
pub fn render_image(
    model: &RadianceModel,
    camera: &Camera,
    t: f32,
    opts: &RenderOptions,
    rng: &mut dyn RngCore,
) -> Result<RenderedImage> {
    let mut tape = Tape::new();
    let view = View {
        camera: camera.clone(),
        time: t,
    };
    let batch = render_on_tape(&mut tape, model, &[view], opts, rng)?;
    Ok(split_batch(&tape, &batch)?.remove(0))
}

/// Forward-only render of `sampling.times()`, from one shared camera or one
/// camera per frame.
pub fn render_video(
    model: &RadianceModel,
    cameras: &[Camera],
    sampling: &TimeSampling,
    opts: &RenderOptions,
    rng: &mut dyn RngCore,
) -> Result<RenderedVideo> {
    let times = sampling.times();
    let cameras = expand_cameras(cameras, times.len())?;
    let mut frames = Vec::with_capacity(times.len());
    // Frame by frame keeps peak memory at one image.
    for (cam, &t) in cameras.iter().zip(&times) {
        frames.push(render_image(model, cam, t, opts, rng)?);
    }
    Ok(RenderedVideo {
        frames,
        cameras,
        times,
    })
}

pub(crate) fn expand_cameras(cameras: &[Camera], frames: usize) -> Result<Vec<Camera>> {
    match cameras.len() {
        1 => Ok(vec![cameras[0].clone(); frames]),
        n if n == frames => Ok(cameras.to_vec()),
        n => Err(Error::shape(
            "video cameras",
            format!("{n} cameras for {frames} frames"),
        )),
    }
}

/// Evenly spaced frame times with a shared offset: `o + k / V`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSampling {
    pub frame_count: usize,
    pub offset: f32,
}

impl TimeSampling {
    pub fn new(frame_count: usize, offset: f32) -> Result<Self> {
        if frame_count == 0 {
            return Err(Error::range("frame count", "must be >= 1"));
        }
        if !(0.0..1.0 / frame_count as f32).contains(&offset) {
            return Err(Error::range(
                "time offset",
                format!("{offset} not in [0, 1/{frame_count})"),
            ));
        }
        Ok(Self {
            frame_count,
            offset,
        })
    }

    pub fn evenly_spaced(frame_count: usize) -> Result<Self> {
        Self::new(frame_count, 0.0)
    }

    /// Uniform random offset in `[0, 1/V)`.
    pub fn random(frame_count: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if frame_count == 0 {
            return Err(Error::range("frame count", "must be >= 1"));
        }
        let span = 1.0 / frame_count as f32;
        let offset = (rng.random::<f32>() * span).min(span * (1.0 - f32::EPSILON));
        Self::new(frame_count, offset)
    }

    pub fn times(&self) -> Vec<f32> {
        let v = self.frame_count as f32;
        (0..self.frame_count)
            .map(|k| self.offset + k as f32 / v)
            .collect()
    }
}

/// Frames rendered by default at inference.
pub const INFERENCE_FRAMES: usize = 64;

/// How training cameras are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraDistribution {
    pub elevation_range: (f32, f32),
    pub fov_range: (f32, f32),
    pub radius: f32,
}

impl Default for CameraDistribution {
    fn default() -> Self {
        Self {
            elevation_range: (-10.0, 45.0),
            fov_range: (40.0, 70.0),
            radius: 1.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CameraMode {
    /// Four views 90° apart in azimuth, sharing elevation, radius and fov.
    Multiview4,
    Single,
}

/// Draws a camera batch. `resolution` is `(width, height)`.
pub fn sample_cameras(
    mode: CameraMode,
    dist: &CameraDistribution,
    resolution: (usize, usize),
    rng: &mut dyn RngCore,
) -> Result<Vec<Camera>> {
    let azimuth = rng.random::<f32>() * 360.0;
    let (lo, hi) = dist.elevation_range;
    let elevation = (lo + rng.random::<f32>() * (hi - lo)).clamp(lo, hi);
    let (flo, fhi) = dist.fov_range;
    let fov = flo + rng.random::<f32>() * (fhi - flo);
    let count = match mode {
        CameraMode::Multiview4 => 4,
        CameraMode::Single => 1,
    };
    (0..count)
        .map(|k| {
            Camera::orbit(
                (azimuth + 90.0 * k as f32) % 360.0,
                elevation,
                dist.radius,
                fov,
                resolution,
            )
        })
        .collect()
}

/// `frames` cameras evenly spaced in azimuth at a fixed elevation.
pub fn orbit_trajectory(
    frames: usize,
    elevation: f32,
    radius: f32,
    fov: f32,
    resolution: (usize, usize),
) -> Result<Vec<Camera>> {
    (0..frames)
        .map(|k| {
            Camera::orbit(
                360.0 * k as f32 / frames as f32,
                elevation,
                radius,
                fov,
                resolution,
            )
        })
        .collect()
}

/// Sampling plan for half-pixel-centred bilinear resizing along one axis.
fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f32 / dst as f32;
    (0..dst)
        .map(|i| {
            let x = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f32);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            (x0, x1, x - x0 as f32)
        })
        .collect()
}

fn upsample_spec(
    images: usize,
    (h, w): (usize, usize),
    (th, tw): (usize, usize),
) -> Result<GatherSpec> {
    if th < h || tw < w {
        return Err(Error::range(
            "upsample",
            format!("target {th}x{tw} smaller than source {h}x{w}"),
        ));
    }
    let rows = bilinear_axis(h, th);
    let cols = bilinear_axis(w, tw);
    let mut indices = Vec::with_capacity(images * th * tw * 4);
    let mut weights = Vec::with_capacity(images * th * tw * 4);
    for img in 0..images {
        let base = img * h * w;
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        indices.push((base + y * w + x) as u32);
                        weights.push(wy * wx);
                    }
                }
            }
        }
    }
    Ok(GatherSpec {
        rows: images * th * tw,
        taps: 4,
        indices,
        weights,
    })
}

/// Bilinear upsampling of an `[H, W, C]` image.
pub fn upsample(image: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (h, w, c) = match image.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::shape("upsample", format!("{s:?} is not [H, W, C]"))),
    };
    let mut tape = Tape::new();
    let src = tape.constant(image.clone().reshape(&[h * w, c])?)?;
    let out = tape.gather(src, upsample_spec(1, (h, w), target)?)?;
    tape.value(out).clone().reshape(&[target.0, target.1, c])
}

/// Differentiable upsampling of `images` stacked `[N·H·W, C]`.
pub fn upsample_on_tape(
    tape: &mut Tape<'_>,
    stacked: Var,
    images: usize,
    source: (usize, usize),
    target: (usize, usize),
) -> Result<Var> {
    if source == target {
        return Ok(stacked);
    }
    let spec = upsample_spec(images, source, target)?;
    tape.gather(stacked, spec)
}
