//! Naive f64 re-evaluation of the radiance model, used as an oracle.
#![allow(dead_code)]

use hybrid_sds::io::config::{Profile, RunConfig};
use hybrid_sds::render::{march, RadianceModel, RenderOptions, View};
use hybrid_sds::scene::{hash_index, GridConfig, Linear, SceneConfig};
use hybrid_sds::Param;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Multilinear interpolation by explicit corner enumeration. `point` holds
/// `[x, y, z]` in `[-1, 1]` and, for dynamic grids, `t` in `[0, 1]`.
pub fn encode(config: &GridConfig, tables: &[Param], point: &[f64]) -> Vec<f64> {
    let dims = config.dims();
    let f = config.features_per_level;
    let mut out = vec![0.0; config.output_width()];
    for level in 0..config.levels {
        let mut cell = vec![0u32; dims];
        let mut frac = vec![0.0; dims];
        for d in 0..dims {
            let (scaled, res) = if d < 3 {
                let n = config.resolution(level) as f64;
                ((point[d].clamp(-1.0, 1.0) + 1.0) / 2.0 * n, n)
            } else {
                let n = config.time_resolution(level).expect("dynamic grid") as f64;
                (point[3] * n, n)
            };
            let c = scaled.floor().clamp(0.0, res - 1.0);
            cell[d] = c as u32;
            frac[d] = (scaled - c).clamp(0.0, 1.0);
        }
        let table = tables[level].value.data();
        for corner in 0..1usize << dims {
            let mut w = 1.0;
            let mut coords = cell.clone();
            for d in 0..dims {
                if corner >> d & 1 == 1 {
                    coords[d] += 1;
                    w *= frac[d];
                } else {
                    w *= 1.0 - frac[d];
                }
            }
            let slot = hash_index(&coords, level, config).unwrap();
            for k in 0..f {
                out[level * f + k] += w * f64::from(table[slot * f + k]);
            }
        }
    }
    out
}

fn affine(layer: &Linear, x: &[f64]) -> Vec<f64> {
    let w = layer.weight.value.data();
    let n = layer.bias.value.numel();
    let mut y: Vec<f64> = layer.bias.value.data().iter().map(|&b| f64::from(b)).collect();
    for (i, &xi) in x.iter().enumerate() {
        for o in 0..n {
            y[o] += xi * f64::from(w[i * n + o]);
        }
    }
    y
}

/// Density and color at `(mu, t)`.
pub fn field(model: &RadianceModel, mu: [f32; 3], t: f32) -> (f64, [f64; 3]) {
    let scene = &model.scene;
    let p = [f64::from(mu[0]), f64::from(mu[1]), f64::from(mu[2]), f64::from(t)];
    let fs = encode(scene.static_grid.config(), scene.static_grid.tables(), &p[..3]);
    let fd = encode(scene.dynamic_grid.config(), scene.dynamic_grid.tables(), &p);
    let mut h: Vec<f64> = fs.iter().zip(&fd).map(|(a, b)| a + b).collect();
    for layer in &scene.decoders.trunk {
        h = affine(layer, &h).into_iter().map(softplus).collect();
    }
    let r2: f64 = p[..3].iter().map(|v| v * v).sum();
    let width = f64::from(scene.blob.width);
    let blob = f64::from(scene.blob.amplitude) * (-r2 / (2.0 * width * width)).exp();
    let density = softplus(affine(&scene.decoders.density_head, &h)[0]) + blob;
    let c = affine(&scene.decoders.color_head, &h);
    (density, [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])])
}

pub fn background(model: &RadianceModel, direction: [f32; 3]) -> [f64; 3] {
    let d: Vec<f64> = direction.iter().map(|&v| f64::from(v)).collect();
    let h: Vec<f64> = affine(&model.background.hidden, &d).into_iter().map(softplus).collect();
    let o = affine(&model.background.output, &h);
    [sigmoid(o[0]), sigmoid(o[1]), sigmoid(o[2])]
}

/// Front-to-back compositing written as the plain sum
/// `Σ T_i (1 - exp(-τ_i δ_i)) c_i + T_N c_bg`.
pub fn composite(density: &[f64], color: &[[f64; 3]], deltas: &[f64], bg: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..density.len() {
        let before: f64 = (0..i).map(|j| density[j] * deltas[j]).sum();
        let w = (-before).exp() * (1.0 - (-density[i] * deltas[i]).exp());
        for c in 0..3 {
            out[c] += w * color[i][c];
        }
    }
    let total: f64 = density.iter().zip(deltas).map(|(t, d)| t * d).sum();
    for c in 0..3 {
        out[c] += (-total).exp() * bg[c];
    }
    out
}

/// Rendered colors `[rays][3]` of unjittered `views`.
pub fn render(model: &RadianceModel, views: &[View], opts: &RenderOptions) -> Vec<[f64; 3]> {
    assert!(!opts.stratified, "oracle renders midpoint samples only");
    let plan = march(views, opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    (0..plan.directions.len())
        .map(|r| {
            let (s, e) = (plan.offsets[r], plan.offsets[r + 1]);
            let (density, color): (Vec<f64>, Vec<[f64; 3]>) =
                (s..e).map(|i| field(model, plan.positions[i], plan.times[i])).unzip();
            let deltas: Vec<f64> = plan.deltas[s..e].iter().map(|&d| f64::from(d)).collect();
            composite(&density, &color, &deltas, background(model, plan.directions[r]))
        })
        .collect()
}

/// Desk run shrunk to a few dozen cheap iterations over all three stages.
pub fn small_run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::defaults(Profile::Desk);
    cfg.seed = seed;
    cfg.prompt = "a small test".into();
    let grid = GridConfig {
        levels: 4,
        features_per_level: 2,
        base_resolution: 4,
        per_level_scale: 2.0,
        table_size: 1 << 10,
        time_base_resolution: None,
    };
    cfg.scene = SceneConfig {
        static_grid: grid.clone(),
        dynamic_grid: GridConfig {
            time_base_resolution: Some(2),
            ..grid
        },
        hidden_width: 16,
        hidden_layers: 1,
        ..SceneConfig::desk()
    };
    cfg.stages.iterations = [6, 6, 24];
    cfg.render = RenderOptions::stratified(12);
    cfg.resolutions.three_d = (8, 8);
    cfg.resolutions.image = (8, 8);
    cfg.resolutions.video = (8, 6);
    cfg.guidance.native.three_d = (8, 8);
    cfg.guidance.native.image = (12, 12);
    cfg.guidance.native.video = (12, 8);
    cfg.video_frames = 4;
    cfg.guidance.video = "builtin:moving".into();
    cfg
}
