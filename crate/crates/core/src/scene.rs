//! Spatiotemporal radiance field: static and dynamic multi-resolution hash
//! grids whose features are summed and decoded into density and color.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, softplus_with_slope, Differentiable, Param, Primitive, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial hash multipliers for the x, y, z and t axes.
pub const HASH_PRIMES: [u32; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];

/// Hyperparameters of one multi-resolution hash grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub base_resolution: usize,
    pub per_level_scale: f64,
    pub table_size: usize,
    /// Cells along `t` at the coarsest level; `None` for a purely spatial grid.
    pub time_base_resolution: Option<usize>,
}

impl GridConfig {
    /// Sixteen levels from 16 to 2048 cells per axis, two features each.
    pub fn full_static() -> Self {
        Self {
            levels: 16,
            features_per_level: 2,
            base_resolution: 16,
            per_level_scale: growth_factor(16, 2048, 16),
            table_size: 1 << 19,
            time_base_resolution: None,
        }
    }

    pub fn full_dynamic() -> Self {
        Self {
            time_base_resolution: Some(8),
            ..Self::full_static()
        }
    }

    /// Reduced grid sized for 32×32 renders on a single CPU core.
    pub fn desk_static() -> Self {
        Self {
            levels: 8,
            features_per_level: 2,
            base_resolution: 8,
            per_level_scale: growth_factor(8, 128, 8),
            table_size: 1 << 14,
            time_base_resolution: None,
        }
    }

    pub fn desk_dynamic() -> Self {
        Self {
            time_base_resolution: Some(8),
            ..Self::desk_static()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("grid: {m}")));
        if self.levels == 0 {
            return bad("levels must be >= 1");
        }
        if self.features_per_level == 0 {
            return bad("features_per_level must be >= 1");
        }
        if self.base_resolution < 2 {
            return bad("base_resolution must be >= 2");
        }
        if !(self.per_level_scale > 1.0) {
            return bad("per_level_scale must be > 1");
        }
        if !self.table_size.is_power_of_two() {
            return bad("table_size must be a power of two");
        }
        if self.table_size > 1 << 31 {
            return bad("table_size too large");
        }
        if let Some(t) = self.time_base_resolution {
            if t == 0 {
                return bad("time_base_resolution must be >= 1");
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        if self.time_base_resolution.is_some() {
            4
        } else {
            3
        }
    }

    pub fn output_width(&self) -> usize {
        self.levels * self.features_per_level
    }

    fn scaled(&self, base: usize, level: usize) -> usize {
        (base as f64 * self.per_level_scale.powi(level as i32) + 1e-6).floor() as usize
    }

    /// Cells per spatial axis at `level`.
    pub fn resolution(&self, level: usize) -> usize {
        self.scaled(self.base_resolution, level)
    }

    /// Cells along time at `level` (dynamic grids only).
    pub fn time_resolution(&self, level: usize) -> Option<usize> {
        self.time_base_resolution.map(|b| self.scaled(b, level))
    }

    fn geometry(&self, level: usize) -> LevelGeometry {
        let n = self.resolution(level);
        let nt = self.time_resolution(level);
        let side = (n + 1) as u128;
        let count = side * side * side * nt.map_or(1, |t| (t + 1) as u128);
        LevelGeometry {
            res: n as f64,
            time_res: nt.unwrap_or(0) as f64,
            side: (n + 1) as u32,
            dense: count <= self.table_size as u128,
            mask: (self.table_size - 1) as u32,
        }
    }
}

/// Growth factor taking `base` to `finest` cells over `levels` levels.
pub fn growth_factor(base: usize, finest: usize, levels: usize) -> f64 {
    if levels <= 1 {
        return 2.0;
    }
    ((finest as f64 / base as f64).ln() / (levels - 1) as f64).exp()
}

#[derive(Clone, Copy, Debug)]
struct LevelGeometry {
    res: f64,
    time_res: f64,
    side: u32,
    dense: bool,
    mask: u32,
}

impl LevelGeometry {
    #[inline]
    fn slot(&self, c: &[u32]) -> u32 {
        if self.dense {
            let mut idx = 0u32;
            let mut stride = 1u32;
            for &v in c {
                idx += v * stride;
                stride = stride.wrapping_mul(self.side);
            }
            idx
        } else {
            let mut h = 0u32;
            for (v, p) in c.iter().zip(HASH_PRIMES) {
                h ^= v.wrapping_mul(p);
            }
            h & self.mask
        }
    }
}

/// Table slot of an integer lattice vertex at `level`.
///
/// Levels whose vertex count fits in the table use dense row-major indexing
/// (x fastest); finer levels hash with [`HASH_PRIMES`].
pub fn hash_index(coords: &[u32], level: usize, config: &GridConfig) -> Result<usize> {
    if level >= config.levels {
        return Err(Error::range(
            "level",
            format!("{level} >= {} levels", config.levels),
        ));
    }
    if coords.len() != config.dims() {
        return Err(Error::shape(
            "hash_index",
            format!("{} coordinates for a {}-D grid", coords.len(), config.dims()),
        ));
    }
    Ok(config.geometry(level).slot(coords) as usize)
}

/// Corner slots and interpolation weights of one point at one level.
#[inline(always)]
fn corners<const D: usize, const DENSE: bool>(geo: &LevelGeometry, point: &[f32; 4], slots: &mut [u32; 16], weights: &mut [f32; 16]) {
    // Per axis: the two candidate slot contributions and weights.
    let mut part = [[0u32; 2]; D];
    let mut wt = [[0f32; 2]; D];
    let mut stride = 1u32;
    for d in 0..D {
        // f64 keeps fine-level fractions accurate to well below f32 feature precision.
        let (scaled, res) = if d < 3 {
            ((f64::from(point[d]) + 1.0) * 0.5 * geo.res, geo.res)
        } else {
            (f64::from(point[3]) * geo.time_res, geo.time_res)
        };
        // Coordinates are non-negative here, so truncation is floor.
        let cell = (scaled as u32 as f64).min((res - 1.0).max(0.0));
        let base = cell as u32;
        let frac = (scaled - cell).clamp(0.0, 1.0);
        wt[d] = [(1.0 - frac) as f32, frac as f32];
        if DENSE {
            part[d] = [base.wrapping_mul(stride), (base + 1).wrapping_mul(stride)];
            stride = stride.wrapping_mul(geo.side);
        } else {
            let p = HASH_PRIMES[d];
            part[d] = [base.wrapping_mul(p), (base + 1).wrapping_mul(p)];
        }
    }
    // Corner k takes the upper neighbour along axis d when bit d of k is set;
    // the table doubles one axis at a time.
    slots[0] = part[0][0];
    slots[1] = part[0][1];
    weights[0] = wt[0][0];
    weights[1] = wt[0][1];
    for d in 1..D {
        let half = 1usize << d;
        for k in 0..half {
            let (s, w) = (slots[k], weights[k]);
            if DENSE {
                slots[k] = s.wrapping_add(part[d][0]);
                slots[k + half] = s.wrapping_add(part[d][1]);
            } else {
                slots[k] = s ^ part[d][0];
                slots[k + half] = s ^ part[d][1];
            }
            weights[k] = w * wt[d][0];
            weights[k + half] = w * wt[d][1];
        }
    }
    if !DENSE {
        for s in &mut slots[..1 << D] {
            *s &= geo.mask;
        }
    }
}

/// Tape primitive: interpolated multi-level hash-table lookup. The inputs are
/// the per-level tables; point coordinates are constants. Corner slots and
/// weights are recomputed in the backward pass rather than stored.
struct HashEncode {
    config: GridConfig,
    points: Vec<[f32; 4]>,
}

impl HashEncode {
    fn new(config: GridConfig, points: &[[f32; 4]]) -> Self {
        Self {
            config,
            points: points.to_vec(),
        }
    }

    /// Calls `f(level, point, slots, weights)` for every level and point.
    fn visit(&self, mut f: impl FnMut(usize, usize, &[u32], &[f32])) {
        match self.config.dims() {
            3 => self.visit_dims::<3>(&mut f),
            _ => self.visit_dims::<4>(&mut f),
        }
    }

    fn visit_dims<const D: usize>(&self, f: &mut impl FnMut(usize, usize, &[u32], &[f32])) {
        let (mut s, mut w) = ([0u32; 16], [0f32; 16]);
        for level in 0..self.config.levels {
            let geo = self.config.geometry(level);
            for (p, point) in self.points.iter().enumerate() {
                if geo.dense {
                    corners::<D, true>(&geo, point, &mut s, &mut w);
                } else {
                    corners::<D, false>(&geo, point, &mut s, &mut w);
                }
                f(level, p, &s[..1 << D], &w[..1 << D]);
            }
        }
    }

    fn forward(&self, tables: &[&Tensor]) -> Tensor {
        let f = self.config.features_per_level;
        let width = self.config.output_width();
        let mut out = vec![0.0f32; self.points.len() * width];
        self.visit(|level, p, slots, weights| {
            let table = tables[level].data();
            let dst = &mut out[p * width + level * f..p * width + (level + 1) * f];
            if f == 2 {
                let (pairs, _) = table.as_chunks::<2>();
                let (mut a, mut b) = (0.0f32, 0.0f32);
                for (&slot, &w) in slots.iter().zip(weights) {
                    let [x, y] = pairs[slot as usize];
                    a += w * x;
                    b += w * y;
                }
                dst[0] = a;
                dst[1] = b;
                return;
            }
            for (&slot, &w) in slots.iter().zip(weights) {
                let row = &table[slot as usize * f..(slot as usize + 1) * f];
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        });
        Tensor::new(vec![self.points.len(), width], out).expect("encode shape")
    }
}

impl Primitive for HashEncode {
    fn name(&self) -> &'static str {
        "hash_encode"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &[f32],
        grad_inputs: &mut [Option<&mut [f32]>],
    ) {
        if grad_inputs.iter().all(Option::is_none) {
            return;
        }
        let f = self.config.features_per_level;
        let width = self.config.output_width();
        self.visit(|level, p, slots, weights| {
            let Some(grad) = grad_inputs[level].as_deref_mut() else { return };
            let g = &grad_output[p * width + level * f..p * width + (level + 1) * f];
            if f == 2 {
                let (pairs, _) = grad.as_chunks_mut::<2>();
                let (a, b) = (g[0], g[1]);
                for (&s, &w) in slots.iter().zip(weights) {
                    let row = &mut pairs[s as usize];
                    row[0] += w * a;
                    row[1] += w * b;
                }
                return;
            }
            for (&s, &w) in slots.iter().zip(weights) {
                let row = &mut grad[s as usize * f..(s as usize + 1) * f];
                for (d, &gv) in row.iter_mut().zip(g) {
                    *d += w * gv;
                }
            }
        });
    }
}

/// Shared storage of the static and dynamic grids.
#[derive(Clone, Debug)]
struct HashGrid {
    config: GridConfig,
    tables: Vec<Param>,
}

impl HashGrid {
    fn new(prefix: &str, config: GridConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let tables = (0..config.levels)
            .map(|level| {
                let n = config.table_size * config.features_per_level;
                let data = (0..n).map(|_| rng.random_range(-1e-4f32..1e-4)).collect();
                let t = Tensor::new(vec![config.table_size, config.features_per_level], data)
                    .expect("table shape");
                Param::new(format!("{prefix}.level{level:02}"), t)
            })
            .collect();
        Ok(Self { config, tables })
    }

    fn encode_on_tape<'a>(&'a self, tape: &mut Tape<'a>, points: Vec<[f32; 4]>) -> Result<Var> {
        let inputs: Vec<Var> = self.tables.iter().map(|p| tape.param(p)).collect();
        let prim = HashEncode::new(self.config.clone(), &points);
        let values: Vec<&Tensor> = self.tables.iter().map(|p| &p.value).collect();
        let out = prim.forward(&values);
        tape.custom(&inputs, out, Box::new(prim))
    }

    fn encode_point(&self, point: [f32; 4]) -> Vec<f32> {
        let prim = HashEncode::new(self.config.clone(), &[point]);
        let values: Vec<&Tensor> = self.tables.iter().map(|p| &p.value).collect();
        prim.forward(&values).into_data()
    }
}

fn clamp_point(mu: [f32; 3]) -> [f32; 3] {
    mu.map(|v| v.clamp(-1.0, 1.0))
}

fn check_time(t: f32) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::range("time", format!("{t} not in [0, 1]")))
    }
}

/// Spatial hash grid holding the time-invariant features.
#[derive(Clone, Debug)]
pub struct StaticHashGrid(HashGrid);

impl StaticHashGrid {
    pub fn new(config: GridConfig, seed: u64) -> Result<Self> {
        if config.time_base_resolution.is_some() {
            return Err(Error::Config("static grid must not have a time axis".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self(HashGrid::new("static", config, &mut rng)?))
    }

    pub fn config(&self) -> &GridConfig {
        &self.0.config
    }

    pub fn tables(&self) -> &[Param] {
        &self.0.tables
    }

    pub fn tables_mut(&mut self) -> &mut [Param] {
        &mut self.0.tables
    }

    /// Concatenated per-level trilinear features at `mu` (clamped to the
    /// unit cube).
    pub fn encode(&self, mu: [f32; 3]) -> Vec<f32> {
        let [x, y, z] = clamp_point(mu);
        self.0.encode_point([x, y, z, 0.0])
    }

    /// Batched encoding recorded on `tape`, shape `[points, levels·F]`.
    pub fn encode_on_tape<'a>(&'a self, tape: &mut Tape<'a>, points: &[[f32; 3]]) -> Result<Var> {
        let pts = points
            .iter()
            .map(|&p| {
                let [x, y, z] = clamp_point(p);
                [x, y, z, 0.0]
            })
            .collect();
        self.0.encode_on_tape(tape, pts)
    }
}

/// Space-time hash grid holding the motion features.
#[derive(Clone, Debug)]
pub struct DynamicHashGrid(HashGrid);

impl DynamicHashGrid {
    pub fn new(config: GridConfig, seed: u64) -> Result<Self> {
        if config.time_base_resolution.is_none() {
            return Err(Error::Config("dynamic grid needs a time axis".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self(HashGrid::new("dynamic", config, &mut rng)?))
    }

    pub fn config(&self) -> &GridConfig {
        &self.0.config
    }

    pub fn tables(&self) -> &[Param] {
        &self.0.tables
    }

    pub fn tables_mut(&mut self) -> &mut [Param] {
        &mut self.0.tables
    }

    /// Concatenated per-level quadrilinear features at `(mu, t)`.
    pub fn encode(&self, mu: [f32; 3], t: f32) -> Result<Vec<f32>> {
        check_time(t)?;
        let [x, y, z] = clamp_point(mu);
        Ok(self.0.encode_point([x, y, z, t]))
    }

    pub fn encode_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        points: &[[f32; 3]],
        times: &[f32],
    ) -> Result<Var> {
        if points.len() != times.len() {
            return Err(Error::shape("encode_dynamic", "points/times length mismatch"));
        }
        let mut pts = Vec::with_capacity(points.len());
        for (&p, &t) in points.iter().zip(times) {
            check_time(t)?;
            let [x, y, z] = clamp_point(p);
            pts.push([x, y, z, t]);
        }
        self.0.encode_on_tape(tape, pts)
    }
}

/// Fully connected layer parameters.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Normal init with variance `gain / fan_in`, zero bias.
    pub fn new(name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
        let data = (0..fan_in * fan_out)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::new(vec![fan_in, fan_out], data).expect("weight shape"),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Shared softplus trunk with separate density and color heads.
#[derive(Clone, Debug)]
pub struct DecoderMlps {
    pub trunk: Vec<Linear>,
    pub density_head: Linear,
    pub color_head: Linear,
}

/// Initial density-head bias; softplus(-4) ≈ 0.018 keeps empty space clear.
pub const DENSITY_BIAS_INIT: f32 = -4.0;

impl DecoderMlps {
    pub fn new(input: usize, hidden: usize, layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunk = Vec::with_capacity(layers);
        let mut fan_in = input;
        for i in 0..layers {
            trunk.push(Linear::new(&format!("mlp.trunk{i}"), fan_in, hidden, 2.0, &mut rng));
            fan_in = hidden;
        }
        let mut density_head = Linear::new("mlp.density", fan_in, 1, 1.0, &mut rng);
        density_head.bias.value.fill(DENSITY_BIAS_INIT);
        let color_head = Linear::new("mlp.color", fan_in, 3, 1.0, &mut rng);
        Self {
            trunk,
            density_head,
            color_head,
        }
    }

    /// Density `softplus(raw) + blob` and sigmoid color as one fused
    /// primitive, packed `[P, 4]`.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, features: Var, blob: &[f32]) -> Result<Var> {
        let (points, width) = match tape.shape(features) {
            [p, w] => (*p, *w),
            s => return Err(Error::shape("decoder", format!("features {s:?}"))),
        };
        if blob.len() != points {
            return Err(Error::shape("decoder", format!("{} blob values for {points} points", blob.len())));
        }
        let fan_in = self.trunk.first().map_or(width, |l| l.weight.value.shape()[0]);
        if fan_in != width {
            return Err(Error::shape("decoder", format!("features of width {width}, expected {fan_in}")));
        }
        let mut inputs = vec![features];
        for layer in self.trunk.iter().chain([&self.density_head, &self.color_head]) {
            inputs.push(tape.param(&layer.weight));
            inputs.push(tape.param(&layer.bias));
        }
        let x = tape.value(features).data();
        let mut hidden: Vec<Vec<f32>> = Vec::with_capacity(self.trunk.len());
        let mut slopes: Vec<Vec<f32>> = Vec::with_capacity(self.trunk.len());
        let mut in_w = width;
        for (l, layer) in self.trunk.iter().enumerate() {
            let n = layer.bias.value.numel();
            let input = if l == 0 { x } else { &hidden[l - 1][..] };
            let mut z = bias_rows(layer.bias.value.data(), points);
            gemm_acc(points, in_w, n, rows(input, in_w), rows(layer.weight.value.data(), n), &mut z);
            let mut slope = Vec::with_capacity(z.len());
            for v in &mut z {
                let (h, s) = softplus_with_slope(*v);
                *v = h;
                slope.push(s);
            }
            hidden.push(z);
            slopes.push(slope);
            in_w = n;
        }
        let last = hidden.last().map_or(x, |h| &h[..]);
        let mut raw_density = bias_rows(self.density_head.bias.value.data(), points);
        gemm_acc(points, in_w, 1, rows(last, in_w), rows(self.density_head.weight.value.data(), 1), &mut raw_density);
        let mut color = bias_rows(self.color_head.bias.value.data(), points);
        gemm_acc(points, in_w, 3, rows(last, in_w), rows(self.color_head.weight.value.data(), 3), &mut color);
        let mut out = Vec::with_capacity(points * 4);
        for p in 0..points {
            out.push(softplus(raw_density[p]) + blob[p]);
            out.extend(color[3 * p..3 * p + 3].iter().map(|&c| sigmoid(c)));
        }
        let out = Tensor::new(vec![points, 4], out)?;
        tape.custom(&inputs, out, Box::new(DecoderOp {
            hidden,
            slopes,
            raw_density,
        }))
    }

    /// Raw (pre-activation) density `[P,1]` and color `[P,3]` built from
    /// elementary tape operations; matches [`DecoderMlps::forward`] before
    /// the output activations.
    pub fn forward_reference<'a>(&'a self, tape: &mut Tape<'a>, features: Var) -> Result<(Var, Var)> {
        let mut h = features;
        for layer in &self.trunk {
            let y = layer.forward(tape, h)?;
            h = tape.softplus(y)?;
        }
        let d = self.density_head.forward(tape, h)?;
        let c = self.color_head.forward(tape, h)?;
        Ok((d, c))
    }

    pub fn params(&self) -> Vec<&Param> {
        self.trunk
            .iter()
            .chain([&self.density_head, &self.color_head])
            .flat_map(Linear::params)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.trunk
            .iter_mut()
            .chain([&mut self.density_head, &mut self.color_head])
            .flat_map(Linear::params_mut)
            .collect()
    }
}

/// Fused decoder evaluation. Inputs: features `[P, F]`, then weight and
/// bias of every trunk layer, the density head and the color head. Output
/// `[P, 4]`: density `softplus(raw) + blob` and sigmoid color.
struct DecoderOp {
    /// Post-softplus activations of each trunk layer, `[P, H]` each.
    hidden: Vec<Vec<f32>>,
    /// Their derivatives with respect to the pre-activations.
    slopes: Vec<Vec<f32>>,
    raw_density: Vec<f32>,
}

/// Strided matrix view: data, row stride, column stride.
type Strided<'a> = (&'a [f32], usize, usize);

/// Row-major `[_, cols]` matrix.
fn rows(data: &[f32], cols: usize) -> Strided<'_> {
    (data, cols, 1)
}

/// Transpose of a row-major `[_, cols]` matrix.
fn transposed(data: &[f32], cols: usize) -> Strided<'_> {
    (data, 1, cols)
}

fn bias_rows(bias: &[f32], points: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(points * bias.len());
    for _ in 0..points {
        out.extend_from_slice(bias);
    }
    out
}

/// `c += a·b` for `a` `[m, k]`, `b` `[k, n]` and row-major `c` `[m, n]`.
fn gemm_acc(m: usize, k: usize, n: usize, a: Strided<'_>, b: Strided<'_>, c: &mut [f32]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let last = |(d, rs, cs): Strided<'_>, r: usize, q: usize| {
        assert!((r - 1) * rs + (q - 1) * cs < d.len(), "gemm operand out of bounds");
    };
    last(a, m, k);
    last(b, k, n);
    assert!(c.len() >= m * n, "gemm output out of bounds");
    // SAFETY: every index the kernel touches is bounded by the asserts above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Adds the column sums of row-major `m` `[_, dst.len()]` to `dst`.
fn add_column_sums(m: &[f32], dst: &mut [f32]) {
    let mut acc = vec![0.0f64; dst.len()];
    for row in m.chunks_exact(dst.len()) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    for (d, a) in dst.iter_mut().zip(acc) {
        *d += a as f32;
    }
}

impl Primitive for DecoderOp {
    fn name(&self) -> &'static str {
        "decoder"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f32],
        grad_inputs: &mut [Option<&mut [f32]>],
    ) {
        let layers = self.hidden.len();
        let features = inputs[0];
        let (points, width) = (features.shape()[0], features.shape()[1]);
        let widths: Vec<usize> = (0..layers).map(|l| inputs[2 + 2 * l].numel()).collect();
        let last_w = widths.last().copied().unwrap_or(width);
        let last = self.hidden.last().map_or(features.data(), |h| &h[..]);
        let wd = inputs[1 + 2 * layers].data();
        let wc = inputs[3 + 2 * layers].data();
        let out = output.data();

        let mut g_d = vec![0.0f32; points];
        let mut g_c = vec![0.0f32; points * 3];
        for p in 0..points {
            g_d[p] = grad_output[4 * p] * sigmoid(self.raw_density[p]);
            for k in 0..3 {
                let c = out[4 * p + 1 + k];
                g_c[3 * p + k] = grad_output[4 * p + 1 + k] * c * (1.0 - c);
            }
        }

        let (feature_grad, rest) = grad_inputs.split_first_mut().expect("inputs");
        let mut weight_grads: Vec<Option<&mut [f32]>> =
            rest.iter_mut().map(|g| g.as_deref_mut()).collect();
        if let Some(g) = weight_grads[2 * layers].as_deref_mut() {
            gemm_acc(last_w, points, 1, transposed(last, last_w), rows(&g_d, 1), g);
        }
        if let Some(g) = weight_grads[2 * layers + 1].as_deref_mut() {
            add_column_sums(&g_d, g);
        }
        if let Some(g) = weight_grads[2 * layers + 2].as_deref_mut() {
            gemm_acc(last_w, points, 3, transposed(last, last_w), rows(&g_c, 3), g);
        }
        if let Some(g) = weight_grads[2 * layers + 3].as_deref_mut() {
            add_column_sums(&g_c, g);
        }
        let below = |l: usize, wg: &[Option<&mut [f32]>]| wg[..2 * l].iter().any(Option::is_some);
        if feature_grad.is_none() && !below(layers, &weight_grads) {
            return;
        }

        let mut g_h = vec![0.0f32; points * last_w];
        gemm_acc(points, 1, last_w, rows(&g_d, 1), transposed(wd, 1), &mut g_h);
        gemm_acc(points, 3, last_w, rows(&g_c, 3), transposed(wc, 3), &mut g_h);
        for l in (0..layers).rev() {
            let n = widths[l];
            let (x, in_w) = if l == 0 {
                (features.data(), width)
            } else {
                (&self.hidden[l - 1][..], widths[l - 1])
            };
            for (g, &s) in g_h.iter_mut().zip(&self.slopes[l]) {
                *g *= s;
            }
            if let Some(g) = weight_grads[2 * l].as_deref_mut() {
                gemm_acc(in_w, points, n, transposed(x, in_w), rows(&g_h, n), g);
            }
            if let Some(g) = weight_grads[2 * l + 1].as_deref_mut() {
                add_column_sums(&g_h, g);
            }
            if feature_grad.is_none() && !below(l, &weight_grads) {
                return;
            }
            let mut g_in = vec![0.0f32; points * in_w];
            gemm_acc(points, n, in_w, rows(&g_h, n), transposed(inputs[1 + 2 * l].data(), n), &mut g_in);
            g_h = g_in;
        }
        if let Some(g) = feature_grad.as_deref_mut() {
            for (d, &v) in g.iter_mut().zip(&g_h) {
                *d += v;
            }
        }
    }
}

/// Additive Gaussian density prior centred at the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityBlob {
    pub amplitude: f32,
    pub width: f32,
}

impl Default for DensityBlob {
    fn default() -> Self {
        Self {
            amplitude: 10.0,
            width: 0.2,
        }
    }
}

impl DensityBlob {
    pub fn at(&self, mu: [f32; 3]) -> f32 {
        let r2 = mu.iter().map(|v| v * v).sum::<f32>();
        self.amplitude * (-r2 / (2.0 * self.width * self.width)).exp()
    }
}

/// Learnable parameter groups with independent freeze flags and step sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Static,
    Dynamic,
    Mlp,
    Background,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Static,
        ParamGroup::Dynamic,
        ParamGroup::Mlp,
        ParamGroup::Background,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Static => "static",
            ParamGroup::Dynamic => "dynamic",
            ParamGroup::Mlp => "mlp",
            ParamGroup::Background => "background",
        }
    }
}

/// Architecture of a [`SceneModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub static_grid: GridConfig,
    pub dynamic_grid: GridConfig,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub blob: DensityBlob,
}

impl SceneConfig {
    pub fn full() -> Self {
        Self {
            static_grid: GridConfig::full_static(),
            dynamic_grid: GridConfig::full_dynamic(),
            hidden_width: 64,
            hidden_layers: 2,
            blob: DensityBlob::default(),
        }
    }

    pub fn desk() -> Self {
        Self {
            static_grid: GridConfig::desk_static(),
            dynamic_grid: GridConfig::desk_dynamic(),
            hidden_width: 32,
            ..Self::full()
        }
    }
}

/// The radiance field `(μ, t) → (τ, c)`.
#[derive(Clone, Debug)]
pub struct SceneModel {
    pub static_grid: StaticHashGrid,
    pub dynamic_grid: DynamicHashGrid,
    pub decoders: DecoderMlps,
    pub blob: DensityBlob,
}

/// Density and color of a batch of points, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FieldSamples {
    /// `[P, 1]`, nonnegative.
    pub density: Var,
    /// `[P, 3]`, in `[0, 1]`.
    pub color: Var,
}

impl SceneModel {
    pub fn new(config: &SceneConfig, seed: u64) -> Result<Self> {
        if config.static_grid.output_width() != config.dynamic_grid.output_width() {
            return Err(Error::Config(
                "static and dynamic grids must produce equally wide features".into(),
            ));
        }
        if config.hidden_layers == 0 || config.hidden_width == 0 {
            return Err(Error::Config("decoder needs at least one hidden layer".into()));
        }
        Ok(Self {
            static_grid: StaticHashGrid::new(config.static_grid.clone(), seed ^ 0x5171_c000)?,
            dynamic_grid: DynamicHashGrid::new(config.dynamic_grid.clone(), seed ^ 0xd1a0_0000)?,
            decoders: DecoderMlps::new(
                config.static_grid.output_width(),
                config.hidden_width,
                config.hidden_layers,
                seed ^ 0x0e1b_0000,
            ),
            blob: config.blob,
        })
    }

    /// Evaluates the field at a batch of points.
    pub fn query_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        points: &[[f32; 3]],
        times: &[f32],
    ) -> Result<FieldSamples> {
        let fs = self.static_grid.encode_on_tape(tape, points)?;
        let fd = self.dynamic_grid.encode_on_tape(tape, points, times)?;
        let f = tape.add(fs, fd)?;
        let blob: Vec<f32> = points.iter().map(|&p| self.blob.at(p)).collect();
        let packed = self.decoders.forward(tape, f, &blob)?;
        let density = tape.columns(packed, 0, 1)?;
        let color = tape.columns(packed, 1, 3)?;
        Ok(FieldSamples { density, color })
    }

    /// Density and color at a single point.
    pub fn query(&self, mu: [f32; 3], t: f32) -> Result<(f32, [f32; 3])> {
        check_time(t)?;
        let mut tape = Tape::new();
        let s = self.query_on_tape(&mut tape, &[mu], &[t])?;
        let d = tape.value(s.density).data()[0];
        let c = tape.value(s.color).data();
        Ok((d, [c[0], c[1], c[2]]))
    }

    pub fn group_params(&self, group: ParamGroup) -> Vec<&Param> {
        match group {
            ParamGroup::Static => self.static_grid.tables().iter().collect(),
            ParamGroup::Dynamic => self.dynamic_grid.tables().iter().collect(),
            ParamGroup::Mlp => self.decoders.params(),
            ParamGroup::Background => Vec::new(),
        }
    }

    pub fn group_params_mut(&mut self, group: ParamGroup) -> Vec<&mut Param> {
        match group {
            ParamGroup::Static => self.static_grid.tables_mut().iter_mut().collect(),
            ParamGroup::Dynamic => self.dynamic_grid.tables_mut().iter_mut().collect(),
            ParamGroup::Mlp => self.decoders.params_mut(),
            ParamGroup::Background => Vec::new(),
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
}

impl Differentiable for SceneModel {
    fn params(&self) -> Vec<&Param> {
        [ParamGroup::Static, ParamGroup::Dynamic, ParamGroup::Mlp]
            .into_iter()
            .flat_map(|g| self.group_params(g))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let Self {
            static_grid,
            dynamic_grid,
            decoders,
            ..
        } = self;
        static_grid
            .tables_mut()
            .iter_mut()
            .chain(dynamic_grid.tables_mut().iter_mut())
            .chain(decoders.params_mut())
            .collect()
    }
}
