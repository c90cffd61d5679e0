//! CLIP-style text/image agreement score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps prompts and `[H, W, 3]` images into a shared embedding space.
pub trait Embedder {
    fn embed_text(&mut self, text: &str) -> Result<Vec<f32>>;
    fn embed_image(&mut self, image: &Tensor) -> Result<Vec<f32>>;
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("cosine", format!("{} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    let na: f64 = a.iter().map(|&x| f64::from(x).powi(2)).sum();
    let nb: f64 = b.iter().map(|&x| f64::from(x).powi(2)).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::range("cosine", "zero-length embedding"));
    }
    // sqrt(n * n) == n exactly, so identical inputs give exactly 1.
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// `100 · max(0, cos)` for one frame.
pub fn frame_score(text: &[f32], image: &[f32]) -> Result<f64> {
    Ok(100.0 * cosine(text, image)?.max(0.0))
}

/// Mean per-frame score from precomputed embeddings.
pub fn score_embeddings(text: &[f32], frames: &[Vec<f32>]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::range("clip_score", "no frames"));
    }
    let mut total = 0.0;
    for f in frames {
        total += frame_score(text, f)?;
    }
    Ok(total / frames.len() as f64)
}

/// Scores `frames` against `prompt`, averaging over frames.
pub fn clip_score(frames: &[Tensor], prompt: &str, embedder: &mut dyn Embedder) -> Result<f64> {
    let text = embedder.embed_text(prompt)?;
    let images = frames
        .iter()
        .map(|f| embedder.embed_image(f))
        .collect::<Result<Vec<_>>>()?;
    score_embeddings(&text, &images)
}

/// Offline stand-in: texts hash to random unit vectors, images project
/// pooled colors through a fixed random matrix. Deterministic, but carries
/// no semantics.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    pub dim: usize,
    projection: Vec<f32>,
}

const POOL: usize = 4;

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0c11_9000);
        let projection = (0..dim * POOL * POOL * 3)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self { dim, projection }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(64)
    }
}

fn normalized(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

impl Embedder for HashEmbedder {
    fn embed_text(&mut self, text: &str) -> Result<Vec<f32>> {
        let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        Ok(normalized((0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()))
    }

    fn embed_image(&mut self, image: &Tensor) -> Result<Vec<f32>> {
        let &[h, w, 3] = image.shape() else {
            return Err(Error::shape("embed_image", format!("{:?}", image.shape())));
        };
        let mut pooled = [0f32; POOL * POOL * 3];
        let mut counts = [0f32; POOL * POOL];
        for y in 0..h {
            for x in 0..w {
                let cell = (y * POOL / h) * POOL + x * POOL / w;
                counts[cell] += 1.0;
                for c in 0..3 {
                    pooled[cell * 3 + c] += image.data()[(y * w + x) * 3 + c];
                }
            }
        }
        for (cell, &n) in counts.iter().enumerate() {
            for c in 0..3 {
                pooled[cell * 3 + c] = pooled[cell * 3 + c] / n.max(1.0) - 0.5;
            }
        }
        let k = pooled.len();
        let out = (0..self.dim)
            .map(|d| {
                self.projection[d * k..(d + 1) * k]
                    .iter()
                    .zip(&pooled)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        Ok(normalized(out))
    }
}
