//! Binary checkpoints: `"4DFY"`, a u32 version, then one record per tensor
//! up to the end of the file (u32 name length, UTF-8 name, u32 rank, u32
//! dims, f32 values). Every integer and value is little-endian.
//!
//! Non-tensor state is stored in `meta.*` records whose values are raw bit
//! patterns, so restoring never rounds.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::autodiff::Differentiable;
use crate::error::{Error, Result};
use crate::guidance::AdapterModel;
use crate::io::config::{parse_config, RunConfig};
use crate::optim::{export_moments, import_moments, Adam};
use crate::render::RadianceModel;
use crate::scheduler::{TrainState, Trainer};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"4DFY";
pub const VERSION: u32 = 1;

const OPTIMIZER_PREFIX: &str = "adam";

/// Named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, Tensor)>) -> Self {
        Self {
            version: VERSION,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("version {version}, expected {VERSION}")));
        }
        let mut tensors = Vec::new();
        while r.at < bytes.len() {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Format(format!("{name}: implausible shape {shape:?}")))?;
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { version, tensors })
    }

    /// Captures everything needed to continue a run bit for bit.
    pub fn capture(trainer: &Trainer, adapter: &dyn AdapterModel, config: &RunConfig) -> Self {
        let mut tensors: Vec<(String, Tensor)> = trainer
            .model
            .params()
            .into_iter()
            .map(|p| (p.name().to_string(), p.value.clone()))
            .collect();
        tensors.extend(export_moments(&trainer.state.optimizer, OPTIMIZER_PREFIX));
        tensors.extend(adapter.state());
        let state = &trainer.state;
        tensors.push(("meta.iteration".into(), words(&u64_words(state.iteration))));
        tensors.push(("meta.rng.seed".into(), bytes_as_words(&state.rng.get_seed())));
        tensors.push(("meta.rng.stream".into(), words(&u64_words(state.rng.get_stream()))));
        let pos = state.rng.get_word_pos();
        let pos_words = [
            pos as u32,
            (pos >> 32) as u32,
            (pos >> 64) as u32,
            (pos >> 96) as u32,
        ];
        tensors.push(("meta.rng.word_pos".into(), words(&pos_words)));
        let text = config.to_text();
        tensors.push(("meta.config".into(), bytes_as_words(text.as_bytes())));
        tensors.push(("meta.config_len".into(), words(&[text.len() as u32])));
        tensors.push(("meta.config_hash".into(), bytes_as_words(&config.hash())));
        Self::new(tensors)
    }

    /// The run configuration stored in the checkpoint, checked against its
    /// hash.
    pub fn config(&self) -> Result<RunConfig> {
        let len = *self
            .meta_words("meta.config_len")?
            .first()
            .ok_or_else(|| Error::Format("empty config length".into()))? as usize;
        let bytes = word_bytes(&self.meta_words("meta.config")?);
        let text = bytes
            .get(..len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| Error::Format("stored config is not UTF-8".into()))?;
        let config = parse_config(text)?;
        let hash = word_bytes(&self.meta_words("meta.config_hash")?);
        if hash != config.hash() {
            return Err(Error::Format("config hash mismatch".into()));
        }
        Ok(config)
    }

    /// Rebuilds the trainer at the saved iteration.
    pub fn restore_trainer(&self, config: &RunConfig) -> Result<Trainer> {
        let mut rest = self.tensors.clone();
        let mut model = RadianceModel::new(&config.scene, config.seed)?;
        for p in model.params_mut() {
            let i = rest
                .iter()
                .position(|(n, _)| n == p.name())
                .ok_or_else(|| Error::Format(format!("missing tensor {}", p.name())))?;
            let (_, t) = rest.remove(i);
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!("{} has shape {:?}", p.name(), t.shape())));
            }
            p.value = t;
        }
        let optimizer = Adam {
            moments: import_moments(&mut rest, OPTIMIZER_PREFIX)?,
            ..Adam::default()
        };
        let iteration = join_u64(&self.meta_words("meta.iteration")?)?;
        let seed: [u8; 32] = word_bytes(&self.meta_words("meta.rng.seed")?)
            .try_into()
            .map_err(|_| Error::Format("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(join_u64(&self.meta_words("meta.rng.stream")?)?);
        let w = self.meta_words("meta.rng.word_pos")?;
        if w.len() != 4 {
            return Err(Error::Format("rng position must be 4 words".into()));
        }
        let pos = (0..4).fold(0u128, |acc, i| acc | (u128::from(w[i]) << (32 * i)));
        rng.set_word_pos(pos);
        let mut trainer = Trainer::new(model, config.train_config())?;
        trainer.state = TrainState {
            iteration,
            rng,
            optimizer,
        };
        Ok(trainer)
    }

    /// Restores adapter weights and moments.
    pub fn restore_adapter(&self, adapter: &mut dyn AdapterModel) -> Result<()> {
        let mut rest: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with("adapter."))
            .cloned()
            .collect();
        adapter.load_state(&mut rest)
    }

    fn meta_words(&self, name: &str) -> Result<Vec<u32>> {
        self.get(name)
            .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }
}

/// Writes through a temporary file and renames it into place.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other(format!("{} has no file name", path.display()))))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn words(w: &[u32]) -> Tensor {
    Tensor::vector(w.iter().map(|&v| f32::from_bits(v)).collect())
}

fn u64_words(v: u64) -> [u32; 2] {
    [v as u32, (v >> 32) as u32]
}

fn join_u64(w: &[u32]) -> Result<u64> {
    match w {
        [lo, hi] => Ok(u64::from(*lo) | u64::from(*hi) << 32),
        _ => Err(Error::Format("expected two words".into())),
    }
}

/// Packs bytes four to a word, zero padded.
fn bytes_as_words(b: &[u8]) -> Tensor {
    let w: Vec<u32> = b
        .chunks(4)
        .map(|c| {
            let mut x = [0u8; 4];
            x[..c.len()].copy_from_slice(c);
            u32::from_le_bytes(x)
        })
        .collect();
    words(&w)
}

fn word_bytes(w: &[u32]) -> Vec<u8> {
    w.iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let c = Checkpoint::new(vec![
            ("a".into(), Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap()),
            ("nan".into(), Tensor::vector(vec![f32::from_bits(0x7fc0_1234)])),
            ("s".into(), Tensor::scalar(3.0)),
        ]);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("nan").unwrap().data()[0].to_bits(), 0x7fc0_1234);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::new(vec![("a".into(), Tensor::vector(vec![1.0, 2.0]))]).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut old = bytes.clone();
        old[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&old), Err(Error::Format(m)) if m.contains("version")));
        for cut in [3, 10, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn packed_bytes() {
        let b = b"hello";
        assert_eq!(&word_bytes(&bytes_as_words(b).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())[..5], b);
    }
}
