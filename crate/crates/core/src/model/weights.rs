// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model configuration, seeded initialisation and the `GATW` weight file.
//!
//! # File layout
//!
//! ```text
//! "GATW"                      4 bytes
//! version                     u32 LE (currently 1)
//! n_layers n_heads head_dim   u32 LE each
//! vocab max_seq               u32 LE each
//! init_seed                   u64 LE
//! norm_kind positional_kind   u8 each
//! tensors                     f64 LE, in `Weights::tensors()` order
//! ```
//!
//! Tensor sizes follow from the config block, so no per-tensor headers are
//! stored. Trailing bytes are an error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GuideError, Result};
use crate::math::Matrix;
use crate::tags::VOCAB_SIZE;

pub const WEIGHT_MAGIC: &[u8; 4] = b"GATW";
pub const WEIGHT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Pre-norm RMS normalisation with a learned gain.
    #[default]
    Rms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    /// Fixed sinusoidal encoding added to the token embedding.
    #[default]
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub init_seed: u64,
    pub norm_kind: NormKind,
    pub positional_kind: PositionalKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            vocab: VOCAB_SIZE,
            max_seq: 2048,
            init_seed: 0,
            norm_kind: NormKind::Rms,
            positional_kind: PositionalKind::Sinusoidal,
        }
    }
}

impl ModelConfig {
    /// Embedding width `head_dim · n_heads`.
    pub fn width(&self) -> usize {
        self.head_dim * self.n_heads
    }

    pub fn mlp_width(&self) -> usize {
        4 * self.width()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(GuideError::InvalidConfig(format!("{name} must be >= 1")));
            }
            if u32::try_from(v).is_err() {
                return Err(GuideError::InvalidConfig(format!("{name} too large")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_gain: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_gain: Vec<f64>,
    /// `[D × 4D]`
    pub w_in: Matrix,
    /// `[4D × D]`
    pub w_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    /// `[V × D]`
    pub token_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Vec<f64>,
    /// `[D × V]`
    pub unembed: Matrix,
}

/// Gaussian init with standard deviation `1/√D`, drawn in file order from a
/// ChaCha stream keyed by `init_seed`. Norm gains start at one.
pub fn init_model(config: &ModelConfig) -> Result<Weights> {
    config.validate()?;
    let d = config.width();
    let m = config.mlp_width();
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).map_err(|e| GuideError::InvalidConfig(e.to_string()))?;
    let mut gaussian = |rows: usize, cols: usize| {
        let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
        Matrix::from_vec(rows, cols, data).expect("finite gaussian samples")
    };

    let token_embedding = gaussian(config.vocab, d);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_gain: vec![1.0; d],
            wq: gaussian(d, d),
            wk: gaussian(d, d),
            wv: gaussian(d, d),
            wo: gaussian(d, d),
            mlp_gain: vec![1.0; d],
            w_in: gaussian(d, m),
            w_out: gaussian(m, d),
        })
        .collect();
    let final_gain = vec![1.0; d];
    let unembed = gaussian(d, config.vocab);

    Ok(Weights {
        config: config.clone(),
        token_embedding,
        layers,
        final_gain,
        unembed,
    })
}

impl Weights {
    /// Every parameter tensor in serialisation order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.token_embedding.as_slice()];
        for l in &self.layers {
            out.extend([
                l.attn_gain.as_slice(),
                l.wq.as_slice(),
                l.wk.as_slice(),
                l.wv.as_slice(),
                l.wo.as_slice(),
                l.mlp_gain.as_slice(),
                l.w_in.as_slice(),
                l.w_out.as_slice(),
            ]);
        }
        out.push(&self.final_gain);
        out.push(self.unembed.as_slice());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.token_embedding.as_mut_slice()];
        for l in &mut self.layers {
            out.push(&mut l.attn_gain);
            out.push(l.wq.as_mut_slice());
            out.push(l.wk.as_mut_slice());
            out.push(l.wv.as_mut_slice());
            out.push(l.wo.as_mut_slice());
            out.push(&mut l.mlp_gain);
            out.push(l.w_in.as_mut_slice());
            out.push(l.w_out.as_mut_slice());
        }
        out.push(&mut self.final_gain);
        out.push(self.unembed.as_mut_slice());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        w.write_all(WEIGHT_MAGIC)?;
        w.write_all(&WEIGHT_VERSION.to_le_bytes())?;
        for v in [c.n_layers, c.n_heads, c.head_dim, c.vocab, c.max_seq] {
            // validated to fit at construction
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&c.init_seed.to_le_bytes())?;
        w.write_all(&[norm_code(c.norm_kind), positional_code(c.positional_kind)])?;
        for t in self.tensors() {
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Weights> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != WEIGHT_MAGIC {
            return Err(GuideError::WeightFormat(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != WEIGHT_VERSION {
            return Err(GuideError::WeightFormat(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let mut seed = [0u8; 8];
        read_exact(&mut r, &mut seed)?;
        let mut kinds = [0u8; 2];
        read_exact(&mut r, &mut kinds)?;
        let config = ModelConfig {
            n_layers: dims[0],
            n_heads: dims[1],
            head_dim: dims[2],
            vocab: dims[3],
            max_seq: dims[4],
            init_seed: u64::from_le_bytes(seed),
            norm_kind: norm_from_code(kinds[0])?,
            positional_kind: positional_from_code(kinds[1])?,
        };
        config.validate().map_err(|e| GuideError::WeightFormat(e.to_string()))?;

        let mut weights = zeroed(&config);
        let mut buf = [0u8; 8];
        for t in weights.tensors_mut() {
            for v in t.iter_mut() {
                read_exact(&mut r, &mut buf)?;
                *v = f64::from_le_bytes(buf);
                if !v.is_finite() {
                    return Err(GuideError::WeightFormat("non-finite parameter".into()));
                }
            }
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(GuideError::WeightFormat("trailing bytes after tensors".into()));
        }
        Ok(weights)
    }
}

pub fn save_weights(weights: &Weights, path: impl AsRef<Path>) -> Result<()> {
    weights.write_to(BufWriter::new(File::create(path)?))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Weights> {
    Weights::read_from(BufReader::new(File::open(path)?))
}

/// Load and reject files whose config block differs from `expected`.
pub fn load_weights_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Weights> {
    let w = load_weights(path)?;
    if &w.config != expected {
        return Err(GuideError::ConfigMismatch);
    }
    Ok(w)
}

fn zeroed(config: &ModelConfig) -> Weights {
    let d = config.width();
    let m = config.mlp_width();
    Weights {
        config: config.clone(),
        token_embedding: Matrix::zeros(config.vocab, d),
        layers: (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_gain: vec![0.0; d],
                wq: Matrix::zeros(d, d),
                wk: Matrix::zeros(d, d),
                wv: Matrix::zeros(d, d),
                wo: Matrix::zeros(d, d),
                mlp_gain: vec![0.0; d],
                w_in: Matrix::zeros(d, m),
                w_out: Matrix::zeros(m, d),
            })
            .collect(),
        final_gain: vec![0.0; d],
        unembed: Matrix::zeros(d, config.vocab),
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => GuideError::WeightFormat("truncated file".into()),
        _ => GuideError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn norm_code(k: NormKind) -> u8 {
    match k {
        NormKind::Rms => 0,
    }
}

fn norm_from_code(c: u8) -> Result<NormKind> {
    match c {
        0 => Ok(NormKind::Rms),
        _ => Err(GuideError::WeightFormat(format!("unknown norm kind {c}"))),
    }
}

fn positional_code(k: PositionalKind) -> u8 {
    match k {
        PositionalKind::Sinusoidal => 0,
    }
}

fn positional_from_code(c: u8) -> Result<PositionalKind> {
    match c {
        0 => Ok(PositionalKind::Sinusoidal),
        _ => Err(GuideError::WeightFormat(format!("unknown positional kind {c}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            head_dim: 4,
            max_seq: 64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&small()).unwrap();
        let b = init_model(&small()).unwrap();
        assert_eq!(a, b);
        let c = init_model(&small().with_seed(1)).unwrap();
        assert_ne!(a.token_embedding, c.token_embedding);
        assert_ne!(a.layers[1].wq, c.layers[1].wq);
    }

    #[test]
    fn init_std_matches_scale() {
        // D = 256: the sample std of every Gaussian tensor should be near 1/16.
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 4,
            head_dim: 64,
            ..ModelConfig::default()
        };
        let w = init_model(&cfg).unwrap();
        let target = 1.0 / 16.0;
        let l = &w.layers[0];
        for t in [
            &w.token_embedding,
            &l.wq,
            &l.wk,
            &l.wv,
            &l.wo,
            &l.w_in,
            &l.w_out,
            &w.unembed,
        ] {
            let xs = t.as_slice();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!((std - target).abs() / target < 0.10, "std {std}");
        }
        assert!(l.attn_gain.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig {
            n_heads: 0,
            ..ModelConfig::default()
        };
        assert!(matches!(init_model(&cfg), Err(GuideError::InvalidConfig(_))));
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let w = init_model(&small()).unwrap();
        let mut bytes = Vec::new();
        w.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"GATW");
        assert_eq!(bytes.len(), 4 + 4 + 5 * 4 + 8 + 2 + 8 * w.parameter_count());
        let back = Weights::read_from(bytes.as_slice()).unwrap();
        assert_eq!(w, back);
        for (a, b) in w.tensors().iter().zip(back.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let w = init_model(&small()).unwrap();
        let mut bytes = Vec::new();
        w.write_to(&mut bytes).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            Weights::read_from(bad_magic.as_slice()),
            Err(GuideError::WeightFormat(_))
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            Weights::read_from(bad_version.as_slice()),
            Err(GuideError::WeightFormat(_))
        ));

        let truncated = &bytes[..bytes.len() - 3];
        match Weights::read_from(truncated) {
            Err(GuideError::WeightFormat(m)) => assert!(m.contains("truncated")),
            other => panic!("{other:?}"),
        }

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(Weights::read_from(trailing.as_slice()).is_err());
    }

    #[test]
    fn cross_config_load_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.gatw");
        let w = init_model(&small()).unwrap();
        save_weights(&w, &path).unwrap();
        assert_eq!(load_weights_expecting(&path, &small()).unwrap(), w);
        let other = ModelConfig { n_layers: 3, ..small() };
        assert!(matches!(
            load_weights_expecting(&path, &other),
            Err(GuideError::ConfigMismatch)
        ));
    }
}
