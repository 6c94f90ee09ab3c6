//! Training configuration, seeded RNG streams, and the flat key=value config
//! file format used by the CLI.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::EncoderKind;
use crate::interest::GenVariant;
use crate::{Error, Result};

/// Independent RNG streams derived from one seed, so that e.g. batch sampling
/// and noise injection never share state.
#[derive(Debug, Clone, Copy)]
pub enum RngStream {
    Split = 1,
    Noise = 2,
    EmbedInit = 3,
    GenInit = 4,
    Batch = 5,
    VaeEps = 6,
    Subset = 7,
}

pub fn seeded_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Which trajectory layout the matcher maintains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryMode {
    /// One set of embeddings, updated on the interest-branch gradients; the
    /// interaction-branch gradients are evaluated at the same parameters.
    Single,
    /// Two embedding trajectories, each updated on its own branch.
    Dual,
}

/// Embeddings fed to the MLP/VAE generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenInput {
    /// Encoder output (propagated when the encoder is graph convolution).
    Propagated,
    /// Raw embedding tables.
    BaseTables,
}

/// Loss minimized by `normal_train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Wau,
    Bpr,
}

/// Full training configuration. Defaults follow the recommended settings:
/// batch size 128, learning rates 0.001, embedding size 64, two convolution
/// layers.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Uniformity weight.
    pub alpha: f64,
    /// Inner (embedding) learning rate for plain gradient descent.
    pub eta: f64,
    /// Outer (generator) Adam learning rate.
    pub outer_lr: f64,
    pub iter_in: usize,
    pub iter_out: usize,
    pub batch_size: usize,
    pub k_neg: usize,
    /// Embedding dimension.
    pub dim: usize,
    /// Graph-convolution layers (ignored by the lookup encoder).
    pub layers: usize,
    pub encoder: EncoderKind,
    pub generator: GenVariant,
    pub seed: u64,
    pub trajectory: TrajectoryMode,
    pub loss: LossKind,
    /// Generator factor dimension (MF variant). 0 means "use dim".
    pub gen_dim: usize,
    /// MLP hidden width. 0 means "use dim".
    pub gen_hidden: usize,
    /// VAE latent width. 0 means "use dim/2".
    pub gen_latent: usize,
    pub gen_input: GenInput,
    /// Optional KL regularizer weight on the VAE generator.
    pub beta_kl: f64,
    /// Evaluation cutoffs.
    pub eval_ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            eta: 0.001,
            outer_lr: 0.001,
            iter_in: 10,
            iter_out: 100,
            batch_size: 128,
            k_neg: 1,
            dim: 64,
            layers: 2,
            encoder: EncoderKind::Gmf,
            generator: GenVariant::Vae,
            seed: 0,
            trajectory: TrajectoryMode::Single,
            loss: LossKind::Wau,
            gen_dim: 0,
            gen_hidden: 0,
            gen_latent: 0,
            gen_input: GenInput::Propagated,
            beta_kl: 0.0,
            eval_ks: vec![10, 20],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iter_in < 1 || self.iter_out < 1 || self.batch_size < 1 || self.dim < 1 {
            return Err(Error::Config(
                "iter_in, iter_out, batch_size and dim must be >= 1".into(),
            ));
        }
        if self.eta <= 0.0 || self.outer_lr <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        if self.eval_ks.is_empty() {
            return Err(Error::Config("eval_ks must be nonempty".into()));
        }
        Ok(())
    }

    pub fn effective_gen_dim(&self) -> usize {
        if self.gen_dim == 0 { self.dim } else { self.gen_dim }
    }

    pub fn effective_hidden(&self) -> usize {
        if self.gen_hidden == 0 { self.dim } else { self.gen_hidden }
    }

    pub fn effective_latent(&self) -> usize {
        if self.gen_latent == 0 { (self.dim / 2).max(1) } else { self.gen_latent }
    }
}

/// Key/value pairs loaded from a config file plus anything the CLI layered on
/// top. Keys not consumed by `apply` are usage errors.
#[derive(Debug, Default, Clone)]
pub struct KeyValues {
    pairs: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: format!("expected key = value, got {trimmed:?}"),
            })?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(KeyValues { pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.pairs.push((key.to_string(), value));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        // Later entries override earlier ones.
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Apply every pair onto `cfg`, rejecting unknown keys.
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        // Collapse duplicates so later lines win.
        let mut merged: HashMap<&str, &str> = HashMap::new();
        for (k, v) in &self.pairs {
            merged.insert(k.as_str(), v.as_str());
        }
        for (key, value) in merged {
            apply_key(cfg, key, value)?;
        }
        cfg.validate()
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key:?}")))
}

fn apply_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "alpha" => cfg.alpha = parse_num(key, value)?,
        "eta" => cfg.eta = parse_num(key, value)?,
        "outer_lr" => cfg.outer_lr = parse_num(key, value)?,
        "iter_in" => cfg.iter_in = parse_num(key, value)?,
        "iter_out" => cfg.iter_out = parse_num(key, value)?,
        "batch_size" => cfg.batch_size = parse_num(key, value)?,
        "k_neg" => cfg.k_neg = parse_num(key, value)?,
        "dim" => cfg.dim = parse_num(key, value)?,
        "layers" => cfg.layers = parse_num(key, value)?,
        "seed" => cfg.seed = parse_num(key, value)?,
        "gen_dim" => cfg.gen_dim = parse_num(key, value)?,
        "gen_hidden" => cfg.gen_hidden = parse_num(key, value)?,
        "gen_latent" => cfg.gen_latent = parse_num(key, value)?,
        "beta_kl" => cfg.beta_kl = parse_num(key, value)?,
        "encoder" => {
            cfg.encoder = match value {
                "gmf" => EncoderKind::Gmf,
                "lightgcn" => EncoderKind::LightGcn,
                other => return Err(Error::Config(format!("unknown encoder {other:?}"))),
            }
        }
        "generator" => {
            cfg.generator = match value {
                "mf" => GenVariant::Mf,
                "mlp" => GenVariant::Mlp,
                "vae" => GenVariant::Vae,
                other => return Err(Error::Config(format!("unknown generator {other:?}"))),
            }
        }
        "trajectory" => {
            cfg.trajectory = match value {
                "single" => TrajectoryMode::Single,
                "dual" => TrajectoryMode::Dual,
                other => return Err(Error::Config(format!("unknown trajectory {other:?}"))),
            }
        }
        "loss" => {
            cfg.loss = match value {
                "wau" => LossKind::Wau,
                "bpr" => LossKind::Bpr,
                other => return Err(Error::Config(format!("unknown loss {other:?}"))),
            }
        }
        "gen_input" => {
            cfg.gen_input = match value {
                "propagated" => GenInput::Propagated,
                "base" => GenInput::BaseTables,
                other => return Err(Error::Config(format!("unknown gen_input {other:?}"))),
            }
        }
        "eval_ks" => {
            cfg.eval_ks = value
                .split(',')
                .map(|s| parse_num("eval_ks", s.trim()))
                .collect::<Result<Vec<usize>>>()?;
        }
        other => return Err(Error::Config(format!("unknown config key {other:?}"))),
    }
    Ok(())
}

/// Parse a comma-separated ratio triple like "0.7,0.1,0.2".
pub fn parse_ratio_triple(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| parse_num("ratios", p.trim()))
        .collect::<Result<Vec<f64>>>()?;
    if parts.len() != 3 {
        return Err(Error::Config(format!("expected 3 ratios, got {}", parts.len())));
    }
    Ok((parts[0], parts[1], parts[2]))
}

/// Parse a comma-separated float list.
pub fn parse_float_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|p| parse_num("list", p.trim())).collect()
}
