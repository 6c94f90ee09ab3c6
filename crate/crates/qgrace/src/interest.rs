//! Generative interest-weight models: factorized tables (MF), a two-layer
//! MLP, and a VAE with a reparameterized Gaussian sampling layer. All three
//! map a user-item pair to a weight in (0, 1) through a logistic squash, and
//! carry exact analytic backward passes to their own parameters. The dense
//! M x N weight matrix is never materialized; weights are produced batch by
//! batch.
//!
//! Embedding inputs to the MLP/VAE variants are treated as constants: no
//! gradient flows from the generator into the encoder.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{seeded_rng, RngStream};
use crate::encoder::Embeddings;
use crate::math::{dot, sigmoid, Mat};
use crate::{Error, Result};

pub const LOGVAR_CLAMP: (f64, f64) = (-30.0, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenVariant {
    Mf,
    Mlp,
    Vae,
}

impl std::fmt::Display for GenVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GenVariant::Mf => write!(f, "mf"),
            GenVariant::Mlp => write!(f, "mlp"),
            GenVariant::Vae => write!(f, "vae"),
        }
    }
}

/// Size information shared by the generator variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenDims {
    /// Encoder embedding dimension d (MLP/VAE input is 2d).
    pub embed_dim: usize,
    pub num_users: usize,
    pub num_items: usize,
    /// MF factor dimension.
    pub factor_dim: usize,
    /// MLP hidden width.
    pub hidden: usize,
    /// VAE latent width m (encoder output is 2m: mean and log-variance).
    pub latent: usize,
}

/// Generator parameters stored as one flat vector with a fixed per-variant
/// layout, which keeps the optimizer, checkpoints, and finite-difference
/// tests uniform.
///
/// Layouts (row-major):
/// - MF:  user table (M x d_g), item table (N x d_g)
/// - MLP: W1 (2d x h), b1 (h), w2 (h), b2 (1)
/// - VAE: W_en (2d x 2m), b_en (2m), w_de (m), b_de (1)
#[derive(Debug, Clone)]
pub struct GenerativeParams {
    pub variant: GenVariant,
    pub dims: GenDims,
    flat: Vec<f64>,
    pub deterministic_mode: bool,
}

fn flat_len(variant: GenVariant, dims: &GenDims) -> usize {
    match variant {
        GenVariant::Mf => (dims.num_users + dims.num_items) * dims.factor_dim,
        GenVariant::Mlp => {
            let (d2, h) = (2 * dims.embed_dim, dims.hidden);
            d2 * h + h + h + 1
        }
        GenVariant::Vae => {
            let (d2, m) = (2 * dims.embed_dim, dims.latent);
            d2 * (2 * m) + 2 * m + m + 1
        }
    }
}

impl GenerativeParams {
    pub fn zeros(variant: GenVariant, dims: GenDims) -> Self {
        GenerativeParams {
            variant,
            dims,
            flat: vec![0.0; flat_len(variant, &dims)],
            deterministic_mode: false,
        }
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn num_params(&self) -> usize {
        self.flat.len()
    }

    fn mf_user(&self, u: u32) -> &[f64] {
        let dg = self.dims.factor_dim;
        &self.flat[u as usize * dg..(u as usize + 1) * dg]
    }

    fn mf_item(&self, i: u32) -> &[f64] {
        let dg = self.dims.factor_dim;
        let off = self.dims.num_users * dg;
        &self.flat[off + i as usize * dg..off + (i as usize + 1) * dg]
    }

    fn mlp_slices(&self) -> (&[f64], &[f64], &[f64], f64) {
        let (d2, h) = (2 * self.dims.embed_dim, self.dims.hidden);
        let w1 = &self.flat[..d2 * h];
        let b1 = &self.flat[d2 * h..d2 * h + h];
        let w2 = &self.flat[d2 * h + h..d2 * h + 2 * h];
        let b2 = self.flat[d2 * h + 2 * h];
        (w1, b1, w2, b2)
    }

    fn vae_slices(&self) -> (&[f64], &[f64], &[f64], f64) {
        let (d2, m) = (2 * self.dims.embed_dim, self.dims.latent);
        let w_en = &self.flat[..d2 * 2 * m];
        let b_en = &self.flat[d2 * 2 * m..d2 * 2 * m + 2 * m];
        let w_de = &self.flat[d2 * 2 * m + 2 * m..d2 * 2 * m + 3 * m];
        let b_de = self.flat[d2 * 2 * m + 3 * m];
        (w_en, b_en, w_de, b_de)
    }
}

/// Flat gradient aligned with [`GenerativeParams::flat`].
#[derive(Debug, Clone)]
pub struct GenGrad {
    pub flat: Vec<f64>,
}

impl GenGrad {
    pub fn zeros_like(params: &GenerativeParams) -> Self {
        GenGrad {
            flat: vec![0.0; params.num_params()],
        }
    }

    pub fn add_scaled(&mut self, other: &GenGrad, scale: f64) {
        assert_eq!(self.flat.len(), other.flat.len());
        for (a, b) in self.flat.iter_mut().zip(&other.flat) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }
}

/// Xavier-style uniform init for the weight blocks, zeros for biases.
pub fn init_gen(variant: GenVariant, dims: GenDims, seed: u64) -> GenerativeParams {
    let mut params = GenerativeParams::zeros(variant, dims);
    let mut rng = seeded_rng(seed, RngStream::GenInit);
    let mut fill = |slice: &mut [f64], fan_in: usize, fan_out: usize| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in slice {
            *v = rng.gen_range(-bound..=bound);
        }
    };
    match variant {
        GenVariant::Mf => {
            let dg = dims.factor_dim;
            let split = dims.num_users * dg;
            let (user, item) = params.flat.split_at_mut(split);
            fill(user, dims.num_users, dg);
            fill(item, dims.num_items, dg);
        }
        GenVariant::Mlp => {
            let (d2, h) = (2 * dims.embed_dim, dims.hidden);
            let (w1, rest) = params.flat.split_at_mut(d2 * h);
            fill(w1, d2, h);
            // rest = b1 (zeros), w2, b2
            let (_b1, rest) = rest.split_at_mut(h);
            let (w2, _b2) = rest.split_at_mut(h);
            fill(w2, h, 1);
        }
        GenVariant::Vae => {
            let (d2, m) = (2 * dims.embed_dim, dims.latent);
            let (w_en, rest) = params.flat.split_at_mut(d2 * 2 * m);
            fill(w_en, d2, 2 * m);
            let (b_en, rest) = rest.split_at_mut(2 * m);
            // Log-variance biases start at -4 so initial samples stay close
            // to the mean; the encoder learns the spread from there.
            for v in &mut b_en[m..] {
                *v = -4.0;
            }
            let (w_de, _b_de) = rest.split_at_mut(m);
            fill(w_de, m, 1);
        }
    }
    params
}

/// Per-pair state retained by the VAE forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct VaeRetained {
    /// pairs x m
    pub mu: Mat,
    /// Pre-clamp log-variance, pairs x m.
    pub logvar_raw: Mat,
    /// Sampled noise, pairs x m (zero in deterministic mode).
    pub eps: Mat,
}

/// Generated weights aligned with a pair list, plus retained VAE state.
#[derive(Debug, Clone)]
pub struct InterestWeights {
    pub values: Vec<f64>,
    pub vae: Option<VaeRetained>,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

enum EpsSource<'a> {
    Zero,
    Sample(&'a mut ChaCha8Rng),
    #[cfg(test)]
    Fixed(&'a Mat),
}

fn concat_pair(buf: &mut [f64], z: &Embeddings<'_>, u: u32, i: u32) {
    let d = z.dim();
    buf[..d].copy_from_slice(z.user_row(u));
    buf[d..].copy_from_slice(z.item_row(i));
}

fn forward_impl(
    params: &GenerativeParams,
    pairs: &[(u32, u32)],
    z: &Embeddings<'_>,
    mut eps_source: EpsSource<'_>,
) -> Result<InterestWeights> {
    let mut values = Vec::with_capacity(pairs.len());
    let mut vae = None;
    match params.variant {
        GenVariant::Mf => {
            for &(u, i) in pairs {
                values.push(sigmoid(dot(params.mf_user(u), params.mf_item(i))));
            }
        }
        GenVariant::Mlp => {
            let (w1, b1, w2, b2) = params.mlp_slices();
            let d2 = 2 * params.dims.embed_dim;
            let h = params.dims.hidden;
            let mut x = vec![0.0; d2];
            for &(u, i) in pairs {
                concat_pair(&mut x, z, u, i);
                let mut s = b2;
                for j in 0..h {
                    let mut a = b1[j];
                    for (k, &xk) in x.iter().enumerate() {
                        a += w1[k * h + j] * xk;
                    }
                    if a > 0.0 {
                        s += w2[j] * a;
                    }
                }
                values.push(sigmoid(s));
            }
        }
        GenVariant::Vae => {
            let (w_en, b_en, w_de, b_de) = params.vae_slices();
            let d2 = 2 * params.dims.embed_dim;
            let m = params.dims.latent;
            let mut x = vec![0.0; d2];
            let mut mu = Mat::zeros(pairs.len(), m);
            let mut logvar_raw = Mat::zeros(pairs.len(), m);
            let mut eps = Mat::zeros(pairs.len(), m);
            for (p, &(u, i)) in pairs.iter().enumerate() {
                concat_pair(&mut x, z, u, i);
                let mut s = b_de;
                for j in 0..m {
                    // Encoder output: mean at column j, log-variance at m+j.
                    let mut mu_j = b_en[j];
                    let mut lv_j = b_en[m + j];
                    for (k, &xk) in x.iter().enumerate() {
                        mu_j += w_en[k * 2 * m + j] * xk;
                        lv_j += w_en[k * 2 * m + m + j] * xk;
                    }
                    let e = if params.deterministic_mode {
                        0.0
                    } else {
                        match &mut eps_source {
                            EpsSource::Zero => 0.0,
                            EpsSource::Sample(rng) => standard_normal(rng),
                            #[cfg(test)]
                            EpsSource::Fixed(mat) => mat.get(p, j),
                        }
                    };
                    let lv = lv_j.clamp(LOGVAR_CLAMP.0, LOGVAR_CLAMP.1);
                    let zj = mu_j + (lv / 2.0).exp() * e;
                    s += w_de[j] * zj;
                    mu.set(p, j, mu_j);
                    logvar_raw.set(p, j, lv_j);
                    eps.set(p, j, e);
                }
                values.push(sigmoid(s));
            }
            vae = Some(VaeRetained {
                mu,
                logvar_raw,
                eps,
            });
        }
    }
    for (p, v) in values.iter().enumerate() {
        if !v.is_finite() {
            let (u, i) = pairs[p];
            return Err(Error::NonFinite {
                context: format!("generated weight for pair ({u}, {i})"),
            });
        }
    }
    Ok(InterestWeights { values, vae })
}

/// Evaluate the generator on a pair list. `rng` drives the VAE noise; it is
/// ignored in deterministic mode and by the MF/MLP variants. Passing `None`
/// with a sampling VAE is an error.
pub fn gen_forward(
    params: &GenerativeParams,
    pairs: &[(u32, u32)],
    z: &Embeddings<'_>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<InterestWeights> {
    let source = if params.variant == GenVariant::Vae && !params.deterministic_mode {
        match rng {
            Some(r) => EpsSource::Sample(r),
            None => {
                return Err(Error::Config(
                    "sampling VAE forward requires an RNG; enable deterministic_mode otherwise"
                        .into(),
                ))
            }
        }
    } else {
        EpsSource::Zero
    };
    forward_impl(params, pairs, z, source)
}

#[cfg(test)]
pub(crate) fn gen_forward_fixed_eps(
    params: &GenerativeParams,
    pairs: &[(u32, u32)],
    z: &Embeddings<'_>,
    eps: &Mat,
) -> Result<InterestWeights> {
    forward_impl(params, pairs, z, EpsSource::Fixed(eps))
}

/// Exact gradient of sum over pairs of upstream * R with respect to the
/// generator parameters, chaining through the squash (and the retained noise
/// path for the VAE).
pub fn gen_backward(
    params: &GenerativeParams,
    pairs: &[(u32, u32)],
    z: &Embeddings<'_>,
    upstream: &[f64],
    weights: &InterestWeights,
) -> Result<GenGrad> {
    assert_eq!(upstream.len(), pairs.len());
    assert_eq!(weights.values.len(), pairs.len());
    let mut grad = GenGrad::zeros_like(params);
    match params.variant {
        GenVariant::Mf => {
            let dg = params.dims.factor_dim;
            let item_off = params.dims.num_users * dg;
            for (p, &(u, i)) in pairs.iter().enumerate() {
                let r = weights.values[p];
                let ds = upstream[p] * r * (1.0 - r);
                if ds == 0.0 {
                    continue;
                }
                let gu = params.mf_user(u);
                let gi = params.mf_item(i);
                for k in 0..dg {
                    grad.flat[u as usize * dg + k] += ds * gi[k];
                    grad.flat[item_off + i as usize * dg + k] += ds * gu[k];
                }
            }
        }
        GenVariant::Mlp => {
            let (w1, b1, w2, _b2) = params.mlp_slices();
            let d2 = 2 * params.dims.embed_dim;
            let h = params.dims.hidden;
            let w1_len = d2 * h;
            let mut x = vec![0.0; d2];
            for (p, &(u, i)) in pairs.iter().enumerate() {
                let r = weights.values[p];
                let ds = upstream[p] * r * (1.0 - r);
                if ds == 0.0 {
                    continue;
                }
                concat_pair(&mut x, z, u, i);
                for j in 0..h {
                    // Recompute the pre-activation for the rectifier mask.
                    let mut a = b1[j];
                    for (k, &xk) in x.iter().enumerate() {
                        a += w1[k * h + j] * xk;
                    }
                    if a > 0.0 {
                        // s += w2[j] * a
                        grad.flat[w1_len + h + j] += ds * a; // w2
                        let da = ds * w2[j];
                        grad.flat[w1_len + j] += da; // b1
                        for (k, &xk) in x.iter().enumerate() {
                            grad.flat[k * h + j] += da * xk; // w1
                        }
                    }
                }
                grad.flat[w1_len + 2 * h] += ds; // b2
            }
        }
        GenVariant::Vae => {
            let retained = weights.vae.as_ref().ok_or(Error::MissingVaeState)?;
            let (_w_en, _b_en, w_de, _b_de) = params.vae_slices();
            let d2 = 2 * params.dims.embed_dim;
            let m = params.dims.latent;
            let w_en_len = d2 * 2 * m;
            let mut x = vec![0.0; d2];
            for (p, &(u, i)) in pairs.iter().enumerate() {
                let r = weights.values[p];
                let ds = upstream[p] * r * (1.0 - r);
                if ds == 0.0 {
                    continue;
                }
                concat_pair(&mut x, z, u, i);
                for j in 0..m {
                    let mu_j = retained.mu.get(p, j);
                    let lv_raw = retained.logvar_raw.get(p, j);
                    let e = retained.eps.get(p, j);
                    let lv = lv_raw.clamp(LOGVAR_CLAMP.0, LOGVAR_CLAMP.1);
                    let std = (lv / 2.0).exp();
                    let zj = mu_j + std * e;
                    // s += w_de[j] * zj
                    grad.flat[w_en_len + 2 * m + j] += ds * zj; // w_de
                    let dz = ds * w_de[j];
                    // zj = mu + exp(lv/2) eps
                    let dmu = dz;
                    let dlv = if lv_raw > LOGVAR_CLAMP.0 && lv_raw < LOGVAR_CLAMP.1 {
                        dz * e * std * 0.5
                    } else {
                        0.0
                    };
                    grad.flat[w_en_len + j] += dmu; // b_en mean half
                    grad.flat[w_en_len + m + j] += dlv; // b_en logvar half
                    for (k, &xk) in x.iter().enumerate() {
                        grad.flat[k * 2 * m + j] += dmu * xk;
                        grad.flat[k * 2 * m + m + j] += dlv * xk;
                    }
                }
                grad.flat[w_en_len + 3 * m] += ds; // b_de
            }
        }
    }
    Ok(grad)
}

/// Mean KL divergence of the VAE posterior from the standard normal over the
/// pair list, and its gradient. Used by the optional `beta_kl` regularizer.
pub fn vae_kl(
    params: &GenerativeParams,
    pairs: &[(u32, u32)],
    z: &Embeddings<'_>,
    weights: &InterestWeights,
) -> Result<(f64, GenGrad)> {
    if params.variant != GenVariant::Vae {
        return Ok((0.0, GenGrad::zeros_like(params)));
    }
    let retained = weights.vae.as_ref().ok_or(Error::MissingVaeState)?;
    let d2 = 2 * params.dims.embed_dim;
    let m = params.dims.latent;
    let w_en_len = d2 * 2 * m;
    let scale = 1.0 / pairs.len() as f64;
    let mut grad = GenGrad::zeros_like(params);
    let mut value = 0.0;
    let mut x = vec![0.0; d2];
    for (p, &(u, i)) in pairs.iter().enumerate() {
        concat_pair(&mut x, z, u, i);
        for j in 0..m {
            let mu_j = retained.mu.get(p, j);
            let lv_raw = retained.logvar_raw.get(p, j);
            let lv = lv_raw.clamp(LOGVAR_CLAMP.0, LOGVAR_CLAMP.1);
            value += 0.5 * (mu_j * mu_j + lv.exp() - lv - 1.0) * scale;
            let dmu = mu_j * scale;
            let dlv = if lv_raw > LOGVAR_CLAMP.0 && lv_raw < LOGVAR_CLAMP.1 {
                0.5 * (lv.exp() - 1.0) * scale
            } else {
                0.0
            };
            grad.flat[w_en_len + j] += dmu;
            grad.flat[w_en_len + m + j] += dlv;
            for (k, &xk) in x.iter().enumerate() {
                grad.flat[k * 2 * m + j] += dmu * xk;
                grad.flat[k * 2 * m + m + j] += dlv * xk;
            }
        }
    }
    Ok((value, grad))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const GEN_MAGIC: &[u8; 4] = b"QGG1";

pub fn write_gen_checkpoint(path: &Path, params: &GenerativeParams) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    w.write_all(GEN_MAGIC)?;
    w.write_all(&[match params.variant {
        GenVariant::Mf => 0u8,
        GenVariant::Mlp => 1u8,
        GenVariant::Vae => 2u8,
    }])?;
    for v in [
        params.dims.embed_dim as u64,
        params.dims.num_users as u64,
        params.dims.num_items as u64,
        params.dims.factor_dim as u64,
        params.dims.hidden as u64,
        params.dims.latent as u64,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in params.flat() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_gen_checkpoint(path: &Path) -> Result<GenerativeParams> {
    let mut r = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GEN_MAGIC {
        return Err(Error::BadFormat(format!(
            "{} is not a generator checkpoint",
            path.display()
        )));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let variant = match tag[0] {
        0 => GenVariant::Mf,
        1 => GenVariant::Mlp,
        2 => GenVariant::Vae,
        k => return Err(Error::BadFormat(format!("unknown generator tag {k}"))),
    };
    let mut read_u64 = || -> Result<u64> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    };
    let dims = GenDims {
        embed_dim: read_u64()? as usize,
        num_users: read_u64()? as usize,
        num_items: read_u64()? as usize,
        factor_dim: read_u64()? as usize,
        hidden: read_u64()? as usize,
        latent: read_u64()? as usize,
    };
    let mut params = GenerativeParams::zeros(variant, dims);
    let mut buf = [0u8; 8];
    for v in params.flat_mut() {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EmbeddingState, EncoderKind};

    fn dims(d: usize, m_users: usize, n_items: usize, dg: usize, h: usize, lat: usize) -> GenDims {
        GenDims {
            embed_dim: d,
            num_users: m_users,
            num_items: n_items,
            factor_dim: dg,
            hidden: h,
            latent: lat,
        }
    }

    fn random_state(seed: u64, m: usize, n: usize, d: usize) -> EmbeddingState {
        crate::encoder::init_embeddings(m, n, d, EncoderKind::Gmf, 0, seed)
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let dm = dims(64, 100, 80, 64, 64, 32);
        let a = init_gen(GenVariant::Mf, dm, 5);
        let b = init_gen(GenVariant::Mf, dm, 5);
        assert_eq!(a.flat(), b.flat());
        assert_eq!(a.num_params(), (100 + 80) * 64);

        let v = init_gen(GenVariant::Vae, dm, 5);
        // W_en is 2d x 2m = 128 x 64.
        assert_eq!(v.num_params(), 128 * 64 + 64 + 32 + 1);
        assert!(!v.deterministic_mode);
    }

    #[test]
    fn zero_parameters_give_half_weights() {
        let state = random_state(3, 4, 5, 4);
        let z = Embeddings::Tables(&state);
        let pairs = vec![(0, 0), (1, 2), (3, 4)];

        let mf = GenerativeParams::zeros(GenVariant::Mf, dims(4, 4, 5, 3, 4, 2));
        let w = gen_forward(&mf, &pairs, &z, None).unwrap();
        assert!(w.values.iter().all(|&v| v == 0.5));

        // MLP with zero output layer: R = sigmoid(0) regardless of W1.
        let mut mlp = init_gen(GenVariant::Mlp, dims(4, 4, 5, 3, 4, 2), 9);
        let (d2, h) = (8, 4);
        for v in &mut mlp.flat_mut()[d2 * h + h..] {
            *v = 0.0;
        }
        let w = gen_forward(&mlp, &pairs, &z, None).unwrap();
        assert!(w.values.iter().all(|&v| v == 0.5));

        // VAE deterministic with zero decoder.
        let mut vae = init_gen(GenVariant::Vae, dims(4, 4, 5, 3, 4, 2), 11);
        vae.deterministic_mode = true;
        let (d2, m) = (8, 2);
        for v in &mut vae.flat_mut()[d2 * 2 * m + 2 * m..] {
            *v = 0.0;
        }
        let w = gen_forward(&vae, &pairs, &z, None).unwrap();
        assert!(w.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mf_unit_dot_is_sigmoid_one() {
        let mut mf = GenerativeParams::zeros(GenVariant::Mf, dims(2, 1, 1, 2, 2, 1));
        mf.flat_mut()[0] = 1.0; // user row (1, 0)
        mf.flat_mut()[2] = 1.0; // item row (1, 0)
        let state = random_state(1, 1, 1, 2);
        let z = Embeddings::Tables(&state);
        let w = gen_forward(&mf, &[(0, 0)], &z, None).unwrap();
        assert!((w.values[0] - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn weights_are_strictly_inside_unit_interval() {
        let state = random_state(7, 6, 8, 4);
        let z = Embeddings::Tables(&state);
        let pairs: Vec<(u32, u32)> = (0..6).map(|k| (k % 6, (k * 3) % 8)).collect();
        for variant in [GenVariant::Mf, GenVariant::Mlp, GenVariant::Vae] {
            let mut params = init_gen(variant, dims(4, 6, 8, 3, 4, 3), 13);
            params.deterministic_mode = true;
            let w = gen_forward(&params, &pairs, &z, None).unwrap();
            assert!(w.values.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn deterministic_mode_is_pure() {
        let state = random_state(8, 5, 5, 4);
        let z = Embeddings::Tables(&state);
        let pairs = vec![(0, 1), (2, 3), (4, 0)];
        let mut vae = init_gen(GenVariant::Vae, dims(4, 5, 5, 3, 4, 3), 21);
        vae.deterministic_mode = true;
        let a = gen_forward(&vae, &pairs, &z, None).unwrap();
        let b = gen_forward(&vae, &pairs, &z, None).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn sampling_vae_without_rng_is_an_error() {
        let state = random_state(9, 3, 3, 2);
        let z = Embeddings::Tables(&state);
        let vae = init_gen(GenVariant::Vae, dims(2, 3, 3, 2, 2, 2), 3);
        assert!(gen_forward(&vae, &[(0, 0)], &z, None).is_err());
    }

    #[test]
    fn clamped_logvar_matches_deterministic_path() {
        // Force the raw log-variance at or below the clamp floor by biasing
        // it strongly negative; the noise contribution then vanishes to the
        // 1e-9 level against a small decoder.
        let d = 3;
        let m = 2;
        let mut vae = init_gen(GenVariant::Vae, dims(d, 4, 4, 2, 2, m), 17);
        let d2 = 2 * d;
        // Zero the log-variance columns of W_en and set its bias to -60.
        for k in 0..d2 {
            for j in 0..m {
                vae.flat_mut()[k * 2 * m + m + j] = 0.0;
            }
        }
        let b_en_off = d2 * 2 * m;
        for j in 0..m {
            vae.flat_mut()[b_en_off + m + j] = -60.0;
        }
        // Small decoder keeps the residual noise term tiny.
        for j in 0..m {
            vae.flat_mut()[b_en_off + 2 * m + j] *= 1e-3;
        }
        let state = random_state(10, 4, 4, d);
        let z = Embeddings::Tables(&state);
        let pairs = vec![(0, 0), (1, 2), (3, 1)];
        let mut rng = seeded_rng(99, RngStream::VaeEps);
        let sampled = gen_forward(&vae, &pairs, &z, Some(&mut rng)).unwrap();
        let mut det = vae.clone();
        det.deterministic_mode = true;
        let fixed = gen_forward(&det, &pairs, &z, None).unwrap();
        for (a, b) in sampled.values.iter().zip(&fixed.values) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let state = random_state(11, 6, 8, 4);
        let z = Embeddings::Tables(&state);
        let pairs = vec![(0, 1), (2, 3)];
        for variant in [GenVariant::Mf, GenVariant::Mlp, GenVariant::Vae] {
            let mut params = init_gen(variant, dims(4, 6, 8, 3, 4, 3), 23);
            params.deterministic_mode = true;
            let w = gen_forward(&params, &pairs, &z, None).unwrap();
            let g = gen_backward(&params, &pairs, &z, &[0.0, 0.0], &w).unwrap();
            assert!(g.flat.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mf_backward_single_pair_closed_form() {
        let mut mf = GenerativeParams::zeros(GenVariant::Mf, dims(2, 2, 2, 2, 2, 1));
        // user row 1 = (0.3, -0.7); item row 0 = (0.5, 0.2)
        mf.flat_mut()[2] = 0.3;
        mf.flat_mut()[3] = -0.7;
        mf.flat_mut()[4] = 0.5;
        mf.flat_mut()[5] = 0.2;
        let state = random_state(12, 2, 2, 2);
        let z = Embeddings::Tables(&state);
        let pairs = vec![(1, 0)];
        let w = gen_forward(&mf, &pairs, &z, None).unwrap();
        let upstream = [1.7];
        let g = gen_backward(&mf, &pairs, &z, &upstream, &w).unwrap();
        let r = w.values[0];
        let ds = 1.7 * r * (1.0 - r);
        // d/d item_row(0) = ds * user_row(1)
        assert!((g.flat[4] - ds * 0.3).abs() < 1e-15);
        assert!((g.flat[5] - ds * (-0.7)).abs() < 1e-15);
        // d/d user_row(1) = ds * item_row(0)
        assert!((g.flat[2] - ds * 0.5).abs() < 1e-15);
        assert!((g.flat[3] - ds * 0.2).abs() < 1e-15);
    }

    fn fd_check(params: &GenerativeParams, pairs: &[(u32, u32)], state: &EmbeddingState) {
        let z = Embeddings::Tables(state);
        let upstream: Vec<f64> = (0..pairs.len())
            .map(|k| 0.3 + 0.2 * k as f64 * if k % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let w = gen_forward(params, pairs, &z, None).unwrap();
        let analytic = gen_backward(params, pairs, &z, &upstream, &w).unwrap();
        let h = 1e-6;
        let objective = |p: &GenerativeParams| -> f64 {
            let w = gen_forward(p, pairs, &Embeddings::Tables(state), None).unwrap();
            w.values
                .iter()
                .zip(&upstream)
                .map(|(r, up)| up * r)
                .sum()
        };
        for idx in 0..params.num_params() {
            let mut plus = params.clone();
            plus.flat_mut()[idx] += h;
            let mut minus = params.clone();
            minus.flat_mut()[idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = analytic.flat[idx];
            let scale = fd.abs().max(an.abs());
            if scale > 1e-10 {
                assert!(
                    (fd - an).abs() / scale < 1e-5,
                    "param {idx} ({:?}): analytic {an} vs fd {fd}",
                    params.variant
                );
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_all_variants() {
        let state = random_state(13, 6, 8, 4);
        let pairs: Vec<(u32, u32)> = vec![(0, 1), (1, 3), (2, 5), (3, 7), (4, 0), (5, 2)];
        let mf = init_gen(GenVariant::Mf, dims(4, 6, 8, 3, 4, 3), 31);
        fd_check(&mf, &pairs, &state);
        let mlp = init_gen(GenVariant::Mlp, dims(4, 6, 8, 3, 4, 3), 32);
        fd_check(&mlp, &pairs, &state);
        let mut vae = init_gen(GenVariant::Vae, dims(4, 6, 8, 3, 4, 3), 33);
        vae.deterministic_mode = true;
        fd_check(&vae, &pairs, &state);
    }

    #[test]
    fn vae_backward_differentiates_the_noise_path() {
        // Fix eps explicitly and check the log-variance chain against finite
        // differences of the fixed-eps forward.
        let state = random_state(14, 5, 5, 3);
        let z = Embeddings::Tables(&state);
        let pairs: Vec<(u32, u32)> = vec![(0, 1), (2, 3), (4, 0)];
        let params = init_gen(GenVariant::Vae, dims(3, 5, 5, 2, 2, 2), 41);
        let mut eps = Mat::zeros(pairs.len(), 2);
        let mut rng = seeded_rng(77, RngStream::VaeEps);
        for v in eps.data_mut() {
            *v = standard_normal(&mut rng);
        }
        let w = gen_forward_fixed_eps(&params, &pairs, &z, &eps).unwrap();
        let upstream = [0.9, -0.4, 1.3];
        let analytic = gen_backward(&params, &pairs, &z, &upstream, &w).unwrap();
        let h = 1e-6;
        let objective = |p: &GenerativeParams| -> f64 {
            let w = gen_forward_fixed_eps(p, &pairs, &Embeddings::Tables(&state), &eps).unwrap();
            w.values.iter().zip(&upstream).map(|(r, up)| up * r).sum()
        };
        for idx in 0..params.num_params() {
            let mut plus = params.clone();
            plus.flat_mut()[idx] += h;
            let mut minus = params.clone();
            minus.flat_mut()[idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = analytic.flat[idx];
            let scale = fd.abs().max(an.abs());
            if scale > 1e-10 {
                assert!((fd - an).abs() / scale < 1e-5, "param {idx}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn vae_backward_requires_retained_state() {
        let state = random_state(15, 3, 3, 2);
        let z = Embeddings::Tables(&state);
        let params = init_gen(GenVariant::Vae, dims(2, 3, 3, 2, 2, 2), 43);
        let w = InterestWeights {
            values: vec![0.5],
            vae: None,
        };
        assert!(matches!(
            gen_backward(&params, &[(0, 0)], &z, &[1.0], &w),
            Err(Error::MissingVaeState)
        ));
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let state = random_state(16, 4, 4, 3);
        let z = Embeddings::Tables(&state);
        let pairs = vec![(0, 1), (2, 3)];
        let mut params = init_gen(GenVariant::Vae, dims(3, 4, 4, 2, 2, 2), 47);
        params.deterministic_mode = true;
        let w = gen_forward(&params, &pairs, &z, None).unwrap();
        let (_, analytic) = vae_kl(&params, &pairs, &z, &w).unwrap();
        let h = 1e-6;
        let objective = |p: &GenerativeParams| -> f64 {
            let w = gen_forward(p, &pairs, &Embeddings::Tables(&state), None).unwrap();
            vae_kl(p, &pairs, &Embeddings::Tables(&state), &w).unwrap().0
        };
        for idx in 0..params.num_params() {
            let mut plus = params.clone();
            plus.flat_mut()[idx] += h;
            let mut minus = params.clone();
            minus.flat_mut()[idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = analytic.flat[idx];
            let scale = fd.abs().max(an.abs());
            if scale > 1e-8 {
                assert!((fd - an).abs() / scale < 1e-4, "param {idx}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn gen_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        let params = init_gen(GenVariant::Vae, dims(4, 6, 8, 3, 4, 3), 53);
        write_gen_checkpoint(&path, &params).unwrap();
        let loaded = read_gen_checkpoint(&path).unwrap();
        assert_eq!(loaded.variant, params.variant);
        assert_eq!(loaded.dims, params.dims);
        assert_eq!(loaded.flat(), params.flat());
    }
}
