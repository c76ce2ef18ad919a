//! Per-voxel variational auto-encoder.
//!
//! Each `k^3` block of subvoxel values is encoded to a diagonal Gaussian
//! posterior over an `l`-dimensional latent code. The decoder models the block
//! as a Gaussian with fixed per-value standard deviation `obs_sd`, so the
//! negative log-likelihood is a scaled squared error:
//!
//! ```text
//! loss = sum_j (x_j - x_hat_j)^2 / (2 obs_sd^2) + KL(N(mu, sigma^2) || N(0, I))
//! KL   = 1/2 sum (mu^2 + sigma^2 - 1 - log sigma^2)
//! ```
//!
//! averaged over the blocks of a batch. Inference uses the posterior mean.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::formats::CheckpointFile;
use crate::nn::{adam_step, install_grads, relu, relu_backward, AdamConfig, Linear, Params, Parameter};
use crate::voxelizer::SubvoxelTensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeArch {
    /// Block edge; the input width is `k^3`.
    pub k: usize,
    pub latent: usize,
    pub hidden: usize,
    pub obs_sd: f64,
}

impl Default for VaeArch {
    fn default() -> Self {
        VaeArch {
            k: 4,
            latent: 8,
            hidden: 128,
            obs_sd: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    pub arch: VaeArch,
    pub enc: Linear,
    pub mu_head: Linear,
    pub logvar_head: Linear,
    pub dec_hidden: Linear,
    pub dec_out: Linear,
}

/// Intermediate values of one ELBO evaluation.
struct ElboCache {
    x: Array2<f64>,
    enc_pre: Array2<f64>,
    enc_h: Array2<f64>,
    mu: Array2<f64>,
    logvar: Array2<f64>,
    noise: Array2<f64>,
    z: Array2<f64>,
    dec_pre: Array2<f64>,
    dec_h: Array2<f64>,
    x_hat: Array2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    /// Batch mean of `recon + kl`.
    pub loss: f64,
    /// Batch mean of the scaled squared error.
    pub recon: f64,
    /// Batch mean of the KL term.
    pub kl: f64,
    /// Mean squared error per value.
    pub mse: f64,
}

/// `KL(N(mu, exp(logvar)) || N(0, I))`.
pub fn kl_divergence(mu: ArrayView1<f64>, logvar: ArrayView1<f64>) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar.iter())
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// `mu + exp(logvar / 2) * noise`.
pub fn reparameterize(mu: ArrayView1<f64>, logvar: ArrayView1<f64>, noise: ArrayView1<f64>) -> Result<Array1<f64>> {
    if mu.len() != logvar.len() || mu.len() != noise.len() {
        return Err(Error::Shape("reparameterize: length mismatch".into()));
    }
    Ok(ndarray::Zip::from(&mu)
        .and(&logvar)
        .and(&noise)
        .map_collect(|&m, &lv, &e| m + (0.5 * lv).exp() * e))
}

impl VaeModel {
    pub fn new(arch: VaeArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = arch.k.pow(3);
        VaeModel {
            arch,
            enc: Linear::new("vae.enc", input, arch.hidden, &mut rng),
            mu_head: Linear::new("vae.mu", arch.hidden, arch.latent, &mut rng),
            logvar_head: Linear::new("vae.logvar", arch.hidden, arch.latent, &mut rng),
            dec_hidden: Linear::new("vae.dec", arch.latent, arch.hidden, &mut rng),
            dec_out: Linear::new("vae.out", arch.hidden, input, &mut rng),
        }
    }

    pub fn block_len(&self) -> usize {
        self.arch.k.pow(3)
    }

    fn check_blocks(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.block_len() {
            return Err(Error::Shape(format!(
                "blocks have {} values, model expects {}",
                x.ncols(),
                self.block_len()
            )));
        }
        Ok(())
    }

    /// Posterior parameters `(mu, logvar)` for every row of `x`.
    pub fn encode_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_blocks(&x)?;
        let h = relu(&self.enc.forward(x)?);
        Ok((self.mu_head.forward(h.view())?, self.logvar_head.forward(h.view())?))
    }

    pub fn encode(&self, block: &[f64]) -> Result<(Array1<f64>, Array1<f64>)> {
        let x = ArrayView2::from_shape((1, block.len()), block)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (mu, lv) = self.encode_batch(x)?;
        Ok((mu.row(0).to_owned(), lv.row(0).to_owned()))
    }

    pub fn decode_batch(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.arch.latent {
            return Err(Error::Shape("latent width mismatch".into()));
        }
        let h = relu(&self.dec_hidden.forward(z)?);
        self.dec_out.forward(h.view())
    }

    /// Decode of the posterior mean.
    pub fn reconstruct(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (mu, _) = self.encode_batch(x)?;
        self.decode_batch(mu.view())
    }

    fn recon_scale(&self) -> f64 {
        1.0 / (2.0 * self.arch.obs_sd * self.arch.obs_sd)
    }

    fn elbo_forward(&self, x: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<(ElboTerms, ElboCache)> {
        self.check_blocks(&x)?;
        if noise.dim() != (x.nrows(), self.arch.latent) {
            return Err(Error::Shape(format!(
                "noise {:?} for {} blocks of latent width {}",
                noise.dim(),
                x.nrows(),
                self.arch.latent
            )));
        }
        let b = x.nrows() as f64;
        let enc_pre = self.enc.forward(x)?;
        let enc_h = relu(&enc_pre);
        let mu = self.mu_head.forward(enc_h.view())?;
        let logvar = self.logvar_head.forward(enc_h.view())?;
        let z = &mu + &(logvar.mapv(|lv| (0.5 * lv).exp()) * noise);
        let dec_pre = self.dec_hidden.forward(z.view())?;
        let dec_h = relu(&dec_pre);
        let x_hat = self.dec_out.forward(dec_h.view())?;

        let sq: f64 = (&x_hat - &x).mapv(|d| d * d).sum();
        let recon = self.recon_scale() * sq / b;
        let kl: f64 = mu
            .rows()
            .into_iter()
            .zip(logvar.rows())
            .map(|(m, lv)| kl_divergence(m, lv))
            .sum::<f64>()
            / b;
        let terms = ElboTerms {
            loss: recon + kl,
            recon,
            kl,
            mse: sq / (x.len() as f64),
        };
        if !terms.loss.is_finite() {
            return Err(Error::NonFinite("ELBO loss".into()));
        }
        Ok((
            terms,
            ElboCache {
                x: x.to_owned(),
                enc_pre,
                enc_h,
                mu,
                logvar,
                noise: noise.to_owned(),
                z,
                dec_pre,
                dec_h,
                x_hat,
            },
        ))
    }

    /// ELBO-based loss for a batch with explicit reparameterization noise.
    pub fn elbo_loss(&self, x: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<ElboTerms> {
        Ok(self.elbo_forward(x, noise)?.0)
    }

    /// Loss and gradients in [`Params::params`] order.
    pub fn elbo_loss_and_grads(&self, x: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<(ElboTerms, Vec<ArrayD<f64>>)> {
        let (terms, c) = self.elbo_forward(x, noise)?;
        let b = c.x.nrows() as f64;

        let d_xhat = (&c.x_hat - &c.x) * (2.0 * self.recon_scale() / b);
        let (d_dec_h, g_out) = self.dec_out.backward(c.dec_h.view(), d_xhat.view());
        let d_dec_pre = relu_backward(&c.dec_pre, &d_dec_h);
        let (d_z, g_dec) = self.dec_hidden.backward(c.z.view(), d_dec_pre.view());

        let std = c.logvar.mapv(|lv| (0.5 * lv).exp());
        let d_mu = &d_z + &(&c.mu / b);
        let d_logvar = &(&d_z * &std * &c.noise * 0.5) + &(c.logvar.mapv(|lv| 0.5 * (lv.exp() - 1.0)) / b);

        let (dh_mu, g_mu) = self.mu_head.backward(c.enc_h.view(), d_mu.view());
        let (dh_lv, g_lv) = self.logvar_head.backward(c.enc_h.view(), d_logvar.view());
        let d_enc_pre = relu_backward(&c.enc_pre, &(dh_mu + dh_lv));
        let (_, g_enc) = self.enc.backward(c.x.view(), d_enc_pre.view());

        let grads = [g_enc, g_mu, g_lv, g_dec, g_out].into_iter().flatten().collect();
        Ok((terms, grads))
    }

    /// Mean squared reconstruction error per value using posterior means.
    pub fn reconstruction_mse(&self, x: ArrayView2<f64>) -> Result<f64> {
        let r = self.reconstruct(x)?;
        Ok((&r - &x).mapv(|d| d * d).mean().unwrap_or(0.0))
    }

    pub fn to_checkpoint(&self, ckpt: &mut CheckpointFile) -> Result<()> {
        for p in self.params() {
            ckpt.push_array(&p.name, p.value())?;
        }
        Ok(())
    }

    /// Rebuilds a model of architecture `arch` from checkpoint tensors.
    pub fn from_checkpoint(arch: VaeArch, ckpt: &CheckpointFile) -> Result<Self> {
        let mut model = VaeModel::new(arch, 0);
        for p in model.params_mut() {
            let shape = p.value().shape().to_vec();
            p.load(ckpt.array(&p.name, &shape)?)?;
        }
        Ok(model)
    }

    /// Reads the architecture off the tensor shapes in a checkpoint.
    pub fn arch_from_checkpoint(ckpt: &CheckpointFile, obs_sd: f64) -> Result<VaeArch> {
        let enc = ckpt
            .get("vae.enc.weight")
            .ok_or_else(|| Error::Format("checkpoint has no VAE".into()))?;
        let mu = ckpt
            .get("vae.mu.weight")
            .ok_or_else(|| Error::Format("checkpoint has no VAE mean head".into()))?;
        let input = enc.dims[0] as usize;
        let k = (1..=input).find(|k| k * k * k >= input).unwrap_or(1);
        if k * k * k != input {
            return Err(Error::Format(format!("VAE input width {input} is not a cube")));
        }
        Ok(VaeArch {
            k,
            latent: mu.dims[1] as usize,
            hidden: enc.dims[1] as usize,
            obs_sd,
        })
    }
}

impl Params for VaeModel {
    fn params(&self) -> Vec<&Parameter> {
        [&self.enc, &self.mu_head, &self.logvar_head, &self.dec_hidden, &self.dec_out]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        [
            &mut self.enc,
            &mut self.mu_head,
            &mut self.logvar_head,
            &mut self.dec_hidden,
            &mut self.dec_out,
        ]
        .into_iter()
        .flat_map(|l| l.params_mut())
        .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            epochs: 10,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Trains `model` in place on the rows of `blocks`; returns epoch-mean losses.
pub fn train_vae(model: &mut VaeModel, blocks: ArrayView2<f64>, cfg: &VaeTrainConfig) -> Result<Vec<f64>> {
    if blocks.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    model.check_blocks(&blocks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..blocks.nrows()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = blocks.select(Axis(0), chunk);
            let noise = Array2::from_shape_simple_fn((chunk.len(), model.arch.latent), || {
                StandardNormal.sample(&mut rng)
            });
            let (terms, grads) = model.elbo_loss_and_grads(x.view(), noise.view())?;
            total += terms.loss * chunk.len() as f64;
            install_grads(model.params_mut(), grads)?;
            adam_step(model.params_mut(), &adam);
        }
        history.push(total / blocks.nrows() as f64);
    }
    Ok(history)
}

/// `(D, H, W, l)` grid of posterior means.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub values: Array4<f64>,
}

/// Encodes every voxel block to its posterior mean. Empty blocks share one
/// cached encoding of the zero block.
pub fn encode_grid(sub: &SubvoxelTensor, model: &VaeModel) -> Result<LatentGrid> {
    let s = &sub.spec;
    if s.k != model.arch.k {
        return Err(Error::Shape(format!(
            "grid has k={}, VAE was built for k={}",
            s.k, model.arch.k
        )));
    }
    let len = s.block_len();
    let l = model.arch.latent;
    let (zero_mu, _) = model.encode(&vec![0.0; len])?;
    let occupied: Vec<usize> = sub
        .blocks()
        .enumerate()
        .filter(|(_, b)| b.iter().any(|&v| v != 0.0))
        .map(|(i, _)| i)
        .collect();
    let mut flat = Array2::zeros((s.voxels(), l));
    for mut row in flat.rows_mut() {
        row.assign(&zero_mu);
    }
    if !occupied.is_empty() {
        let mut x = Array2::zeros((occupied.len(), len));
        for (r, &v) in occupied.iter().enumerate() {
            x.row_mut(r)
                .assign(&ArrayView1::from(&sub.values[v * len..(v + 1) * len]));
        }
        let (mu, _) = model.encode_batch(x.view())?;
        for (r, &v) in occupied.iter().enumerate() {
            flat.row_mut(v).assign(&mu.row(r));
        }
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent grid".into()));
    }
    Ok(LatentGrid {
        values: flat
            .into_shape_with_order((s.d, s.h, s.w, l))
            .expect("sizes"),
    })
}

/// Stacks the blocks of several grids into one `(N, k^3)` matrix, optionally
/// dropping all-zero blocks.
pub fn collect_blocks<'a>(grids: impl IntoIterator<Item = &'a SubvoxelTensor>, skip_empty: bool) -> Array2<f64> {
    let mut rows: Vec<f64> = Vec::new();
    let mut width = 0;
    let mut count = 0;
    for g in grids {
        width = g.spec.block_len();
        for b in g.blocks() {
            if skip_empty && b.iter().all(|&v| v == 0.0) {
                continue;
            }
            rows.extend_from_slice(b);
            count += 1;
        }
    }
    Array2::from_shape_vec((count, width), rows).expect("sizes")
}

/// First `n` rows.
pub fn head_rows(x: &Array2<f64>, n: usize) -> Array2<f64> {
    x.slice(s![..n.min(x.nrows()), ..]).to_owned()
}
