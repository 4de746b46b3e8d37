//! Missing-modality generation: a vector-quantized encoder/decoder mapping
//! MRI volumes to PET volumes, with a least-squares patch discriminator and
//! a frozen random perceptual network for the hybrid loss.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv3d, ConvTranspose3d};
use crate::synthdata::Volume;
use crate::tensor::{read_checkpoint, write_checkpoint, Binder, Checkpoint, Graph, ParamId, Params, Real, Tensor, Var};

const LEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridLossWeights {
    pub l1: f64,
    pub qua: f64,
    pub per: f64,
    pub adv: f64,
}

impl Default for HybridLossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            qua: 1.0,
            per: 0.1,
            adv: 0.001,
        }
    }
}

impl HybridLossWeights {
    pub fn new(l1: f64, qua: f64, per: f64, adv: f64) -> Result<Self> {
        let w = Self { l1, qua, per, adv };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l1", self.l1), ("qua", self.qua), ("per", self.per), ("adv", self.adv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("hybrid loss weight `{name}` must be a finite value ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmgConfig {
    /// Number of codes M.
    pub codebook_size: usize,
    /// Code dimensionality, also the encoder's output channels.
    pub code_dim: usize,
    /// Commitment weight β in the quantization loss.
    pub beta: f64,
    pub loss: HybridLossWeights,
}

impl Default for MmgConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            code_dim: 32,
            beta: 0.25,
            loss: HybridLossWeights::default(),
        }
    }
}

impl MmgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size == 0 || self.code_dim == 0 {
            return Err(Error::Config("codebook_size and code_dim must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be ≥ 0, got {}", self.beta)));
        }
        self.loss.validate()
    }
}

/// A value-level view of the code vectors and how often each was selected.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `[M, d_code]`.
    pub codes: Tensor<f32>,
    pub usage_counts: Vec<u64>,
}

impl Codebook {
    pub fn new(codes: Tensor<f32>) -> Result<Self> {
        if codes.rank() != 2 || codes.shape()[0] == 0 {
            return Err(shape_err!("codebook must be a non-empty [M, d] matrix, got {:?}", codes.shape()));
        }
        if !codes.is_finite() {
            return Err(Error::InvalidArgument("codebook contains non-finite values".into()));
        }
        let m = codes.shape()[0];
        Ok(Self {
            codes,
            usage_counts: vec![0; m],
        })
    }

    pub fn size(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn code(&self, m: usize) -> &[f32] {
        let d = self.dim();
        &self.codes.data()[m * d..(m + 1) * d]
    }

    /// Value-level quantization of `[N, d_code, d, h, w]`.
    pub fn quantize(&self, z_hat: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<usize>)> {
        let rows = channels_last(z_hat, self.dim())?;
        let indices = nearest_codes(&rows, self.codes.data(), self.dim());
        let mut out = vec![0.0f32; z_hat.numel()];
        let (n, c, p) = split_dims(z_hat.shape());
        for (r, &m) in indices.iter().enumerate() {
            let (i, s) = (r / p, r % p);
            for (ch, &v) in self.code(m).iter().enumerate() {
                out[(i * c + ch) * p + s] = v;
            }
        }
        debug_assert_eq!(indices.len(), n * p);
        Ok((Tensor::new(z_hat.shape().to_vec(), out)?, indices))
    }
}

fn split_dims(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

/// Rows of `[N·d·h·w, C]` from a `[N, C, d, h, w]` tensor.
fn channels_last<T: Real>(z: &Tensor<T>, code_dim: usize) -> Result<Vec<T>> {
    if z.rank() != 5 || z.shape()[1] != code_dim {
        return Err(shape_err!(
            "quantize expects [N, {code_dim}, d, h, w] latents, got {:?}",
            z.shape()
        ));
    }
    let (n, c, p) = split_dims(z.shape());
    let mut rows = vec![T::zero(); n * c * p];
    for i in 0..n {
        for ch in 0..c {
            for s in 0..p {
                rows[(i * p + s) * c + ch] = z.data()[(i * c + ch) * p + s];
            }
        }
    }
    Ok(rows)
}

/// Index of the nearest code for every row; ties go to the lowest index.
fn nearest_codes<T: Real>(rows: &[T], codes: &[f32], dim: usize) -> Vec<usize> {
    rows.chunks(dim)
        .map(|row| {
            let mut best = (0, f64::INFINITY);
            for (m, code) in codes.chunks(dim).enumerate() {
                let d: f64 = row
                    .iter()
                    .zip(code)
                    .map(|(&a, &b)| {
                        let diff = a.to_f64().unwrap() - b as f64;
                        diff * diff
                    })
                    .sum();
                if d < best.1 {
                    best = (m, d);
                }
            }
            best.0
        })
        .collect()
}

/// Result of quantizing a latent on a graph.
pub struct Quantized {
    /// Straight-through output: the selected codes in the forward pass,
    /// identity gradient to `z_hat` in the backward pass.
    pub z_st: Var,
    /// The selected codes, differentiable with respect to the codebook.
    pub z_q: Var,
    /// Code index per spatial position, ordered `[N, d, h, w]`.
    pub indices: Vec<usize>,
}

/// Snaps every spatial position of `z_hat [N, d_code, d, h, w]` to its
/// nearest row of `codes [M, d_code]`.
pub fn quantize<T: Real>(g: &Graph<T>, z_hat: Var, codes: Var) -> Result<Quantized> {
    let cv = g.value(codes);
    if cv.rank() != 2 || cv.shape()[0] == 0 {
        return Err(shape_err!("codebook must be a non-empty [M, d] matrix, got {:?}", cv.shape()));
    }
    let (m, dim) = (cv.shape()[0], cv.shape()[1]);
    let zv = g.value(z_hat);
    let rows = channels_last(&zv, dim)?;
    let codes_f32: Vec<f32> = cv.data().iter().map(|v| v.to_f32().unwrap()).collect();
    let indices = nearest_codes(&rows, &codes_f32, dim);
    let mut one_hot = vec![T::zero(); indices.len() * m];
    for (r, &k) in indices.iter().enumerate() {
        one_hot[r * m + k] = T::one();
    }
    let one_hot = g.constant(Tensor::new(vec![indices.len(), m], one_hot)?);
    let selected = g.matmul(one_hot, codes)?;
    let shape = zv.shape();
    let (n, sp) = (shape[0], [shape[2], shape[3], shape[4]]);
    let z_q = g.reshape(selected, &[n, sp[0], sp[1], sp[2], dim])?;
    let z_q = g.permute(z_q, &[0, 4, 1, 2, 3])?;
    // detach(z_q) + (z_hat − detach(z_hat)) has the exact code values
    let zero = g.sub(z_hat, g.detach(z_hat))?;
    let z_st = g.add(g.detach(z_q), zero)?;
    Ok(Quantized { z_st, z_q, indices })
}

/// The four hybrid-loss components and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct HybridLoss {
    pub total: Var,
    pub l1: Var,
    pub qua: Var,
    pub per: Var,
    pub adv: Var,
}

/// Per-epoch component means, as written to the loss curve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HybridComponents {
    pub l1: f64,
    pub qua: f64,
    pub per: f64,
    pub adv: f64,
    pub total: f64,
}

/// `mean(|y_gen − y_true|)`.
pub fn l1_loss<T: Real>(g: &Graph<T>, y_gen: Var, y_true: Var) -> Result<Var> {
    Ok(g.mean(g.abs(g.sub(y_gen, y_true)?)))
}

/// `mean((sg[ẑ] − z_q)²) + β·mean((ẑ − sg[z_q])²)`.
pub fn quantization_loss<T: Real>(g: &Graph<T>, z_hat: Var, z_q: Var, beta: f64) -> Result<Var> {
    let codebook = g.mean(g.square(g.sub(g.detach(z_hat), z_q)?));
    let commit = g.mean(g.square(g.sub(z_hat, g.detach(z_q))?));
    g.add(codebook, g.scale(commit, beta))
}

/// Generator side of the least-squares adversarial loss, `mean((D(ŷ) − 1)²)`.
pub fn adversarial_loss<T: Real>(g: &Graph<T>, disc_fake: Var) -> Var {
    g.mean(g.square(g.add_scalar(disc_fake, -1.0)))
}

/// `½·[mean((D(y) − 1)²) + mean(D(ŷ)²)]`.
pub fn discriminator_loss<T: Real>(g: &Graph<T>, disc_real: Var, disc_fake: Var) -> Result<Var> {
    let real = g.mean(g.square(g.add_scalar(disc_real, -1.0)));
    let fake = g.mean(g.square(disc_fake));
    Ok(g.scale(g.add(real, fake)?, 0.5))
}

/// Combines precomputed perceptual and adversarial terms with L1 and the
/// quantization loss.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loss<T: Real>(
    g: &Graph<T>,
    y_true: Var,
    y_gen: Var,
    z_hat: Var,
    z_q: Var,
    per: Var,
    disc_fake: Var,
    beta: f64,
    w: &HybridLossWeights,
) -> Result<HybridLoss> {
    w.validate()?;
    if g.shape(y_true) != g.shape(y_gen) {
        return Err(shape_err!(
            "hybrid_loss volume shapes differ: {:?} vs {:?}",
            g.shape(y_true),
            g.shape(y_gen)
        ));
    }
    if g.shape(z_hat) != g.shape(z_q) {
        return Err(shape_err!(
            "hybrid_loss latent shapes differ: {:?} vs {:?}",
            g.shape(z_hat),
            g.shape(z_q)
        ));
    }
    let l1 = l1_loss(g, y_gen, y_true)?;
    let qua = quantization_loss(g, z_hat, z_q, beta)?;
    let adv = adversarial_loss(g, disc_fake);
    let mut total = g.scale(l1, w.l1);
    for (v, c) in [(qua, w.qua), (per, w.per), (adv, w.adv)] {
        total = g.add(total, g.scale(v, c))?;
    }
    Ok(HybridLoss { total, l1, qua, per, adv })
}

/// Encoder, codebook, decoder, discriminator and perceptual network.
pub struct Mmg {
    pub config: MmgConfig,
    pub shape: [usize; 3],
    /// Encoder, codebook and decoder.
    pub generator: Params,
    pub discriminator: Params,
    /// Never trained.
    pub perceptual: Params,
    pub usage_counts: Vec<u64>,
    encoder: [Conv3d; 3],
    codebook: ParamId,
    decoder: [ConvTranspose3d; 3],
    disc_layers: [Conv3d; 3],
    perc_layers: [Conv3d; 3],
}

/// Forward pass of the generator on a batch.
pub struct GeneratorPass {
    pub z_hat: Var,
    pub quantized: Quantized,
    pub y_gen: Var,
}

impl Mmg {
    pub fn new(config: MmgConfig, shape: [usize; 3], seed: u64) -> Result<Self> {
        config.validate()?;
        if shape.iter().any(|&s| s < 8 || s % 8 != 0) {
            return Err(Error::Config(format!(
                "MMG needs volume extents that are multiples of 8, got {shape:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6d_6700);
        let mut gen = Params::new();
        let dc = config.code_dim;
        let encoder = [
            Conv3d::new(&mut gen, &mut rng, "enc0", 1, 16, 3, 2, 1),
            Conv3d::new(&mut gen, &mut rng, "enc1", 16, 32, 3, 2, 1),
            Conv3d::new(&mut gen, &mut rng, "enc2", 32, dc, 3, 2, 1),
        ];
        let m = config.codebook_size;
        let bound = 1.0 / m as f32;
        let codes = (0..m * dc).map(|_| rng.random_range(-bound..bound)).collect();
        let codebook = gen.add("codebook", Tensor::new(vec![m, dc], codes)?);
        let up = (2, 1, 1);
        let decoder = [
            ConvTranspose3d::new(&mut gen, &mut rng, "dec0", dc, 32, 3, up),
            ConvTranspose3d::new(&mut gen, &mut rng, "dec1", 32, 16, 3, up),
            ConvTranspose3d::new(&mut gen, &mut rng, "dec2", 16, 1, 3, up),
        ];
        let mut discriminator = Params::new();
        let disc_layers = [
            Conv3d::new(&mut discriminator, &mut rng, "disc0", 1, 8, 3, 2, 1),
            Conv3d::new(&mut discriminator, &mut rng, "disc1", 8, 16, 3, 2, 1),
            Conv3d::new(&mut discriminator, &mut rng, "disc2", 16, 1, 3, 2, 1),
        ];
        let mut perceptual = Params::new();
        let perc_layers = [
            Conv3d::new(&mut perceptual, &mut rng, "perc0", 1, 8, 3, 1, 1),
            Conv3d::new(&mut perceptual, &mut rng, "perc1", 8, 16, 3, 2, 1),
            Conv3d::new(&mut perceptual, &mut rng, "perc2", 16, 16, 3, 2, 1),
        ];
        perceptual.set_trainable(false);
        Ok(Self {
            usage_counts: vec![0; m],
            config,
            shape,
            generator: gen,
            discriminator,
            perceptual,
            encoder,
            codebook,
            decoder,
            disc_layers,
            perc_layers,
        })
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            codes: self.generator.get(self.codebook).value.clone(),
            usage_counts: self.usage_counts.clone(),
        }
    }

    /// Latent grid extent `shape / 8`.
    pub fn latent_shape(&self) -> [usize; 3] {
        self.shape.map(|s| s / 8)
    }

    pub fn encode<T: Real>(&self, g: &Graph<T>, p: &Binder, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.encoder.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            if i + 1 < self.encoder.len() {
                h = g.leaky_relu(h, LEAK);
            }
        }
        Ok(h)
    }

    pub fn decode<T: Real>(&self, g: &Graph<T>, p: &Binder, z: Var) -> Result<Var> {
        let mut h = z;
        for (i, layer) in self.decoder.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            if i + 1 < self.decoder.len() {
                h = g.leaky_relu(h, LEAK);
            }
        }
        Ok(h)
    }

    /// `ŷ = G(q(E(x)))` for `x [N, 1, D, H, W]`.
    pub fn generate<T: Real>(&self, g: &Graph<T>, p: &Binder, x: Var) -> Result<GeneratorPass> {
        let shape = g.shape(x);
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != self.shape {
            return Err(shape_err!(
                "MMG expects [N, 1, {}, {}, {}] input, got {shape:?}",
                self.shape[0],
                self.shape[1],
                self.shape[2]
            ));
        }
        let z_hat = self.encode(g, p, x)?;
        let quantized = quantize(g, z_hat, p.var(g, self.codebook))?;
        let y_gen = self.decode(g, p, quantized.z_st)?;
        Ok(GeneratorPass { z_hat, quantized, y_gen })
    }

    /// Patch scores `[N, 1, D/8, H/8, W/8]`.
    pub fn discriminate<T: Real>(&self, g: &Graph<T>, p: &Binder, y: Var) -> Result<Var> {
        let mut h = y;
        for (i, layer) in self.disc_layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            if i + 1 < self.disc_layers.len() {
                h = g.leaky_relu(h, LEAK);
            }
        }
        Ok(h)
    }

    fn perceptual_features<T: Real>(&self, g: &Graph<T>, p: &Binder, y: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(3);
        let mut h = y;
        for layer in &self.perc_layers {
            h = g.leaky_relu(layer.forward(g, p, h)?, LEAK);
            feats.push(h);
        }
        Ok(feats)
    }

    /// Sum over layers of the mean squared feature difference.
    pub fn perceptual_loss<T: Real>(&self, g: &Graph<T>, p: &Binder, y_gen: Var, y_true: Var) -> Result<Var> {
        let a = self.perceptual_features(g, p, y_gen)?;
        let b = self.perceptual_features(g, p, y_true)?;
        let mut total = g.scalar(T::zero());
        for (fa, fb) in a.into_iter().zip(b) {
            total = g.add(total, g.mean(g.square(g.sub(fa, g.detach(fb))?)))?;
        }
        Ok(total)
    }

    /// Full generator objective for a batch.
    pub fn generator_loss<T: Real>(
        &self,
        g: &Graph<T>,
        gen: &Binder,
        disc: &Binder,
        perc: &Binder,
        x: Var,
        y_true: Var,
    ) -> Result<(GeneratorPass, HybridLoss)> {
        let pass = self.generate(g, gen, x)?;
        let per = self.perceptual_loss(g, perc, pass.y_gen, y_true)?;
        let fake = self.discriminate(g, disc, pass.y_gen)?;
        let loss = hybrid_loss(
            g,
            y_true,
            pass.y_gen,
            pass.z_hat,
            pass.quantized.z_q,
            per,
            fake,
            self.config.beta,
            &self.config.loss,
        )?;
        Ok((pass, loss))
    }

    /// Synthesises PET for a batch of MRI volumes.
    pub fn generate_batch(&self, mri: &[&Volume]) -> Result<Vec<Volume>> {
        if mri.is_empty() {
            return Ok(Vec::new());
        }
        for v in mri {
            if v.shape() != self.shape {
                return Err(shape_err!(
                    "MRI volume shape {:?} does not match the generator's {:?}",
                    v.shape(),
                    self.shape
                ));
            }
        }
        let g = Graph::<f32>::new();
        let frozen = Binder::frozen(&self.generator);
        let x = g.constant(stack_volumes(mri)?);
        let y = self.generate(&g, &frozen, x)?.y_gen;
        let yv = g.value(y);
        let len = self.shape.iter().product::<usize>();
        yv.data()
            .chunks(len)
            .map(|c| Volume::new(self.shape, c.to_vec()))
            .collect()
    }

    pub fn generate_pet(&self, mri: &Volume) -> Result<Volume> {
        Ok(self.generate_batch(&[mri])?.remove(0))
    }

    /// Re-initialises every code whose usage count is zero to a randomly
    /// chosen latent vector from `pool` (rows of length `code_dim`), then
    /// clears the counts. Returns how many codes were replaced.
    pub fn reseed_dead_codes(&mut self, pool: &[f32], rng: &mut ChaCha8Rng) -> usize {
        let dim = self.config.code_dim;
        let rows = pool.len() / dim;
        if rows == 0 {
            return 0;
        }
        let counts = std::mem::replace(&mut self.usage_counts, vec![0; self.config.codebook_size]);
        let codes = &mut self.generator.get_mut(self.codebook).value;
        let mut replaced = 0;
        for (m, &c) in counts.iter().enumerate() {
            if c == 0 {
                let r = rng.random_range(0..rows);
                codes.data_mut()[m * dim..(m + 1) * dim].copy_from_slice(&pool[r * dim..(r + 1) * dim]);
                replaced += 1;
            }
        }
        replaced
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage_counts[i] += 1;
        }
    }

    /// Checksum over generator weights only (what stage 2 consumes).
    pub fn checksum(&self) -> String {
        self.generator.checksum()
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut tensors = self.generator.named_tensors("gen.");
        tensors.extend(self.discriminator.named_tensors("disc."));
        tensors.extend(self.perceptual.named_tensors("perc."));
        let meta = MmgMetadata {
            kind: "mmg".into(),
            config: self.config.clone(),
            shape: self.shape,
            seed,
        };
        Checkpoint {
            tensors,
            metadata: Some(serde_json::to_string(&meta).expect("metadata serialises")),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, u64)> {
        let meta: MmgMetadata = serde_json::from_str(
            ckpt.metadata
                .as_deref()
                .ok_or_else(|| Error::Data("MMG checkpoint has no metadata record".into()))?,
        )?;
        if meta.kind != "mmg" {
            return Err(Error::Data(format!("expected an MMG checkpoint, found `{}`", meta.kind)));
        }
        let mut mmg = Self::new(meta.config, meta.shape, meta.seed)?;
        mmg.generator.load_named(&ckpt.tensors, "gen.")?;
        mmg.discriminator.load_named(&ckpt.tensors, "disc.")?;
        mmg.perceptual.load_named(&ckpt.tensors, "perc.")?;
        Ok((mmg, meta.seed))
    }

    pub fn save(&self, path: impl AsRef<Path>, seed: u64) -> Result<()> {
        write_checkpoint(&self.to_checkpoint(seed), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, u64)> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct MmgMetadata {
    kind: String,
    config: MmgConfig,
    shape: [usize; 3],
    seed: u64,
}

/// `[N, 1, D, H, W]` batch from equally shaped volumes.
pub fn stack_volumes(vols: &[&Volume]) -> Result<Tensor<f32>> {
    let shape = vols
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack an empty volume list".into()))?
        .shape();
    let mut data = Vec::with_capacity(vols.len() * vols[0].len());
    for v in vols {
        if v.shape() != shape {
            return Err(shape_err!("volume shapes differ: {:?} vs {shape:?}", v.shape()));
        }
        data.extend_from_slice(v.data());
    }
    Tensor::new(vec![vols.len(), 1, shape[0], shape[1], shape[2]], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codebook(rows: &[&[f32]]) -> Codebook {
        let d = rows[0].len();
        Codebook::new(Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()).unwrap()
    }

    fn latent(v: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![1, v.len(), 1, 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn nearest_and_ties() {
        let cb = codebook(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert_eq!(cb.quantize(&latent(&[0.1, 0.1])).unwrap().1, vec![0]);
        assert_eq!(cb.quantize(&latent(&[0.5, 0.5])).unwrap().1, vec![0]);
        let (zq, idx) = cb.quantize(&latent(&[0.9, 0.7])).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(zq.data(), &[1.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let cb = codebook(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(cb.quantize(&latent(&[0.1, 0.1, 0.1])).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(HybridLossWeights::new(1.0, 0.0, 0.0, 0.0).is_ok());
        assert!(HybridLossWeights::new(1.0, -0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn rejects_bad_volume_shape() {
        assert!(Mmg::new(MmgConfig::default(), [12, 16, 16], 0).is_err());
        let mmg = Mmg::new(MmgConfig::default(), [16, 16, 16], 0).unwrap();
        assert!(mmg.generate_pet(&Volume::zeros([8, 8, 8])).is_err());
    }
}
