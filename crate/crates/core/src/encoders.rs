//! Per-modality encoders producing `t` tokens of width `d_tok`, and the
//! multi-head self-attention block that refines each modality's tokens.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv3d, LayerNorm, Linear};
use crate::synthdata::CLINICAL_FEATURES;
use crate::tensor::{Binder, Graph, Params, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Mri,
    Pet,
    Clinical,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Mri, Modality::Pet, Modality::Clinical];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Mri => "mri",
            Modality::Pet => "pet",
            Modality::Clinical => "clinical",
        }
    }
}

/// One subject's tokens for one modality, `[t, d_tok]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeature {
    pub tokens: Tensor<f32>,
    pub modality: Modality,
}

impl ModalityFeature {
    pub fn new(tokens: Tensor<f32>, modality: Modality) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(shape_err!("modality feature must be [t, d_tok], got {:?}", tokens.shape()));
        }
        Ok(Self { tokens, modality })
    }

    pub fn t(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn d_tok(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Feature geometry shared by all three encoders.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Tokens per modality.
    pub tokens: usize,
    /// Feature width `d = tokens · d_tok`, also the attention width.
    pub d: usize,
    pub heads: usize,
    /// Co-attention key width.
    pub d_k: usize,
    pub classifier_hidden: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            d: 64,
            heads: 4,
            d_k: 16,
            classifier_hidden: 64,
        }
    }
}

impl FeatureConfig {
    pub fn d_tok(&self) -> usize {
        self.d / self.tokens
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.d == 0 || self.heads == 0 || self.d_k == 0 || self.classifier_hidden == 0 {
            return Err(Error::Config("feature dimensions must all be positive".into()));
        }
        if self.d % self.tokens != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by tokens = {}",
                self.d, self.tokens
            )));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// Three stride-2 conv blocks, global average pool and a linear map to `d`.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    convs: [Conv3d; 3],
    proj: Linear,
    tokens: usize,
}

impl ImageEncoder {
    pub fn new(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, cfg: &FeatureConfig) -> Self {
        let convs = [
            Conv3d::new(params, rng, &format!("{name}.conv0"), 1, 8, 3, 2, 1),
            Conv3d::new(params, rng, &format!("{name}.conv1"), 8, 16, 3, 2, 1),
            Conv3d::new(params, rng, &format!("{name}.conv2"), 16, 32, 3, 2, 1),
        ];
        let proj = Linear::new(params, rng, &format!("{name}.proj"), 32, cfg.d);
        Self {
            convs,
            proj,
            tokens: cfg.tokens,
        }
    }

    /// `[N, 1, D, H, W]` → `[N, t, d_tok]`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Binder, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 5 || shape[1] != 1 {
            return Err(shape_err!("image encoder expects [N, 1, D, H, W], got {shape:?}"));
        }
        let mut h = x;
        for conv in &self.convs {
            h = g.relu(conv.forward(g, p, h)?);
        }
        let pooled = g.global_avg_pool(h)?;
        let feat = self.proj.forward(g, p, pooled)?;
        g.reshape(feat, &[shape[0], self.tokens, self.proj.outputs / self.tokens])
    }
}

/// `7 → 64 → relu → d`, reshaped to tokens.
#[derive(Clone, Debug)]
pub struct TabularEncoder {
    hidden: Linear,
    out: Linear,
    tokens: usize,
}

impl TabularEncoder {
    pub const HIDDEN: usize = 64;

    pub fn new(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, cfg: &FeatureConfig) -> Self {
        let hidden = Linear::new(params, rng, &format!("{name}.fc0"), CLINICAL_FEATURES, Self::HIDDEN);
        let out = Linear::new(params, rng, &format!("{name}.fc1"), Self::HIDDEN, cfg.d);
        Self {
            hidden,
            out,
            tokens: cfg.tokens,
        }
    }

    /// Standardised `[N, 7]` → `[N, t, d_tok]`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Binder, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != CLINICAL_FEATURES {
            return Err(shape_err!(
                "tabular encoder expects [N, {CLINICAL_FEATURES}], got {shape:?}"
            ));
        }
        let h = g.relu(self.hidden.forward(g, p, x)?);
        let feat = self.out.forward(g, p, h)?;
        g.reshape(feat, &[shape[0], self.tokens, self.out.outputs / self.tokens])
    }
}

/// Multi-head self-attention over tokens with a residual connection and
/// layer normalisation: `LN(x + W_o · MHA(x))`.
///
/// Queries, keys and values are projected from `d_tok` up to `d`, which
/// the heads split evenly.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm: LayerNorm,
    heads: usize,
}

/// Output tokens and the per-head attention weights `[N, heads, t, t]`.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
}

impl SelfAttention {
    pub fn new(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, d_tok: usize, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("attention width {d} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(params, rng, &format!("{name}.q"), d_tok, d),
            k: Linear::new(params, rng, &format!("{name}.k"), d_tok, d),
            v: Linear::new(params, rng, &format!("{name}.v"), d_tok, d),
            o: Linear::new(params, rng, &format!("{name}.o"), d, d_tok),
            norm: LayerNorm::new(params, &format!("{name}.norm"), d_tok),
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `[N, t, d]` → `[N·heads, t, d/heads]`.
    fn split<T: Real>(&self, g: &Graph<T>, x: Var, n: usize, t: usize) -> Result<Var> {
        let d = g.shape(x)[2];
        let hd = d / self.heads;
        let x = g.reshape(x, &[n, t, self.heads, hd])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[n * self.heads, t, hd])
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Binder, x: Var) -> Result<AttentionOutput> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[2] != self.q.inputs {
            return Err(shape_err!(
                "self-attention expects [N, t, {}], got {shape:?}",
                self.q.inputs
            ));
        }
        let (n, t, d) = (shape[0], shape[1], self.q.outputs);
        let hd = d / self.heads;
        let q = self.split(g, self.q.forward(g, p, x)?, n, t)?;
        let k = self.split(g, self.k.forward(g, p, x)?, n, t)?;
        let v = self.split(g, self.v.forward(g, p, x)?, n, t)?;
        let scores = g.matmul(q, g.permute(k, &[0, 2, 1])?)?;
        let weights = g.softmax(g.scale(scores, 1.0 / (hd as f64).sqrt()), 2)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(g.reshape(ctx, &[n, self.heads, t, hd])?, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[n, t, d])?;
        let out = self.norm.forward(g, p, g.add(x, self.o.forward(g, p, ctx)?)?)?;
        Ok(AttentionOutput {
            out,
            weights: g.reshape(weights, &[n, self.heads, t, t])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn divisibility_is_checked() {
        let cfg = FeatureConfig { heads: 5, ..Default::default() };
        assert!(cfg.validate().is_err());
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SelfAttention::new(&mut params, &mut rng, "a", 8, 64, 5).is_err());
    }

    #[test]
    fn image_encoder_shape() {
        let cfg = FeatureConfig::default();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = ImageEncoder::new(&mut params, &mut rng, "mri", &cfg);
        let g = Graph::<f32>::new();
        let b = Binder::frozen(&params);
        let x = g.constant(Tensor::full([2, 1, 16, 16, 16], 0.3));
        let y = enc.forward(&g, &b, x).unwrap();
        assert_eq!(g.shape(y), vec![2, 8, 8]);
    }
}
