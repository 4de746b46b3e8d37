//! Triple-modal co-attention fusion, cross-concatenation, the classification
//! head, and the full fusion model tying them to the encoders.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureConfig, ImageEncoder, Modality, ModalityFeature, SelfAttention, TabularEncoder};
use crate::error::{shape_err, Error, Result};
use crate::nn::Linear;
use crate::synthdata::{ClinicalRecord, Standardizer, Volume, CLINICAL_FEATURES};
use crate::tensor::{read_checkpoint, write_checkpoint, Binder, Checkpoint, Graph, Params, Real, Tensor, Var};

/// How the three refined modality features reach the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Shared multi-modal query over per-modality keys/values, then
    /// cross-concatenation.
    CoAttention,
    /// Mean-pooled tokens of each modality, concatenated.
    Concat,
}

/// A shared query from all modalities attending to each modality's keys
/// and values.
#[derive(Clone, Debug)]
pub struct CoAttention {
    pub q: Linear,
    pub k: [Linear; 3],
    pub v: [Linear; 3],
}

pub struct CoAttentionOutput {
    /// `F^i_hidden`, each `[N, t, d_k]`.
    pub hidden: [Var; 3],
    /// Row-stochastic attention weights, each `[N, t, t]`.
    pub weights: [Var; 3],
    pub q_multi: Var,
    pub keys: [Var; 3],
    pub values: [Var; 3],
}

impl CoAttention {
    pub fn new(params: &mut Params, rng: &mut ChaCha8Rng, d_tok: usize, d_k: usize) -> Self {
        let per = |params: &mut Params, rng: &mut ChaCha8Rng, what: &str| {
            Modality::ALL.map(|m| Linear::new(params, rng, &format!("coattn.{what}_{}", m.name()), d_tok, d_k))
        };
        let q = Linear::new(params, rng, "coattn.q_multi", 3 * d_tok, d_k);
        let k = per(params, rng, "k");
        let v = per(params, rng, "v");
        Self { q, k, v }
    }

    pub fn d_k(&self) -> usize {
        self.q.outputs
    }

    /// `F^i = softmax(Q_multi · K_iᵀ / √d_k) · V_i` for features `[N, t, d_tok]`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Binder, feats: [Var; 3]) -> Result<CoAttentionOutput> {
        let shape = g.shape(feats[0]);
        for f in &feats[1..] {
            if g.shape(*f) != shape {
                return Err(shape_err!(
                    "co-attention features must share (t, d_tok): {:?} vs {shape:?}",
                    g.shape(*f)
                ));
            }
        }
        if shape.len() != 3 || shape[2] * 3 != self.q.inputs {
            return Err(shape_err!(
                "co-attention expects [N, t, {}] features, got {shape:?}",
                self.q.inputs / 3
            ));
        }
        let scale = 1.0 / (self.d_k() as f64).sqrt();
        let q_multi = self.q.forward(g, p, g.concat(&feats, 2)?)?;
        let mut keys = Vec::with_capacity(3);
        let mut values = Vec::with_capacity(3);
        let mut weights = Vec::with_capacity(3);
        let mut hidden = Vec::with_capacity(3);
        for i in 0..3 {
            let k = self.k[i].forward(g, p, feats[i])?;
            let v = self.v[i].forward(g, p, feats[i])?;
            let scores = g.scale(g.matmul(q_multi, g.permute(k, &[0, 2, 1])?)?, scale);
            let w = g.softmax(scores, 2)?;
            hidden.push(g.matmul(w, v)?);
            keys.push(k);
            values.push(v);
            weights.push(w);
        }
        let arr = |v: Vec<Var>| -> [Var; 3] { [v[0], v[1], v[2]] };
        Ok(CoAttentionOutput {
            hidden: arr(hidden),
            weights: arr(weights),
            q_multi,
            keys: arr(keys),
            values: arr(values),
        })
    }
}

/// Interleaves the flattened `F¹` and `F²` (`a1, b1, a2, b2, …`) and
/// appends the flattened `F³`; inputs `[N, …]`, output `[N, 3·L]`.
pub fn cross_concat<T: Real>(g: &Graph<T>, hidden: [Var; 3]) -> Result<Var> {
    let shape = g.shape(hidden[0]);
    for h in &hidden[1..] {
        if g.shape(*h) != shape {
            return Err(shape_err!(
                "cross_concat inputs must share a shape: {:?} vs {shape:?}",
                g.shape(*h)
            ));
        }
    }
    if shape.is_empty() {
        return Err(shape_err!("cross_concat needs a batch axis"));
    }
    let n = shape[0];
    let len: usize = shape[1..].iter().product();
    let a = g.reshape(hidden[0], &[n, len, 1])?;
    let b = g.reshape(hidden[1], &[n, len, 1])?;
    let ab = g.reshape(g.concat(&[a, b], 2)?, &[n, 2 * len])?;
    let c = g.reshape(hidden[2], &[n, len])?;
    g.concat(&[ab, c], 1)
}

/// Two dense layers with relu, then softmax over `[sMCI, pMCI]`.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub hidden: Linear,
    pub out: Linear,
}

impl Classifier {
    pub fn new(params: &mut Params, rng: &mut ChaCha8Rng, inputs: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::new(params, rng, "classifier.fc0", inputs, hidden),
            out: Linear::new(params, rng, "classifier.fc1", hidden, 2),
        }
    }

    /// Returns `(logits, probs)`, both `[N, 2]`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Binder, f_global: Var) -> Result<(Var, Var)> {
        let shape = g.shape(f_global);
        if shape.len() != 2 || shape[1] != self.hidden.inputs {
            return Err(shape_err!(
                "classifier expects [N, {}], got {shape:?}",
                self.hidden.inputs
            ));
        }
        let h = g.relu(self.hidden.forward(g, p, f_global)?);
        let logits = self.out.forward(g, p, h)?;
        Ok((logits, g.softmax(logits, 1)?))
    }
}

/// One batch of model inputs.
#[derive(Clone, Debug)]
pub struct FusionInputs {
    /// `[N, 1, D, H, W]`.
    pub mri: Tensor<f32>,
    /// `[N, 1, D, H, W]`, already imputed or zero-filled where missing.
    pub pet: Tensor<f32>,
    /// Standardised `[N, 7]`.
    pub clinical: Tensor<f32>,
}

pub struct FusionOutput {
    pub logits: Var,
    pub probs: Var,
    /// Self-attention outputs per modality (MRI, PET, clinical), `[N, t, d_tok]`.
    pub tokens: [Var; 3],
    /// The same features flattened to `[N, d]`, as used for alignment.
    pub flat: [Var; 3],
    pub co_attention: Option<CoAttentionOutput>,
}

/// Encoders, self-attention, fusion and classifier for stage 2.
pub struct FusionModel {
    pub features: FeatureConfig,
    pub fusion: Fusion,
    pub shape: [usize; 3],
    pub params: Params,
    /// Fitted on the training split; required for tabular encoding.
    pub standardizer: Option<Standardizer>,
    mri: ImageEncoder,
    pet: ImageEncoder,
    clinical: TabularEncoder,
    attention: [SelfAttention; 3],
    co_attention: CoAttention,
    classifier: Classifier,
}

impl FusionModel {
    pub fn new(features: FeatureConfig, fusion: Fusion, shape: [usize; 3], seed: u64) -> Result<Self> {
        features.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7463_6166);
        let mut params = Params::new();
        let d_tok = features.d_tok();
        let mri = ImageEncoder::new(&mut params, &mut rng, "enc_mri", &features);
        let pet = ImageEncoder::new(&mut params, &mut rng, "enc_pet", &features);
        let clinical = TabularEncoder::new(&mut params, &mut rng, "enc_clinical", &features);
        let mut attn = Vec::with_capacity(3);
        for m in Modality::ALL {
            attn.push(SelfAttention::new(
                &mut params,
                &mut rng,
                &format!("attn_{}", m.name()),
                d_tok,
                features.d,
                features.heads,
            )?);
        }
        let co_attention = CoAttention::new(&mut params, &mut rng, d_tok, features.d_k);
        let inputs = match fusion {
            Fusion::CoAttention => 3 * features.tokens * features.d_k,
            Fusion::Concat => 3 * d_tok,
        };
        let classifier = Classifier::new(&mut params, &mut rng, inputs, features.classifier_hidden);
        let [a0, a1, a2]: [SelfAttention; 3] = attn.try_into().map_err(|_| Error::Config("attention setup".into()))?;
        Ok(Self {
            features,
            fusion,
            shape,
            params,
            standardizer: None,
            mri,
            pet,
            clinical,
            attention: [a0, a1, a2],
            co_attention,
            classifier,
        })
    }

    pub fn co_attention_layer(&self) -> &CoAttention {
        &self.co_attention
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn attention(&self, m: Modality) -> &SelfAttention {
        &self.attention[m as usize]
    }

    pub fn encode_image_var<T: Real>(&self, g: &Graph<T>, p: &Binder, x: Var, which: Modality) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 5 || shape[2..] != self.shape {
            return Err(shape_err!(
                "expected [N, 1, {}, {}, {}] volumes, got {shape:?}",
                self.shape[0],
                self.shape[1],
                self.shape[2]
            ));
        }
        match which {
            Modality::Mri => self.mri.forward(g, p, x),
            Modality::Pet => self.pet.forward(g, p, x),
            Modality::Clinical => Err(Error::InvalidArgument("clinical data is not an image".into())),
        }
    }

    pub fn encode_tabular_var<T: Real>(&self, g: &Graph<T>, p: &Binder, x: Var) -> Result<Var> {
        self.clinical.forward(g, p, x)
    }

    /// Standardised clinical features for a batch of records.
    pub fn clinical_tensor<'a>(&self, records: impl IntoIterator<Item = &'a ClinicalRecord>) -> Result<Tensor<f32>> {
        let st = self
            .standardizer
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("standardizer has not been fitted".into()))?;
        let data: Vec<f32> = records.into_iter().flat_map(|r| st.apply(r)).collect();
        Tensor::new(vec![data.len() / CLINICAL_FEATURES, CLINICAL_FEATURES], data)
    }

    pub fn encode_image(&self, v: &Volume, which: Modality) -> Result<ModalityFeature> {
        let g = Graph::<f32>::new();
        let p = Binder::frozen(&self.params);
        let x = g.constant(v.to_tensor());
        let f = self.encode_image_var(&g, &p, x, which)?;
        single_feature(&g, f, which)
    }

    pub fn encode_tabular(&self, c: &ClinicalRecord) -> Result<ModalityFeature> {
        let g = Graph::<f32>::new();
        let p = Binder::frozen(&self.params);
        let x = g.constant(self.clinical_tensor([c])?);
        let f = self.encode_tabular_var(&g, &p, x)?;
        single_feature(&g, f, Modality::Clinical)
    }

    pub fn self_attention(&self, f: &ModalityFeature) -> Result<ModalityFeature> {
        let g = Graph::<f32>::new();
        let p = Binder::frozen(&self.params);
        let x = g.constant(f.tokens.clone().reshaped([1, f.t(), f.d_tok()])?);
        let out = self.attention(f.modality).forward(&g, &p, x)?.out;
        single_feature(&g, out, f.modality)
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, p: &Binder, inputs: &FusionInputs) -> Result<FusionOutput> {
        let n = inputs.mri.shape()[0];
        if inputs.pet.shape()[0] != n || inputs.clinical.shape()[0] != n {
            return Err(shape_err!("fusion inputs disagree on batch size"));
        }
        let mri = g.constant(inputs.mri.cast::<T>());
        let pet = g.constant(inputs.pet.cast::<T>());
        let clin = g.constant(inputs.clinical.cast::<T>());
        self.forward_vars(g, p, mri, pet, clin)
    }

    /// As [`FusionModel::forward`], with inputs already on the graph.
    pub fn forward_vars<T: Real>(&self, g: &Graph<T>, p: &Binder, mri: Var, pet: Var, clin: Var) -> Result<FusionOutput> {
        let n = g.shape(mri)[0];
        let raw = [
            self.encode_image_var(g, p, mri, Modality::Mri)?,
            self.encode_image_var(g, p, pet, Modality::Pet)?,
            self.encode_tabular_var(g, p, clin)?,
        ];
        let mut tokens = raw;
        for (i, t) in tokens.iter_mut().enumerate() {
            *t = self.attention[i].forward(g, p, raw[i])?.out;
        }
        let d = self.features.d;
        let flat = [
            g.reshape(tokens[0], &[n, d])?,
            g.reshape(tokens[1], &[n, d])?,
            g.reshape(tokens[2], &[n, d])?,
        ];
        let (f_global, co) = match self.fusion {
            Fusion::CoAttention => {
                let co = self.co_attention.forward(g, p, tokens)?;
                (cross_concat(g, co.hidden)?, Some(co))
            }
            Fusion::Concat => {
                let pooled = [
                    g.mean_axis(tokens[0], 1, false)?,
                    g.mean_axis(tokens[1], 1, false)?,
                    g.mean_axis(tokens[2], 1, false)?,
                ];
                (g.concat(&pooled, 1)?, None)
            }
        };
        let (logits, probs) = self.classifier.forward(g, p, f_global)?;
        Ok(FusionOutput {
            logits,
            probs,
            tokens,
            flat,
            co_attention: co,
        })
    }

    /// pMCI probabilities for a batch, without gradients.
    pub fn predict(&self, inputs: &FusionInputs) -> Result<Vec<f64>> {
        let g = Graph::<f32>::new();
        let p = Binder::frozen(&self.params);
        let out = self.forward(&g, &p, inputs)?;
        Ok(g.value(out.probs).data().chunks(2).map(|r| r[1] as f64).collect())
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut tensors = self.params.named_tensors("fusion.");
        if let Some(st) = &self.standardizer {
            tensors.extend(st.to_tensors());
        }
        let meta = FusionMetadata {
            kind: "fusion".into(),
            features: self.features,
            fusion: self.fusion,
            shape: self.shape,
            seed,
        };
        Checkpoint {
            tensors,
            metadata: Some(serde_json::to_string(&meta).expect("metadata serialises")),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, u64)> {
        let meta: FusionMetadata = serde_json::from_str(
            ckpt.metadata
                .as_deref()
                .ok_or_else(|| Error::Data("fusion checkpoint has no metadata record".into()))?,
        )?;
        if meta.kind != "fusion" {
            return Err(Error::Data(format!("expected a fusion checkpoint, found `{}`", meta.kind)));
        }
        let mut model = Self::new(meta.features, meta.fusion, meta.shape, meta.seed)?;
        model.params.load_named(&ckpt.tensors, "fusion.")?;
        if ckpt.get("standardizer.mean").is_some() {
            model.standardizer = Some(Standardizer::from_tensors(&ckpt.tensors)?);
        }
        Ok((model, meta.seed))
    }

    pub fn save(&self, path: impl AsRef<Path>, seed: u64) -> Result<()> {
        write_checkpoint(&self.to_checkpoint(seed), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, u64)> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct FusionMetadata {
    kind: String,
    features: FeatureConfig,
    fusion: Fusion,
    shape: [usize; 3],
    seed: u64,
}

fn single_feature<T: Real>(g: &Graph<T>, v: Var, modality: Modality) -> Result<ModalityFeature> {
    let t = g.value(v).cast::<f32>();
    let s = t.shape().to_vec();
    ModalityFeature::new(t.reshaped([s[1], s[2]])?, modality)
}
