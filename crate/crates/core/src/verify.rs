//! Named property checks backing the `verify` command: gradient checks,
//! oracle equivalences, loss identities and format round-trips.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoders::{FeatureConfig, SelfAttention};
use crate::error::{Error, Result};
use crate::losses::{focal_loss, sdm_loss, total_loss_value, triple_loss_value};
use crate::metrics::{auc, confusion_metrics};
use crate::mmg::{hybrid_loss, l1_loss, quantization_loss, quantize, Codebook, HybridLossWeights, Mmg, MmgConfig};
use crate::synthdata::{Volume, MANIFEST_COLUMNS};
use crate::tcaf::{cross_concat, Fusion, FusionModel};
use crate::tensor::{grad_check, Binder, Checkpoint, Graph, Params, Tensor, Var};
use crate::trainer::Adam;

/// Deliberate defects for checking that the suite catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Negates the focal loss.
    FocalSign,
}

impl FromStr for Mutation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "focal-sign" => Ok(Mutation::FocalSign),
            _ => Err(Error::Config(format!("unknown mutation `{s}` (known: focal-sign)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status}  {:<34} {}", self.name, self.detail)
    }
}

struct Ctx {
    mutation: Option<Mutation>,
}

impl Ctx {
    fn focal(&self, g: &Graph<f64>, probs: Var, labels: &[u8], gamma: f64, alpha: [f64; 2]) -> Result<Var> {
        let v = focal_loss(g, probs, labels, gamma, alpha)?;
        Ok(match self.mutation {
            Some(Mutation::FocalSign) => g.scale(v, -1.0),
            None => v,
        })
    }
}

type Check = fn(&Ctx) -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("conv3d_naive_loops", conv3d_naive_loops),
    ("conv_transpose3d_adjoint", conv_transpose3d_adjoint),
    ("softmax_normalised", softmax_normalised),
    ("softmax_shift_invariance", softmax_shift_invariance),
    ("grad_primitives", grad_primitives),
    ("grad_mmg_hybrid_loss", grad_mmg_hybrid_loss),
    ("grad_encoder_tcaf_focal", grad_encoder_tcaf_focal),
    ("grad_sdm_loss", grad_sdm_loss),
    ("quantize_brute_force", quantize_brute_force),
    ("quantize_tie_lowest_index", quantize_tie_lowest_index),
    ("straight_through_identity", straight_through_identity),
    ("quantization_loss_zero_on_codes", quantization_loss_zero_on_codes),
    ("hybrid_single_weight", hybrid_single_weight),
    ("self_attention_rows_stochastic", self_attention_rows_stochastic),
    ("co_attention_loop_oracle", co_attention_loop_oracle),
    ("cross_concat_interleave", cross_concat_interleave),
    ("focal_gamma0_cross_entropy", focal_gamma0_cross_entropy),
    ("focal_hand_value", focal_hand_value),
    ("focal_monotone", focal_monotone),
    ("sdm_zero_and_nonnegative", sdm_zero_and_nonnegative),
    ("sdm_scale_invariance", sdm_scale_invariance),
    ("triple_loss_endpoints", triple_loss_endpoints),
    ("total_loss_alpha_zero", total_loss_alpha_zero),
    ("auc_pairwise_oracle", auc_pairwise_oracle),
    ("auc_symmetry", auc_symmetry),
    ("confusion_hand_count", confusion_hand_count),
    ("adam_first_step", adam_first_step),
    ("volume_roundtrip", volume_roundtrip),
    ("checkpoint_roundtrip", checkpoint_roundtrip),
    ("manifest_column_order", manifest_column_order),
];

/// Names of every check, in run order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs the whole suite. A check that errors counts as failed.
pub fn run_suite(mutation: Option<Mutation>) -> Vec<CheckResult> {
    let ctx = Ctx { mutation };
    CHECKS
        .iter()
        .map(|(name, check)| {
            let (passed, detail) = match check(&ctx) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult { name, passed, detail }
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn within(err: f64, tol: f64) -> (bool, String) {
    (err <= tol, format!("max error {err:.3e} (tol {tol:.0e})"))
}

/// Weighted sum with fixed random coefficients, to reduce any output to a scalar.
fn project(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor(&mut rng(seed), &g.shape(y));
    Ok(g.sum(g.mul(y, g.constant(w))?))
}

fn conv3d_naive_loops(_: &Ctx) -> Result<(bool, String)> {
    let mut r = rng(1);
    let x = rand_tensor(&mut r, &[2, 2, 5, 4, 6]);
    let w = rand_tensor(&mut r, &[3, 2, 3, 3, 3]);
    let g = Graph::<f64>::new();
    let y = g.conv3d(g.constant(x.clone()), g.constant(w.clone()), None, 2, 1)?;
    let yv = g.value(y);
    let [n, c, d, h, wd] = [2, 2, 5, 4, 6];
    let s = yv.shape().to_vec();
    let mut err: f64 = 0.0;
    for i in 0..n {
        for f in 0..3 {
            for oz in 0..s[2] {
                for oy in 0..s[3] {
                    for ox in 0..s[4] {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (z, yy, xx) = (oz * 2 + kz, oy * 2 + ky, ox * 2 + kx);
                                        if z < 1 || yy < 1 || xx < 1 || z - 1 >= d || yy - 1 >= h || xx - 1 >= wd {
                                            continue;
                                        }
                                        let xi = (((i * c + ch) * d + z - 1) * h + yy - 1) * wd + xx - 1;
                                        let wi = (((f * c + ch) * 3 + kz) * 3 + ky) * 3 + kx;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        let yi = (((i * 3 + f) * s[2] + oz) * s[3] + oy) * s[4] + ox;
                        err = err.max((acc - yv.data()[yi]).abs());
                    }
                }
            }
        }
    }
    Ok(within(err, 1e-5))
}

fn conv_transpose3d_adjoint(_: &Ctx) -> Result<(bool, String)> {
    // ⟨conv(x, w), y⟩ = ⟨x, conv_transpose(y, w)⟩ with the kernel reinterpreted
    let mut r = rng(2);
    let x = rand_tensor(&mut r, &[1, 2, 6, 6, 6]);
    let w = rand_tensor(&mut r, &[3, 2, 3, 3, 3]);
    let g = Graph::<f64>::new();
    let cx = g.conv3d(g.constant(x.clone()), g.constant(w.clone()), None, 2, 1)?;
    let y = rand_tensor(&mut r, &g.shape(cx));
    let ty = g.conv_transpose3d(g.constant(y.clone()), g.constant(w), None, 2, 1, 1)?;
    let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    Ok(within((lhs - rhs).abs(), 1e-9))
}

fn softmax_normalised(_: &Ctx) -> Result<(bool, String)> {
    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[6, 9]);
    let g = Graph::<f32>::new();
    let s = g.softmax(g.constant(x.cast::<f32>().into_scaled(50.0)), 1)?;
    let err = g
        .value(s)
        .data()
        .chunks(9)
        .map(|row| (row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(within(err, 1e-6))
}

fn softmax_shift_invariance(_: &Ctx) -> Result<(bool, String)> {
    let mut r = rng(4);
    let x = rand_tensor(&mut r, &[4, 7]);
    let g = Graph::<f64>::new();
    let a = g.softmax(g.constant(x.clone()), 1)?;
    let b = g.softmax(g.add_scalar(g.constant(x), 3.7), 1)?;
    let err = g
        .value(a)
        .data()
        .iter()
        .zip(g.value(b).data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);
    Ok(within(err, 1e-6))
}

fn grad_primitives(_: &Ctx) -> Result<(bool, String)> {
    type F = Box<dyn Fn(&Graph<f64>, Var) -> Result<Var>>;
    let mut r = rng(5);
    let w_lin = rand_tensor(&mut r, &[3, 4]);
    let w_conv = rand_tensor(&mut r, &[2, 1, 3, 3, 3]);
    let w_t = rand_tensor(&mut r, &[1, 2, 3, 3, 3]);
    let gamma = rand_tensor(&mut r, &[4]);
    let other = rand_tensor(&mut r, &[2, 4]);
    let cases: Vec<(&str, Vec<usize>, F)> = vec![
        ("linear", vec![2, 4], {
            let w = w_lin.clone();
            Box::new(move |g, x| g.linear(x, g.constant(w.clone()), None))
        }),
        ("conv3d", vec![1, 1, 4, 4, 4], {
            let w = w_conv.clone();
            Box::new(move |g, x| g.conv3d(x, g.constant(w.clone()), None, 2, 1))
        }),
        ("conv_transpose3d", vec![1, 1, 2, 2, 2], {
            let w = w_t.clone();
            Box::new(move |g, x| g.conv_transpose3d(x, g.constant(w.clone()), None, 2, 1, 1))
        }),
        ("softmax", vec![2, 4], Box::new(|g, x| g.softmax(x, 1))),
        ("layer_norm", vec![2, 4], {
            let gm = gamma.clone();
            Box::new(move |g, x| g.layer_norm(x, g.constant(gm.clone()), g.constant(Tensor::zeros([4])), 1e-5))
        }),
        ("matmul", vec![2, 4], {
            let o = other.clone();
            Box::new(move |g, x| g.matmul(x, g.permute(g.constant(o.clone()), &[1, 0])?))
        }),
        ("tanh", vec![2, 4], Box::new(|g, x| Ok(g.tanh(x)))),
        ("sigmoid", vec![2, 4], Box::new(|g, x| Ok(g.sigmoid(x)))),
        ("exp", vec![2, 4], Box::new(|g, x| Ok(g.exp(x)))),
        ("log", vec![2, 4], Box::new(|g, x| Ok(g.log(g.add_scalar(g.square(x), 0.5))))),
        ("div", vec![2, 4], {
            let o = other.clone();
            Box::new(move |g, x| g.div(x, g.add_scalar(g.square(g.constant(o.clone())), 0.5)))
        }),
        ("avg_pool3d", vec![1, 1, 4, 4, 4], Box::new(|g, x| g.avg_pool3d(x, 2, 2))),
        ("global_avg_pool", vec![1, 2, 2, 2, 2], Box::new(|g, x| g.global_avg_pool(x))),
        ("mean_axis", vec![2, 4], Box::new(|g, x| g.mean_axis(x, 1, false))),
    ];
    let mut worst: (f64, &str) = (0.0, "");
    for (i, (name, shape, f)) in cases.iter().enumerate() {
        let x = rand_tensor(&mut r, shape);
        let err = grad_check(|g, x| project(g, f(g, x)?, 100 + i as u64), &x, 1e-3)?;
        if err > worst.0 {
            worst = (err, name);
        }
    }
    let (ok, detail) = within(worst.0, 1e-3);
    Ok((ok, format!("{} primitives, {detail}, worst {}", cases.len(), worst.1)))
}

fn grad_mmg_hybrid_loss(_: &Ctx) -> Result<(bool, String)> {
    let cfg = MmgConfig {
        codebook_size: 4,
        code_dim: 4,
        ..Default::default()
    };
    let mmg = Mmg::new(cfg, [8, 8, 8], 11)?;
    let mut r = rng(6);
    let x = rand_tensor(&mut r, &[1, 1, 8, 8, 8]);
    let y = rand_tensor(&mut r, &[1, 1, 8, 8, 8]);
    let weights = HybridLossWeights::new(1.0, 1.0, 0.1, 0.01)?;
    // differentiate with respect to the decoder's first kernel; the
    // quantization indices stay fixed under small perturbations there
    let target = mmg
        .generator
        .find("dec0.w")
        .ok_or_else(|| Error::Data("missing dec0.w".into()))?;
    let w0 = mmg.generator.get(target).value.cast::<f64>();
    let err = grad_check(
        |g, w| {
            let gen = Binder::frozen(&mmg.generator);
            gen.override_with(target, w);
            let disc = Binder::frozen(&mmg.discriminator);
            let perc = Binder::frozen(&mmg.perceptual);
            let pass = mmg.generate(g, &gen, g.constant(x.clone()))?;
            let yv = g.constant(y.clone());
            let per = mmg.perceptual_loss(g, &perc, pass.y_gen, yv)?;
            let fake = mmg.discriminate(g, &disc, pass.y_gen)?;
            let l = hybrid_loss(g, yv, pass.y_gen, pass.z_hat, pass.quantized.z_q, per, fake, 0.25, &weights)?;
            Ok(l.total)
        },
        &w0,
        1e-3,
    )?;
    Ok(within(err, 1e-2))
}

fn small_fusion(fusion: Fusion) -> Result<FusionModel> {
    let features = FeatureConfig {
        tokens: 2,
        d: 8,
        heads: 2,
        d_k: 4,
        classifier_hidden: 6,
    };
    FusionModel::new(features, fusion, [8, 8, 8], 21)
}

fn grad_encoder_tcaf_focal(ctx: &Ctx) -> Result<(bool, String)> {
    let model = small_fusion(Fusion::CoAttention)?;
    let mut r = rng(7);
    let mri = rand_tensor(&mut r, &[2, 1, 8, 8, 8]).into_scaled(0.5).into_shifted(0.6);
    let pet = rand_tensor(&mut r, &[2, 1, 8, 8, 8]).into_scaled(0.5).into_shifted(0.6);
    let clin = rand_tensor(&mut r, &[2, 7]);
    let err = grad_check(
        |g, c| {
            let p = Binder::frozen(&model.params);
            let out = model.forward_vars(g, &p, g.constant(mri.clone()), g.constant(pet.clone()), c)?;
            ctx.focal(g, out.probs, &[0, 1], 2.0, [1.0, 1.0])
        },
        &clin,
        1e-3,
    )?;
    Ok(within(err, 1e-2))
}

fn grad_sdm_loss(_: &Ctx) -> Result<(bool, String)> {
    let mut r = rng(8);
    let a = rand_tensor(&mut r, &[4, 5]);
    let b = rand_tensor(&mut r, &[4, 5]);
    let err = grad_check(|g, x| sdm_loss(g, x, g.constant(b.clone()), &[0, 1, 1, 0], 0.5, 1e-8), &a, 1e-3)?;
    Ok(within(err, 1e-2))
}

fn brute_nearest(codes: &Codebook, v: &[f32]) -> usize {
    let mut best = (0, f64::INFINITY);
    for m in 0..codes.size() {
        let d: f64 = codes.code(m).iter().zip(v).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
        if d < best.1 {
            best = (m, d);
        }
    }
    best.0
}

fn quantize_brute_force(_: &Ctx) -> Result<(bool, String)> {
    let mut r = rng(9);
    let codes = Codebook::new(rand_tensor(&mut r, &[16, 3]).cast())?;
    let z = rand_tensor(&mut r, &[4, 3, 5, 5, 1]).cast::<f32>();
    let (_, idx) = codes.quantize(&z)?;
    let mut mismatches = 0;
    for (k, &m) in idx.iter().enumerate() {
        let (i, s) = (k / 25, k % 25);
        let v: Vec<f32> = (0..3).map(|c| z.data()[(i * 3 + c) * 25 + s]).collect();
        mismatches += usize::from(brute_nearest(&codes, &v) != m);
    }
    Ok((mismatches == 0, format!("{} positions, {mismatches} mismatches", idx.len())))
}

fn quantize_tie_lowest_index(_: &Ctx) -> Result<(bool, String)> {
    let codes = Codebook::new(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0])?)?;
    let (_, idx) = codes.quantize(&Tensor::new(vec![1, 2, 1, 1, 1], vec![0.5, 0.5])?)?;
    Ok((idx == [0], format!("index {:?}", idx)))
}

fn straight_through_identity(_: &Ctx) -> Result<(bool, String)> {
    let mut r = rng(10);
    let g = Graph::<f64>::new();
    let z = g.param(rand_tensor(&mut r, &[1, 3, 2, 2, 1]));
    let codes = g.constant(rand_tensor(&mut r, &[5, 3]));
    let q = quantize(&g, z, codes)?;
    let w = g.constant(rand_tensor(&mut r, &[1, 3, 2, 2, 1]));
    let loss = g.sum(g.mul(g.square(q.z_st), w)?);
    let grads = g.backward(loss)?;
    let (gz, gq) = (grads.get(z).unwrap_or(&[]), grads.get(q.z_st).unwrap_or(&[]));
    let same = !gz.is_empty() && gz == gq;
    Ok((same, format!("{} gradient entries compared", gz.len())))
}

fn quantization_loss_zero_on_codes(_: &Ctx) -> Result<(bool, String)> {
    let g = Graph::<f64>::new();
    let codes = g.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, -1.0])?);
    // positions already equal to codes 1, 0, 1
    let z = g.param(Tensor::new(vec![1, 2, 3, 1, 1], vec![2.0, 0.0, 2.0, -1.0, 1.0, -1.0])?);
    let q = quantize(&g, z, codes)?;
    let v = g.value(quantization_loss(&g, z, q.z_q, 0.25)?).item();
    Ok((v == 0.0 && q.indices == [1, 0, 1], format!("loss {v}, indices {:?}", q.indices)))
}

fn hybrid_single_weight(_: &Ctx) -> Result<(bool, String)> {
    let mut r = rng(11);
    let g = Graph::<f64>::new();
    let yt = g.constant(rand_tensor(&mut r, &[2, 1, 4, 4, 4]));
    let yg = g.constant(rand_tensor(&mut r, &[2, 1, 4, 4, 4]));
    let zh = g.constant(rand_tensor(&mut r, &[2, 3, 1, 1, 1]));
    let zq = g.constant(rand_tensor(&mut r, &[2, 3, 1, 1, 1]));
    let per = g.scalar(0.37);
    let disc = g.constant(rand_tensor(&mut r, &[2, 1, 1, 1, 1]));
    let w = HybridLossWeights::new(0.7, 0.3, 0.0, 0.0)?;
    let l = hybrid_loss(&g, yt, yg, zh, zq, per, disc, 0.25, &w)?;
    // components recomputed on plain slices
    let (a, b) = (g.value(yg), g.value(yt));
    let l1 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64;
    let (h, q) = (g.value(zh), g.value(zq));
    let mse = h.data().iter().zip(q.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / h.numel() as f64;
    let expected = 0.7 * l1 + 0.3 * (mse + 0.25 * mse);
    let err = (g.value(l.total).item() - expected).abs();
    let l1_only = HybridLossWeights::new(1.0, 0.0, 0.0, 0.0)?;
    let single = hybrid_loss(&g, yt, yg, zh, zq, per, disc, 0.25, &l1_only)?;
    let err = err.max((g.value(single.total).item() - g.value(l1_loss(&g, yg, yt)?).item()).abs());
    Ok(within(err, 1e-12))
}

fn self_attention_rows_stochastic(_: &Ctx) -> Result<(bool, String)> {
    let mut params = Params::new();
    let attn = SelfAttention::new(&mut params, &mut rng(12), "a", 8, 64, 4)?;
    let g = Graph::<f32>::new();
    let x = g.constant(rand_tensor(&mut rng(13), &[3, 8, 8]).cast());
    let out = attn.forward(&g, &Binder::frozen(&params), x)?;
    let err = g
        .value(out.weights)
        .data()
        .chunks(8)
        .map(|row| (row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(within(err, 1e-6))
}

fn co_attention_loop_oracle(_: &Ctx) -> Result<(bool, String)> {
    let model = small_fusion(Fusion::CoAttention)?;
    let layer = model.co_attention_layer();
    let g = Graph::<f64>::new();
    let p = Binder::frozen(&model.params);
    let mut r = rng(14);
    let feats: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(&mut r, &[2, 2, 4])).collect();
    let vars = [g.constant(feats[0].clone()), g.constant(feats[1].clone()), g.constant(feats[2].clone())];
    let out = layer.forward(&g, &p, vars)?;
    let w = |id| model.params.get(id).value.cast::<f64>();
    let apply = |x: &[f64], lin: &crate::nn::Linear| -> Vec<f64> {
        let (wt, bt) = (w(lin.w), w(lin.b));
        (0..lin.outputs)
            .map(|o| bt.data()[o] + (0..lin.inputs).map(|i| wt.data()[o * lin.inputs + i] * x[i]).sum::<f64>())
            .collect()
    };
    let (n, t, dt, dk) = (2, 2, 4, layer.d_k());
    let mut err: f64 = 0.0;
    for s in 0..n {
        let tok = |m: usize, j: usize| &feats[m].data()[(s * t + j) * dt..(s * t + j + 1) * dt];
        for m in 0..3 {
            let hidden = g.value(out.hidden[m]);
            for i in 0..t {
                let qin: Vec<f64> = (0..3).flat_map(|mm| tok(mm, i).to_vec()).collect();
                let q = apply(&qin, &layer.q);
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let k = apply(tok(m, j), &layer.k[m]);
                        q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for c in 0..dk {
                    let mut acc = 0.0;
                    for j in 0..t {
                        acc += (scores[j] - mx).exp() / z * apply(tok(m, j), &layer.v[m])[c];
                    }
                    err = err.max((acc - hidden.data()[(s * t + i) * dk + c]).abs());
                }
            }
        }
    }
    Ok(within(err, 1e-5))
}

fn cross_concat_interleave(_: &Ctx) -> Result<(bool, String)> {
    let g = Graph::<f64>::new();
    let mk = |v: [f64; 2]| Tensor::new(vec![1, 2], v.to_vec()).map(|t| g.constant(t));
    let out = cross_concat(&g, [mk([1.0, 2.0])?, mk([3.0, 4.0])?, mk([5.0, 6.0])?])?;
    let v = g.value(out).data().to_vec();
    Ok((v == [1.0, 3.0, 2.0, 4.0, 5.0, 6.0], format!("{v:?}")))
}

fn probs_var(g: &Graph<f64>, p1: &[f64]) -> Result<Var> {
    let data = p1.iter().flat_map(|&p| [1.0 - p, p]).collect();
    Ok(g.constant(Tensor::new(vec![p1.len(), 2], data)?))
}

fn focal_gamma0_cross_entropy(ctx: &Ctx) -> Result<(bool, String)> {
    let p1 = [0.2, 0.7, 0.9, 0.45];
    let labels = [0u8, 1, 0, 1];
    let g = Graph::<f64>::new();
    let v = g.value(ctx.focal(&g, probs_var(&g, &p1)?, &labels, 0.0, [1.0, 1.0])?).item();
    let ce = -p1
        .iter()
        .zip(&labels)
        .map(|(&p, &l)| if l == 1 { p.ln() } else { (1.0 - p).ln() })
        .sum::<f64>()
        / 4.0;
    Ok(within((v - ce).abs(), 1e-7))
}

fn focal_hand_value(ctx: &Ctx) -> Result<(bool, String)> {
    let g = Graph::<f64>::new();
    let v = g.value(ctx.focal(&g, probs_var(&g, &[0.9])?, &[1], 2.0, [1.0, 1.0])?).item();
    let expected = 0.01 * -(0.9f64.ln());
    Ok(within((v - expected).abs(), 1e-12))
}

fn focal_monotone(ctx: &Ctx) -> Result<(bool, String)> {
    let g = Graph::<f64>::new();
    let mut prev = f64::INFINITY;
    for k in 1..20 {
        let p = k as f64 / 20.0;
        let v = g.value(ctx.focal(&g, probs_var(&g, &[p, 0.3])?, &[1, 0], 2.0, [1.0, 1.0])?).item();
        if v >= prev {
            return Ok((false, format!("loss rose at p_t = {p}")));
        }
        prev = v;
    }
    Ok((true, "strictly decreasing over 19 points".into()))
}

fn sdm_zero_and_nonnegative(_: &Ctx) -> Result<(bool, String)> {
    // one class and identical rows: p and q are both uniform
    let g = Graph::<f64>::new();
    let f = g.constant(Tensor::new(vec![3, 2], vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8])?);
    let zero = g.value(sdm_loss(&g, f, f, &[1, 1, 1], 0.1, 1e-8)?).item();
    let mut r = rng(15);
    let mut min = f64::INFINITY;
    for _ in 0..10 {
        let a = g.constant(rand_tensor(&mut r, &[6, 4]));
        let b = g.constant(rand_tensor(&mut r, &[6, 4]));
        min = min.min(g.value(sdm_loss(&g, a, b, &[0, 1, 1, 0, 1, 0], 0.1, 1e-8)?).item());
    }
    Ok((zero.abs() < 1e-7 && min >= -1e-7, format!("zero case {zero:.2e}, min over random {min:.3e}")))
}

fn sdm_scale_invariance(_: &Ctx) -> Result<(bool, String)> {
    let mut r = rng(16);
    let a = rand_tensor(&mut r, &[5, 3]);
    let b = rand_tensor(&mut r, &[5, 3]);
    let mut scaled = a.clone();
    for v in &mut scaled.data_mut()[3..6] {
        *v *= 7.5;
    }
    let labels = [0, 1, 0, 1, 1];
    let g = Graph::<f64>::new();
    let x = g.value(sdm_loss(&g, g.constant(a), g.constant(b.clone()), &labels, 0.1, 1e-8)?).item();
    let y = g.value(sdm_loss(&g, g.constant(scaled), g.constant(b), &labels, 0.1, 1e-8)?).item();
    Ok(within((x - y).abs(), 1e-9))
}

fn triple_loss_endpoints(_: &Ctx) -> Result<(bool, String)> {
    let (mt, pt, mp) = (0.2, 0.4, 0.6);
    let e1 = (triple_loss_value(mt, pt, mp, 1.0)? - (mt + pt) / 2.0).abs();
    let e0 = (triple_loss_value(mt, pt, mp, 0.0)? - mp).abs();
    let eh = (triple_loss_value(mt, pt, mp, 0.5)? - 0.45).abs();
    Ok(within(e1.max(e0).max(eh), 1e-12))
}

fn total_loss_alpha_zero(_: &Ctx) -> Result<(bool, String)> {
    let e0 = (total_loss_value(0.5, 0.25, 0.0)? - 0.5).abs();
    let e1 = (total_loss_value(0.5, 0.25, 1.0)? - 0.75).abs();
    let gap1 = total_loss_value(0.5, 0.25, 0.3)? - 0.5;
    let gap2 = total_loss_value(0.5, 0.25, 0.6)? - 0.5;
    Ok(within(e0.max(e1).max((gap2 - 2.0 * gap1).abs()), 1e-12))
}

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn auc_pairwise_oracle(_: &Ctx) -> Result<(bool, String)> {
    let mut r = rng(17);
    let labels: Vec<u8> = (0..30).map(|i| u8::from(i % 3 == 0)).collect();
    // coarse grid so ties occur
    let scores: Vec<f64> = (0..30).map(|_| (r.random_range(0..8) as f64) / 8.0).collect();
    let a = auc(&scores, &labels)?;
    let b = pairwise_auc(&scores, &labels);
    Ok((a == b, format!("rank {a} vs pairwise {b}")))
}

fn auc_symmetry(_: &Ctx) -> Result<(bool, String)> {
    let mut r = rng(18);
    let labels: Vec<u8> = (0..25).map(|i| u8::from(i % 2 == 0)).collect();
    let scores: Vec<f64> = (0..25).map(|_| (r.random_range(0..6) as f64) / 5.0).collect();
    let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
    let sum = auc(&scores, &labels)? + auc(&neg, &labels)?;
    Ok((sum == 1.0, format!("sum {sum}")))
}

fn confusion_hand_count(_: &Ctx) -> Result<(bool, String)> {
    let m = confusion_metrics(&[1, 1, 0, 0], &[1, 0, 1, 0])?;
    let ok = (m.tp, m.fp, m.fn_, m.tn) == (1, 1, 1, 1) && [m.acc, m.sen, m.spe, m.f1] == [0.5; 4];
    Ok((ok, format!("tp {} fp {} fn {} tn {}", m.tp, m.fp, m.fn_, m.tn)))
}

fn adam_first_step(_: &Ctx) -> Result<(bool, String)> {
    let mut params = Params::new();
    let id = params.add("w", Tensor::new(vec![1], vec![0.0])?);
    let mut adam = Adam::new(&params);
    adam.update(&mut params, &[(id, Tensor::new(vec![1], vec![1.0])?)], 0.1)?;
    let moved = -params.get(id).value.data()[0] as f64;
    Ok(within((moved - 0.1).abs(), 1e-6))
}

fn volume_roundtrip(_: &Ctx) -> Result<(bool, String)> {
    let mut r = rng(19);
    let v = Volume::new([16, 16, 16], rand_tensor(&mut r, &[4096]).cast::<f32>().into_data())?;
    let back = Volume::from_bytes(&v.to_bytes(), std::path::Path::new("<memory>"))?;
    let same = back.shape() == v.shape() && back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((same, "16³ volume".into()))
}

fn checkpoint_roundtrip(_: &Ctx) -> Result<(bool, String)> {
    let mmg = Mmg::new(MmgConfig::default(), [16, 16, 16], 3)?;
    let ckpt = mmg.to_checkpoint(3);
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("<memory>"))?;
    let (restored, _) = Mmg::from_checkpoint(&back)?;
    let same = back.to_bytes() == bytes && restored.checksum() == mmg.checksum();
    Ok((same, format!("{} tensors", ckpt.tensors.len())))
}

fn manifest_column_order(_: &Ctx) -> Result<(bool, String)> {
    let expected = [
        "subject_id",
        "label",
        "has_pet",
        "mri_path",
        "pet_path",
        "age",
        "sex",
        "education",
        "apoe4",
        "ptau",
        "ttau",
        "fdg_summary",
        "latent_s_debug",
    ];
    Ok((MANIFEST_COLUMNS == expected, MANIFEST_COLUMNS.join(",")))
}

trait TensorExt {
    fn into_scaled(self, c: f64) -> Self;
    fn into_shifted(self, c: f64) -> Self;
}

impl<T: crate::tensor::Real> TensorExt for Tensor<T> {
    fn into_scaled(mut self, c: f64) -> Self {
        for v in self.data_mut() {
            *v = *v * T::lit(c);
        }
        self
    }

    fn into_shifted(mut self, c: f64) -> Self {
        for v in self.data_mut() {
            *v = *v + T::lit(c);
        }
        self
    }
}
