//! Classification-side objectives: focal loss, similarity-distribution
//! matching (SDM) between modality pairs, their triple combination and the
//! total training objective.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Focusing exponent.
    pub gamma: f64,
    /// Per-class focal weights `[sMCI, pMCI]`; `None` means inverse class
    /// frequency on the training fold.
    pub alpha_focal: Option<[f64; 2]>,
    /// SDM softmax temperature.
    pub tau: f64,
    /// Weight of the imaging–tabular pairs in the triple loss.
    pub lambda: f64,
    /// Weight of the triple alignment loss in the total objective.
    pub alpha_total: f64,
    /// Smoothing added inside the log of the label-match distribution.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha_focal: None,
            tau: 0.1,
            lambda: 0.5,
            alpha_total: 0.1,
            epsilon: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be ≥ 0, got {}", self.gamma));
        }
        if !(self.alpha_total >= 0.0) {
            return bad(format!("alpha_total must be ≥ 0, got {}", self.alpha_total));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.epsilon >= 0.0) {
            return bad(format!("epsilon must be ≥ 0, got {}", self.epsilon));
        }
        if let Some(a) = self.alpha_focal {
            if a.iter().any(|&v| !(v >= 0.0)) {
                return bad(format!("alpha_focal weights must be ≥ 0, got {a:?}"));
            }
        }
        Ok(())
    }
}

/// Inverse-frequency class weights `n / (2·n_c)`; a missing class gets 1.
pub fn inverse_frequency_weights(labels: &[u8]) -> [f64; 2] {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = n - pos;
    let w = |c: f64| if c > 0.0 { n / (2.0 * c) } else { 1.0 };
    [w(neg), w(pos)]
}

fn one_hot<T: Real>(labels: &[u8]) -> Tensor<T> {
    let mut data = vec![T::zero(); labels.len() * 2];
    for (i, &l) in labels.iter().enumerate() {
        data[i * 2 + l as usize] = T::one();
    }
    Tensor::new(vec![labels.len(), 2], data).expect("non-empty labels")
}

fn check_labels(labels: &[u8]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty label batch".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("labels must be 0 or 1, found {l}")));
    }
    Ok(())
}

/// Mean over the batch of `−α_y · (1 − p_y)^γ · ln p_y`.
///
/// `alpha` are the per-class weights (see [`LossConfig::alpha_focal`]).
pub fn focal_loss<T: Real>(
    g: &Graph<T>,
    probs: Var,
    labels: &[u8],
    gamma: f64,
    alpha: [f64; 2],
) -> Result<Var> {
    check_labels(labels)?;
    let shape = g.shape(probs);
    if shape != [labels.len(), 2] {
        return Err(shape_err!(
            "focal_loss expects probabilities [{}, 2], got {shape:?}",
            labels.len()
        ));
    }
    if g.value(probs)
        .data()
        .iter()
        .any(|&p| !(p >= T::zero() && p <= T::one()))
    {
        return Err(Error::InvalidArgument("focal_loss probabilities must lie in [0, 1]".into()));
    }
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be ≥ 0, got {gamma}")));
    }
    let mask = g.constant(one_hot(labels));
    let pt = g.sum_axis(g.mul(probs, mask)?, 1, false)?;
    let log_pt = g.log(pt);
    let weights = Tensor::new(
        vec![labels.len()],
        labels.iter().map(|&l| T::lit(-alpha[l as usize])).collect(),
    )?;
    let mut per_sample = g.mul(log_pt, g.constant(weights))?;
    if gamma != 0.0 {
        let focus = g.powf(g.add_scalar(g.scale(pt, -1.0), 1.0), gamma);
        per_sample = g.mul(per_sample, focus)?;
    }
    Ok(g.mean(per_sample))
}

/// Row-wise L2 normalisation, `x / exp(½·ln Σx²)`.
fn normalize_rows<T: Real>(g: &Graph<T>, x: Var) -> Result<Var> {
    let sq = g.sum_axis(g.square(x), 1, true)?;
    let norm = g.exp(g.scale(g.log(sq), 0.5));
    g.div(x, norm)
}

/// Mean KL divergence between the rows of `probs` and the fixed
/// label-match distribution, using `ln(q + ε)`.
fn kl_to_label_match<T: Real>(g: &Graph<T>, probs: Var, labels: &[u8], epsilon: f64) -> Result<Var> {
    let n = labels.len();
    let mut log_q = Vec::with_capacity(n * n);
    for &yi in labels {
        let same = labels.iter().filter(|&&yj| yj == yi).count() as f64;
        for &yj in labels {
            let q = if yi == yj { 1.0 / same } else { 0.0 };
            log_q.push(T::lit((q + epsilon).ln()));
        }
    }
    let log_q = g.constant(Tensor::new(vec![n, n], log_q)?);
    let diff = g.sub(g.log(probs), log_q)?;
    let kl = g.sum(g.mul(probs, diff)?);
    Ok(g.scale(kl, 1.0 / n as f64))
}

/// Similarity-distribution matching between paired features `a[i]`, `b[i]`.
///
/// For each row `i`, `p_i = softmax_j(cos(a_i, b_j) / τ)` is pulled towards
/// the normalised label-match distribution `q_i`; the KL divergences of the
/// a→b and b→a directions are added.
pub fn sdm_loss<T: Real>(
    g: &Graph<T>,
    a: Var,
    b: Var,
    labels: &[u8],
    tau: f64,
    epsilon: f64,
) -> Result<Var> {
    check_labels(labels)?;
    let n = labels.len();
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb || sa[0] != n {
        return Err(shape_err!(
            "sdm_loss expects two [{n}, d] feature matrices, got {sa:?} and {sb:?}"
        ));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("sdm_loss needs at least two samples".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    for (name, v) in [("first", a), ("second", b)] {
        let t = g.value(v);
        if !t.is_finite() {
            return Err(Error::InvalidArgument(format!("sdm_loss {name} features are not finite")));
        }
        if let Some(row) = t.data().chunks(sa[1]).position(|r| r.iter().all(|&x| x == T::zero())) {
            return Err(Error::InvalidArgument(format!(
                "sdm_loss {name} feature row {row} has zero norm"
            )));
        }
    }
    let an = normalize_rows(g, a)?;
    let bn = normalize_rows(g, b)?;
    let sim = g.matmul(an, g.permute(bn, &[1, 0])?)?;
    let logits = g.scale(sim, 1.0 / tau);
    let p_ab = g.softmax(logits, 1)?;
    let p_ba = g.softmax(g.permute(logits, &[1, 0])?, 1)?;
    let ab = kl_to_label_match(g, p_ab, labels, epsilon)?;
    let ba = kl_to_label_match(g, p_ba, labels, epsilon)?;
    g.add(ab, ba)
}

fn check_scalar<T: Real>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    if g.value(v).numel() != 1 {
        return Err(shape_err!("{what} must be a scalar, got {:?}", g.shape(v)));
    }
    Ok(())
}

/// `λ·(L_mt + L_pt)/2 + (1 − λ)·L_mp`.
pub fn triple_loss<T: Real>(g: &Graph<T>, mt: Var, pt: Var, mp: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    for (v, what) in [(mt, "L_mt"), (pt, "L_pt"), (mp, "L_mp")] {
        check_scalar(g, v, what)?;
    }
    let tabular = g.scale(g.add(mt, pt)?, lambda / 2.0);
    g.add(tabular, g.scale(mp, 1.0 - lambda))
}

/// `L_focal + α·L_triple`.
pub fn total_loss<T: Real>(g: &Graph<T>, focal: Var, triple: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be ≥ 0, got {alpha}")));
    }
    check_scalar(g, focal, "L_focal")?;
    check_scalar(g, triple, "L_triple")?;
    g.add(focal, g.scale(triple, alpha))
}

/// Plain-number forms of the scalar combinations, evaluated on a graph so
/// they share the differentiable code path.
pub fn triple_loss_value(mt: f64, pt: f64, mp: f64, lambda: f64) -> Result<f64> {
    let g = Graph::<f64>::new();
    let v = triple_loss(&g, g.scalar(mt), g.scalar(pt), g.scalar(mp), lambda)?;
    Ok(g.value(v).item())
}

pub fn total_loss_value(focal: f64, triple: f64, alpha: f64) -> Result<f64> {
    let g = Graph::<f64>::new();
    let v = total_loss(&g, g.scalar(focal), g.scalar(triple), alpha)?;
    Ok(g.value(v).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(g: &Graph<f64>, rows: &[[f64; 2]]) -> Var {
        g.constant(Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap())
    }

    #[test]
    fn focal_reduces_to_cross_entropy() {
        let g = Graph::<f64>::new();
        let rows = [[0.3, 0.7], [0.8, 0.2], [0.55, 0.45]];
        let labels = [1u8, 0, 1];
        let p = probs(&g, &rows);
        let fl = g.value(focal_loss(&g, p, &labels, 0.0, [1.0, 1.0]).unwrap()).item();
        let ce = -(0.7f64.ln() + 0.8f64.ln() + 0.45f64.ln()) / 3.0;
        assert!((fl - ce).abs() < 1e-7);
    }

    #[test]
    fn focal_zero_when_confident_and_hand_value() {
        let g = Graph::<f64>::new();
        let p = probs(&g, &[[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(g.value(focal_loss(&g, p, &[1, 0], 2.0, [1.0, 1.0]).unwrap()).item(), 0.0);
        let p = probs(&g, &[[0.1, 0.9]]);
        let v = g.value(focal_loss(&g, p, &[1], 2.0, [1.0, 1.0]).unwrap()).item();
        assert!((v - 1.0536e-3).abs() < 1e-7, "{v}");
    }

    #[test]
    fn focal_rejects_invalid_probabilities() {
        let g = Graph::<f64>::new();
        let p = probs(&g, &[[1.2, -0.2]]);
        assert!(focal_loss(&g, p, &[0], 2.0, [1.0, 1.0]).is_err());
    }

    #[test]
    fn triple_and_total_arithmetic() {
        assert!((triple_loss_value(0.2, 0.4, 0.6, 1.0).unwrap() - 0.3).abs() < 1e-12);
        assert!((triple_loss_value(0.2, 0.4, 0.6, 0.0).unwrap() - 0.6).abs() < 1e-12);
        assert!((triple_loss_value(0.2, 0.4, 0.6, 0.5).unwrap() - 0.45).abs() < 1e-12);
        assert!(triple_loss_value(0.2, 0.4, 0.6, 1.5).is_err());
        assert_eq!(total_loss_value(0.5, 0.25, 0.0).unwrap(), 0.5);
        assert_eq!(total_loss_value(0.5, 0.25, 1.0).unwrap(), 0.75);
        assert!(total_loss_value(0.5, 0.25, -0.1).is_err());
    }

    #[test]
    fn inverse_frequency() {
        let w = inverse_frequency_weights(&[0, 0, 0, 1]);
        assert_eq!(w, [4.0 / 6.0, 2.0]);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { lambda: 1.1, ..Default::default() }.validate().is_err());
        assert!(LossConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { gamma: -1.0, ..Default::default() }.validate().is_err());
    }
}
