use itcfn::losses::{
    focal_loss, inverse_frequency_weights, sdm_loss, total_loss, total_loss_value, triple_loss, triple_loss_value,
};
use itcfn::tensor::{grad_check, Graph, Tensor, Var};
use proptest::prelude::*;

fn probs(g: &Graph<f64>, p1: &[f64]) -> Var {
    g.constant(Tensor::new(vec![p1.len(), 2], p1.iter().flat_map(|&p| [1.0 - p, p]).collect()).unwrap())
}

fn feats(g: &Graph<f64>, rows: &[[f64; 2]]) -> Var {
    g.constant(Tensor::new(vec![rows.len(), 2], rows.concat()).unwrap())
}

#[test]
fn focal_examples() {
    let g = Graph::<f64>::new();
    let v = g.value(focal_loss(&g, probs(&g, &[1.0, 0.0]), &[1, 0], 2.0, [1.0, 1.0]).unwrap()).item();
    assert_eq!(v, 0.0);
    let v = g.value(focal_loss(&g, probs(&g, &[0.9]), &[1], 2.0, [1.0, 1.0]).unwrap()).item();
    assert!((v - 1.0536e-3).abs() < 1e-7, "{v}");
    let p = [0.3, 0.8, 0.55];
    let ce = -((0.7f64).ln() + (0.8f64).ln() + (0.55f64).ln()) / 3.0;
    let v = g.value(focal_loss(&g, probs(&g, &p), &[0, 1, 1], 0.0, [1.0, 1.0]).unwrap()).item();
    assert!((v - ce).abs() < 1e-7);
    assert!(focal_loss(&g, probs(&g, &[1.2]), &[1], 2.0, [1.0, 1.0]).is_err());
}

#[test]
fn inverse_frequency_balances_classes() {
    let w = inverse_frequency_weights(&[0, 0, 0, 1]);
    assert_eq!(w, [4.0 / 6.0, 2.0]);
}

/// KL(p ‖ q) for one row, with the same ε floor on q.
fn row_kl(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter().zip(q).map(|(&pi, &qi)| pi * (pi.ln() - (qi + eps).ln())).sum()
}

#[test]
fn sdm_two_samples_by_hand() {
    let (tau, eps) = (0.5, 1e-8);
    let theta = std::f64::consts::PI / 3.0;
    let a = [[1.0, 0.0], [0.0, 2.0]];
    let b = [[3.0, 0.0], [theta.cos(), theta.sin()]];
    // cos(a_i, b_j): a0·b0 = 1, a0·b1 = cos θ, a1·b0 = 0, a1·b1 = sin θ
    let s = [[1.0, theta.cos()], [0.0, theta.sin()]];
    let soft = |r: [f64; 2]| {
        let e = [(r[0] / tau).exp(), (r[1] / tau).exp()];
        [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])]
    };
    let q = [[1.0, 0.0], [0.0, 1.0]];
    let ab = (row_kl(&soft(s[0]), &q[0], eps) + row_kl(&soft(s[1]), &q[1], eps)) / 2.0;
    let ba = (row_kl(&soft([s[0][0], s[1][0]]), &q[0], eps) + row_kl(&soft([s[0][1], s[1][1]]), &q[1], eps)) / 2.0;
    let g = Graph::<f64>::new();
    let v = g.value(sdm_loss(&g, feats(&g, &a), feats(&g, &b), &[0, 1], tau, eps).unwrap()).item();
    assert!((v - (ab + ba)).abs() < 1e-5, "{v} vs {}", ab + ba);
}

#[test]
fn sdm_rejects_degenerate_inputs() {
    let g = Graph::<f64>::new();
    let ok = feats(&g, &[[1.0, 0.0], [0.0, 1.0]]);
    let zero = feats(&g, &[[1.0, 0.0], [0.0, 0.0]]);
    let err = sdm_loss(&g, ok, zero, &[0, 1], 0.1, 1e-8).unwrap_err();
    assert!(err.to_string().contains("zero norm"), "{err}");
    let single = feats(&g, &[[1.0, 0.0]]);
    assert!(sdm_loss(&g, single, single, &[0], 0.1, 1e-8).is_err());
}

#[test]
fn combinations_in_graph_match_scalars() {
    let g = Graph::<f64>::new();
    let (mt, pt, mp) = (g.scalar(0.2), g.scalar(0.4), g.scalar(0.6));
    for lambda in [0.0, 0.5, 1.0] {
        let v = g.value(triple_loss(&g, mt, pt, mp, lambda).unwrap()).item();
        assert_eq!(v, triple_loss_value(0.2, 0.4, 0.6, lambda).unwrap());
    }
    let v = g.value(total_loss(&g, g.scalar(0.5), g.scalar(0.25), 1.0).unwrap()).item();
    assert_eq!(v, 0.75);
    assert!(triple_loss(&g, mt, pt, mp, 1.5).is_err());
    assert!(total_loss_value(0.5, 0.25, -1.0).is_err());
}

#[test]
fn losses_pass_grad_check_behind_a_feature_map() {
    let x = Tensor::new(vec![4, 3], (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect()).unwrap();
    let w = Tensor::new(vec![3, 3], vec![0.5, -0.2, 0.1, 0.3, 0.8, -0.4, -0.6, 0.2, 0.9]).unwrap();
    let labels = [0u8, 1, 1, 0];
    let err = grad_check(
        |g, x| {
            let h = g.tanh(g.matmul(x, g.constant(w.clone()))?);
            let two = g.reshape(g.matmul(h, g.constant(Tensor::new(vec![3, 2], vec![1.0, -1.0, 0.5, 0.2, -0.3, 0.7])?))?, &[4, 2])?;
            let p = g.softmax(two, 1)?;
            let focal = focal_loss(g, p, &labels, 2.0, [0.8, 1.2])?;
            let mt = sdm_loss(g, h, x, &labels, 0.3, 1e-8)?;
            let pt = sdm_loss(g, x, h, &labels, 0.3, 1e-8)?;
            let mp = sdm_loss(g, h, h, &labels, 0.3, 1e-8)?;
            total_loss(g, focal, triple_loss(g, mt, pt, mp, 0.4)?, 0.5)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-2, "{err}");
}

fn sdm_value(a: &[f64], b: &[f64], labels: &[u8], d: usize) -> f64 {
    let g = Graph::<f64>::new();
    let n = labels.len();
    let a = g.constant(Tensor::new(vec![n, d], a.to_vec()).unwrap());
    let b = g.constant(Tensor::new(vec![n, d], b.to_vec()).unwrap());
    g.value(sdm_loss(&g, a, b, labels, 0.1, 1e-8).unwrap()).item()
}

fn nonzero() -> impl Strategy<Value = f64> {
    prop_oneof![-3.0..-0.1f64, 0.1..3.0f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sdm_is_nonnegative(a in prop::collection::vec(nonzero(), 12), b in prop::collection::vec(nonzero(), 12),
                          labels in prop::collection::vec(0u8..2, 4)) {
        prop_assert!(sdm_value(&a, &b, &labels, 3) >= -1e-7);
    }

    #[test]
    fn sdm_ignores_row_scale(a in prop::collection::vec(nonzero(), 12), b in prop::collection::vec(nonzero(), 12),
                             labels in prop::collection::vec(0u8..2, 4), row in 0usize..4, c in 0.01..50.0f64) {
        let mut scaled = a.clone();
        for v in &mut scaled[row * 3..row * 3 + 3] {
            *v *= c;
        }
        let (x, y) = (sdm_value(&a, &b, &labels, 3), sdm_value(&scaled, &b, &labels, 3));
        prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{} vs {}", x, y);
    }

    #[test]
    fn focal_decreases_in_true_class_probability(p in 0.01..0.98f64, dp in 0.001..0.01f64,
                                                 other in 0.01..0.99f64, gamma in 0.0..5.0f64) {
        let g = Graph::<f64>::new();
        let f = |pt: f64| g.value(focal_loss(&g, probs(&g, &[pt, other]), &[1, 0], gamma, [1.0, 1.0]).unwrap()).item();
        prop_assert!(f(p + dp) < f(p));
    }

    #[test]
    fn combinations_are_affine(mt in 0.0..5.0f64, pt in 0.0..5.0f64, mp in 0.0..5.0f64,
                               lambda in 0.0..=1.0f64, focal in 0.0..5.0f64, alpha in 0.0..3.0f64) {
        let t = triple_loss_value(mt, pt, mp, lambda).unwrap();
        prop_assert!((t - (lambda * (mt + pt) / 2.0 + (1.0 - lambda) * mp)).abs() < 1e-12);
        let total = total_loss_value(focal, t, alpha).unwrap();
        prop_assert!((total - focal - alpha * t).abs() < 1e-12);
    }
}
