use itcfn::metrics::{auc, confusion_metrics, threshold};
use proptest::prelude::*;

fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_examples() {
    assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(auc(&[0.4; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
    let err = auc(&[0.1, 0.2], &[1, 1]).unwrap_err();
    assert!(err.to_string().contains("both classes"), "{err}");
}

#[test]
fn confusion_examples() {
    let m = confusion_metrics(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap();
    assert_eq!([m.acc, m.sen, m.spe, m.f1], [1.0; 4]);
    let m = confusion_metrics(&[0; 4], &[1, 0, 1, 0]).unwrap();
    assert_eq!([m.acc, m.sen, m.spe, m.f1], [0.5, 0.0, 1.0, 0.0]);
    assert!(confusion_metrics(&[], &[]).is_err());
    assert_eq!(threshold(&[0.49, 0.5, 0.51]), [0, 1, 1]);
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (4usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..10).prop_map(|k| k as f64 / 10.0), n),
            prop::collection::vec(0u8..2, n).prop_filter("both classes", |l| l.contains(&0) && l.contains(&1)),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auc_equals_pairwise((s, l) in scored()) {
        prop_assert_eq!(auc(&s, &l).unwrap(), pairwise(&s, &l));
    }

    #[test]
    fn auc_negation_symmetry((s, l) in scored()) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert_eq!(auc(&s, &l).unwrap() + auc(&neg, &l).unwrap(), 1.0);
    }

    #[test]
    fn auc_monotone_invariance((s, l) in scored()) {
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert_eq!(auc(&s, &l).unwrap(), auc(&t, &l).unwrap());
    }

    #[test]
    fn metrics_permutation_invariant((s, l) in scored(), seed in any::<u64>()) {
        let n = s.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut x = seed;
        for i in (1..n).rev() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (x >> 33) as usize % (i + 1));
        }
        let ps: Vec<f64> = order.iter().map(|&i| s[i]).collect();
        let pl: Vec<u8> = order.iter().map(|&i| l[i]).collect();
        prop_assert_eq!(auc(&s, &l).unwrap(), auc(&ps, &pl).unwrap());
        let a = confusion_metrics(&threshold(&s), &l).unwrap();
        let b = confusion_metrics(&threshold(&ps), &pl).unwrap();
        prop_assert_eq!((a.tp, a.tn, a.fp, a.fn_), (b.tp, b.tn, b.fp, b.fn_));
        let acc = (a.tp + a.tn) as f64 / n as f64;
        prop_assert_eq!(a.acc, acc);
        for v in [a.acc, a.sen, a.spe, a.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
