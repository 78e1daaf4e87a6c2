use std::collections::BTreeSet;

use proptest::prelude::*;
use semimatch::nn::{init_backbone, Mode};
use semimatch::signal::{split_dataset, synth_generate, Protocol};
use semimatch::ssl::{
    adamatch_rectify, compute_loss, confidence_mask, mixup_pair, mixup_with_lambda, sharpen,
    warmup_weight, LabeledBatch, Method, MethodState, Model, SslMethodConfig, StepRngs,
    UnlabeledBatch,
};
use semimatch::tensor::{softmax_rows, Tensor};
use semimatch::{rng, Graph};

fn prob_rows(rows: usize, k: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.01f64..1.0, rows * k).prop_map(move |v| {
        let mut data = Vec::with_capacity(v.len());
        for row in v.chunks(k) {
            let s: f64 = row.iter().sum();
            data.extend(row.iter().map(|x| x / s));
        }
        Tensor::new(vec![rows, k], data).unwrap()
    })
}

fn shaped_probs() -> impl Strategy<Value = Tensor> {
    (1usize..8, 2usize..6).prop_flat_map(|(b, k)| prob_rows(b, k))
}

fn assert_rows_normalized(t: &Tensor) -> Result<(), TestCaseError> {
    for row in t.rows() {
        prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    Ok(())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-50.0f64..50.0, 12)) {
        let t = Tensor::new(vec![3, 4], v).unwrap();
        assert_rows_normalized(&softmax_rows(&t))?;
    }

    #[test]
    fn sharpen_keeps_distributions_and_argmax(p in shaped_probs(), t in 0.05f64..4.0) {
        let s = sharpen(&p, t).unwrap();
        assert_rows_normalized(&s)?;
        for (a, b) in p.rows().zip(s.rows()) {
            let max_a = a.iter().copied().fold(f64::MIN, f64::max);
            let max_b = b.iter().copied().fold(f64::MIN, f64::max);
            if t < 1.0 {
                prop_assert!(max_b >= max_a - 1e-12);
            } else {
                prop_assert!(max_b <= max_a + 1e-12);
            }
        }
    }

    #[test]
    fn mixup_weight_is_at_least_half(lambda in 0.0f64..=1.0, x in prop::collection::vec(-3.0f64..3.0, 8)) {
        let x1 = Tensor::new(vec![2, 4], x.clone()).unwrap();
        let x2 = x1.map(|v| -v);
        let y = Tensor::one_hot(&[0, 1], 2);
        let (xm, ym, lp) = mixup_with_lambda(&x1, &y, &x2, &y, lambda).unwrap();
        prop_assert!(lp >= 0.5 && lp <= 1.0);
        for ((m, a), b) in xm.data().iter().zip(x1.data()).zip(x2.data()) {
            prop_assert!(*m >= a.min(*b) - 1e-12 && *m <= a.max(*b) + 1e-12);
        }
        assert_rows_normalized(&ym)?;
    }

    #[test]
    fn sampled_mixup_weight_is_at_least_half(seed in any::<u64>(), alpha in 0.05f64..4.0) {
        let x = Tensor::ones(&[1, 3]);
        let y = Tensor::one_hot(&[0], 2);
        let mut r = rng::stream(seed, rng::Stream::Mixup);
        let (_, _, lp) = mixup_pair(&x, &y, &x, &y, alpha, &mut r).unwrap();
        prop_assert!(lp >= 0.5 && lp <= 1.0);
    }

    #[test]
    fn mask_is_binary(p in shaped_probs(), thr in 0.0f64..1.0) {
        for m in confidence_mask(&p, thr) {
            prop_assert!(m == 0.0 || m == 1.0);
        }
    }

    #[test]
    fn rectified_rows_are_distributions(qu in prob_rows(6, 3), ql in prob_rows(6, 3)) {
        assert_rows_normalized(&adamatch_rectify(&qu, &ql).unwrap())?;
    }

    #[test]
    fn warmup_is_monotone_and_bounded(warmup in 0usize..40, max in 0.0f64..100.0, method_idx in 0usize..9) {
        let method = Method::ALL[method_idx];
        let mut cfg = SslMethodConfig::defaults(method, Protocol::Seed);
        cfg.warmup_epochs = warmup;
        cfg.unsup_weight_max = max;
        let mut prev = f64::NEG_INFINITY;
        for epoch in 0..60 {
            let w = warmup_weight(epoch, &cfg);
            prop_assert!(w >= prev);
            prop_assert!(w >= 0.0);
            if method != Method::FixMatch {
                prop_assert!(w <= max);
            }
            prev = w;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn split_satisfies_set_equations(m in 1usize..20, seed in any::<u64>(), k in 2usize..5) {
        let ds = synth_generate(k, 60, 1.0, seed % 7).unwrap();
        let split = split_dataset(&ds, m, seed, Protocol::Seed).unwrap();
        let l: BTreeSet<u32> = split.labeled_ids.iter().copied().collect();
        let u: BTreeSet<u32> = split.unlabeled_ids.iter().copied().collect();
        let v: BTreeSet<u32> = split.validation_ids.iter().copied().collect();
        let t: BTreeSet<u32> = split.test_ids.iter().copied().collect();
        prop_assert!(l.is_disjoint(&u) && l.is_disjoint(&v) && u.is_disjoint(&v));
        prop_assert!(t.is_disjoint(&l) && t.is_disjoint(&u) && t.is_disjoint(&v));
        let pool: BTreeSet<u32> = (0..ds.len())
            .filter(|&i| ds.session_ids[i] < Protocol::Seed.train_sessions())
            .map(|i| ds.sample_ids[i])
            .collect();
        let union: BTreeSet<u32> = l.union(&u).chain(v.iter()).copied().collect();
        prop_assert_eq!(&union, &pool);
        prop_assert_eq!(union.len() + t.len(), ds.len());
        let index = ds.index_of();
        for c in 0..k {
            let n = split.labeled_ids.iter().filter(|id| ds.labels[index[id]] == c).count();
            prop_assert_eq!(n, m);
        }
    }

    #[test]
    fn pseudo_targets_carry_no_gradient(seed in any::<u64>(), method_idx in 0usize..9, epoch in 0usize..30) {
        let method = Method::ALL[method_idx];
        let (b, k) = (4, 3);
        let mut r = rng::stream(seed, rng::Stream::Synth);
        use rand_distr::{Distribution, StandardNormal};
        let mut draw = || -> Tensor {
            let d: Vec<f64> = (0..b * 5 * 8).map(|_| StandardNormal.sample(&mut r)).collect();
            Tensor::new(vec![b, 5, 8], d).unwrap()
        };
        let l = LabeledBatch::new(draw(), &[0, 1, 2, 0], k, vec![0, 1, 2, 3]).unwrap();
        let u = UnlabeledBatch { x: draw(), ids: vec![4, 5, 6, 7] };
        let mut params = init_backbone(seed, 5, 8, k).unwrap();
        let cfg = SslMethodConfig::defaults(method, Protocol::Seed);
        let mut state = MethodState::new(&cfg, &params, &(0..8).collect::<Vec<_>>(), seed).unwrap();
        let mut g = Graph::new();
        let mut model = Model::new(&mut g, &mut params, Mode::Train);
        let loss = compute_loss(&mut g, &mut model, &mut state, &l, &u, &cfg, epoch, &mut StepRngs::from_seed(seed)).unwrap();
        let grads = g.backward(loss.total).unwrap();
        for t in &loss.targets {
            prop_assert!(!g.requires_grad(*t));
            prop_assert!(grads.get(*t).is_none());
        }
        if method != Method::SupervisedOnly {
            prop_assert!(!loss.targets.is_empty());
        }
    }
}
