use proptest::prelude::*;
use w2s_lab::datagen::{margin_difficulty, rebalance};
use w2s_lab::easy_to_hard::{cutoff_subset, difficulty_from_pattern, DifficultyAssignment};
use w2s_lab::losses::{adaptive_threshold, batch_loss, confidence_loss, confidence_loss_mixed_target, AlphaSchedule};
use w2s_lab::metrics::{agreement, compute_pgr, summarize};
use w2s_lab::models::{backward, forward};
use w2s_lab::numerics::{finite_diff_check, sigmoid, Optimizer};
use w2s_lab::supervision::make_synthetic_labels;
use w2s_lab::training::{CurvePoint, Curves};
use w2s_lab::*;

fn probs(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..0.999, n)
}

fn bits(n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..2, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pgr_is_invariant_under_common_affine_maps(
        weak in 0.0f64..1.0, w2s in 0.0f64..1.0, ceiling in 0.0f64..1.0,
        scale in 0.1f64..10.0, shift in -5.0f64..5.0,
    ) {
        prop_assume!((ceiling - weak).abs() >= 0.01);
        let f = |a: f64| scale * a + shift;
        let direct = (w2s - weak) / (ceiling - weak);
        let mapped = (f(w2s) - f(weak)) / (f(ceiling) - f(weak));
        prop_assert!((direct - mapped).abs() < 1e-9 * direct.abs().max(1.0));
        prop_assert!((compute_pgr(weak, w2s, ceiling).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn pgr_is_undefined_exactly_on_tiny_gaps(weak in 0.0f64..1.0, w2s in 0.0f64..1.0, gap in -0.0049f64..0.0049) {
        prop_assert!(compute_pgr(weak, w2s, weak + gap).is_none());
    }

    #[test]
    fn agreement_decomposes_over_supervisor_correctness((s, w, g) in (1usize..80).prop_flat_map(|n| (bits(n), bits(n), bits(n)))) {
        let a = agreement(&s, &w, &g).unwrap();
        let n = s.len() as f64;
        let pc = a.n_supervisor_correct as f64 / n;
        let pw = a.n_supervisor_wrong as f64 / n;
        let rebuilt = pc * a.on_supervisor_correct.unwrap_or(0.0) + pw * a.on_supervisor_wrong.unwrap_or(0.0);
        prop_assert!((a.overall.unwrap() - rebuilt).abs() < 1e-12);
        for v in [a.overall, a.on_supervisor_correct, a.on_supervisor_wrong].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn threshold_hardens_exact_count(p in probs(0..100), fraction in 0.0f64..=1.0) {
        let (t, hard) = adaptive_threshold(&p, fraction);
        let expected = (fraction * p.len() as f64).floor() as usize;
        prop_assert_eq!(hard.iter().filter(|&&h| h == 1).count(), expected);
        if expected == 0 {
            prop_assert!(t.is_infinite());
        } else {
            for (&pi, &h) in p.iter().zip(&hard) {
                let on_correct_side = if h == 1 { pi >= t } else { pi <= t };
                prop_assert!(on_correct_side);
            }
        }
    }

    #[test]
    fn self_bootstrapping_rewrite_matches((p, w) in (1usize..64).prop_flat_map(|n| (probs(n..n + 1), probs(n..n + 1))),
                                         alpha in 0.0f64..=1.0, fraction in 0.0f64..=1.0) {
        let summed = confidence_loss(&p, &w, alpha, fraction);
        let mixed = confidence_loss_mixed_target(&p, &w, alpha, fraction);
        prop_assert!((summed - mixed).abs() < 1e-9);
    }

    #[test]
    fn alpha_schedule_is_clamped_linear_ramp(alpha_max in 0.0f64..=1.0, warmup in 0.01f64..=1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let s = AlphaSchedule { alpha_max, warmup_fraction: warmup };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(s.alpha(lo) <= s.alpha(hi) + 1e-15);
        prop_assert!(s.alpha(hi) <= alpha_max + 1e-15);
        prop_assert_eq!(s.alpha(0.0), 0.0);
        if hi >= warmup {
            prop_assert!((s.alpha(hi) - alpha_max).abs() < 1e-15);
        } else {
            prop_assert!((s.alpha(hi) - alpha_max * hi / warmup).abs() < 1e-12);
        }
        // Continuity at the end of warmup.
        prop_assert!((s.alpha(warmup - 1e-9) - s.alpha(warmup)).abs() <= alpha_max / warmup * 1e-9 + 1e-12);
    }

    #[test]
    fn losses_respect_their_lower_bounds((p, w) in (1usize..32).prop_flat_map(|n| (probs(n..n + 1), probs(n..n + 1))), alpha in 0.0f64..=1.0) {
        for variant in [LossVariant::NaiveCe, LossVariant::ConfidenceAux, LossVariant::ProductConfidence] {
            prop_assert!(batch_loss(&LossSpec::new(variant), &p, &w, alpha).unwrap().value >= 0.0);
        }
        let entropy = batch_loss(&LossSpec::new(LossVariant::EntropyAux), &p, &w, alpha).unwrap().value;
        prop_assert!(entropy >= -alpha * 2f64.ln() - 1e-12);
        let l2 = batch_loss(&LossSpec::new(LossVariant::L2Aux), &p, &w, alpha).unwrap().value;
        prop_assert!(l2 >= -alpha * 0.25 - 1e-12);
    }

    #[test]
    fn curves_order_best_early_stopped_min(acc in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30)) {
        let curves = Curves {
            points: acc.iter().enumerate().map(|(i, &(t, v))| CurvePoint {
                step: i as u64 + 1,
                train_loss: 0.0,
                test_acc_gt: Some(t),
                test_agreement_weak: None,
                val_agreement_weak: Some(v),
            }).collect(),
        };
        let best = curves.best_test_acc().unwrap();
        let es = curves.early_stopped_test_acc().unwrap();
        prop_assert!(best >= es && es >= curves.min_test_acc().unwrap());
        prop_assert!(best >= curves.final_test_acc().unwrap());
    }

    #[test]
    fn summaries_exclude_undefined_values(values in prop::collection::vec(prop::option::of(-2.0f64..2.0), 0..40)) {
        let s = summarize(values.clone());
        prop_assert_eq!(s.excluded, values.iter().filter(|v| v.is_none()).count());
        prop_assert_eq!(s.n + s.excluded, values.len());
        if let (Some(q1), Some(m), Some(q3)) = (s.q1, s.median, s.q3) {
            prop_assert!(q1 <= m && m <= q3);
        }
    }

    #[test]
    fn difficulty_is_smallest_consistent_proxy(correct in prop::collection::vec(any::<bool>(), 1..8)) {
        let proxies: Vec<f64> = (0..correct.len()).map(|i| (i + 1) as f64 * 10.0).collect();
        match difficulty_from_pattern(&proxies, &correct) {
            Some(c) => {
                let k = proxies.iter().position(|&p| p == c).unwrap();
                prop_assert!(correct[k..].iter().all(|&x| x));
                prop_assert!(k == 0 || !correct[k - 1]);
            }
            None => prop_assert!(!correct[correct.len() - 1]),
        }
    }

    #[test]
    fn difficulty_quantiles_are_uniform(margins in prop::collection::vec(-10.0f64..10.0, 2..200)) {
        let mut d = margin_difficulty(&margins);
        prop_assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
        d.sort_by(f64::total_cmp);
        let n = d.len() as f64;
        for (i, v) in d.iter().enumerate() {
            // Tied margins share the larger difficulty, so a value never sits below its
            // uniform position and matches it exactly when margins are distinct.
            prop_assert!(*v >= i as f64 / (n - 1.0) - 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn adam_with_zero_gradient_is_a_no_op(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>(), steps in 1usize..5) {
        let p = Matrix::gaussian(rows, cols, 1.0, &mut RngStream::new(seed, 0).rng());
        let mut params = vec![p.clone()];
        let mut opt = Optimizer::new(OptimizerSpec::default(), &params).unwrap();
        for _ in 0..steps {
            opt.step(&mut params, &[Matrix::zeros(rows, cols)]);
        }
        prop_assert_eq!(&params[0], &p);
    }

    #[test]
    fn optimizer_steps_are_deterministic(seed in any::<u64>(), sgd in any::<bool>()) {
        let mut rng = RngStream::new(seed, 0).rng();
        let p = Matrix::gaussian(3, 4, 1.0, &mut rng);
        let g = Matrix::gaussian(3, 4, 1.0, &mut rng);
        let spec = if sgd { OptimizerSpec::sgd(0.1, 8) } else { OptimizerSpec::adam(0.01, 8) };
        let run = || {
            let mut params = vec![p.clone()];
            let mut opt = Optimizer::new(spec.clone(), &params).unwrap();
            for _ in 0..3 {
                opt.step(&mut params, std::slice::from_ref(&g));
            }
            params
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn gradient_check_passes_for_random_models(seed in any::<u64>(), widths in prop::collection::vec(1usize..6, 0..3), d in 2usize..6) {
        let spec = if widths.is_empty() {
            ModelSpec::linear_probe(d, d).unwrap()
        } else {
            ModelSpec::mlp(widths, d).unwrap()
        };
        let mut rng = RngStream::new(seed, 1).rng();
        let x = Matrix::gaussian(7, d, 1.0, &mut rng);
        let targets: Vec<f64> = Matrix::gaussian(7, 1, 1.0, &mut rng).data().iter().map(|&v| sigmoid(v)).collect();
        let params: Vec<Matrix> = spec.param_shapes().into_iter().map(|(r, c)| Matrix::gaussian(r, c, 0.8, &mut rng)).collect();
        let cache = forward(&spec, &params, &x).unwrap();
        let preds: Vec<f64> = cache.logits.iter().map(|&z| sigmoid(z)).collect();
        let loss = batch_loss(&LossSpec::naive(), &preds, &targets, 0.0).unwrap();
        let grads = backward(&spec, &params, &cache, &loss.dlogits);
        for k in 0..params.len() {
            let err = finite_diff_check(|m| {
                let mut ps = params.clone();
                ps[k] = m.clone();
                let z = forward(&spec, &ps, &x).unwrap().logits;
                let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
                batch_loss(&LossSpec::naive(), &p, &targets, 0.0).unwrap().value
            }, &params[k], &grads[k], 1e-5).unwrap();
            prop_assert!(err < 1e-4, "param {} error {}", k, err);
        }
    }

    #[test]
    fn probe_ignores_features_beyond_k(seed in any::<u64>(), d in 2usize..10, k_frac in 0.0f64..1.0) {
        let k = 1 + ((d - 1) as f64 * k_frac) as usize;
        let spec = ModelSpec::linear_probe(k, d).unwrap();
        let mut rng = RngStream::new(seed, 2).rng();
        let params: Vec<Matrix> = spec.param_shapes().into_iter().map(|(r, c)| Matrix::gaussian(r, c, 1.0, &mut rng)).collect();
        let model = TrainedModel::new(spec, params, 0).unwrap();
        let x = Matrix::gaussian(5, d, 1.0, &mut rng);
        let mut y = x.clone();
        let noise = Matrix::gaussian(5, d, 3.0, &mut rng);
        for r in 0..5 {
            for c in k..d {
                y.set(r, c, noise.get(r, c));
            }
        }
        prop_assert_eq!(model.predict_proba(&x).unwrap(), model.predict_proba(&y).unwrap());
    }

    #[test]
    fn larger_probe_reproduces_smaller(seed in any::<u64>(), d in 2usize..10, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let k2 = 1 + ((d - 1) as f64 * a.min(b)) as usize;
        let k1 = 1 + ((d - 1) as f64 * a.max(b)) as usize;
        let small = ModelSpec::linear_probe(k2, d).unwrap();
        let mut rng = RngStream::new(seed, 3).rng();
        let params: Vec<Matrix> = small.param_shapes().into_iter().map(|(r, c)| Matrix::gaussian(r, c, 1.0, &mut rng)).collect();
        let model = TrainedModel::new(small, params, 0).unwrap();
        let big = model.embed_into(&ModelSpec::linear_probe(k1, d).unwrap()).unwrap();
        let x = Matrix::gaussian(6, d, 1.0, &mut rng);
        prop_assert_eq!(model.logits(&x).unwrap(), big.logits(&x).unwrap());
    }

    #[test]
    fn splits_are_reproducible_partitions_with_balanced_test(seed in 0u64..1000, noise in 0.0f64..0.3) {
        let spec = TaskSpec::new(301, 4, Teacher::RandomMlp, noise, seed);
        let a = generate_task(&spec).unwrap();
        let b = generate_task(&spec).unwrap();
        prop_assert_eq!(a.splits(), b.splits());
        for (split, count) in Split::ALL.iter().zip(spec.split_counts()) {
            prop_assert_eq!(a.indices(*split).len(), count);
        }
        let test = a.indices(Split::Test);
        let ones = a.labels_at(&test).iter().filter(|&&y| y == 1).count();
        prop_assert!((2 * ones).abs_diff(test.len()) <= 1);
    }

    #[test]
    fn rebalance_keeps_rows_intact(seed in 0u64..1000, noise in 0.0f64..0.4) {
        let b = generate_task(&TaskSpec::new(400, 3, Teacher::RandomMlp, noise, seed)).unwrap();
        let r = rebalance(&b).unwrap();
        // Retained rows keep their order, so each maps to the next matching original row.
        let mut j = 0;
        for i in 0..r.len() {
            while b.features().row(j) != r.features().row(i) {
                j += 1;
            }
            prop_assert_eq!(b.label(j), r.label(i));
            prop_assert_eq!(b.split_of(j), r.split_of(i));
            j += 1;
        }
    }

    #[test]
    fn synthetic_policies_hit_the_same_accuracy(seed in 0u64..1000, rate in 0.0f64..0.5) {
        let b = generate_task(&TaskSpec::new(300, 4, Teacher::LogisticMargin, 0.1, seed)).unwrap();
        let spec = ModelSpec::linear_probe(4, 4).unwrap();
        let reference = TrainedModel::initialized(spec, RngStream::new(seed, 4));
        let ids = b.indices(Split::W2sTrain);
        let n = ids.len() as f64;
        let mut accuracies = vec![];
        for kind in ErrorPolicyKind::ALL {
            let policy = ErrorPolicy { kind, target_error_rate: rate };
            let labels = match make_synthetic_labels(&b, &ids, policy, Some(&reference), RngStream::new(seed, 5)) {
                Ok(l) => l,
                // Too few correctly classified examples for the requested flips.
                Err(_) if kind == ErrorPolicyKind::StrongGtConfidentlyCorrect => continue,
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            let acc = labels.accuracy(&b, &ids).unwrap();
            prop_assert!(((1.0 - acc) - rate).abs() <= 1.0 / n + 1e-12);
            accuracies.push(acc);
        }
        prop_assert!(accuracies.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn cutoff_subsets_share_size_and_nest(seed in any::<u64>(), pattern in prop::collection::vec(0usize..4, 30..60)) {
        let proxies = vec![1.0, 2.0, 3.0];
        let ids: Vec<usize> = (0..pattern.len()).collect();
        let difficulty: Vec<Option<f64>> = pattern.iter().map(|&p| proxies.get(p).copied()).collect();
        let assignment = DifficultyAssignment { ids: ids.clone(), difficulty, ladder_proxies: proxies.clone(), correct: vec![] };
        let cutoffs = [Some(1.0), Some(2.0), Some(3.0), None];
        let size = cutoffs.iter().map(|&c| cutoff_subset(&assignment, &ids, c, usize::MAX, seed).len()).min().unwrap();
        let subsets: Vec<Vec<usize>> = cutoffs.iter().map(|&c| cutoff_subset(&assignment, &ids, c, size, seed)).collect();
        prop_assert!(subsets.iter().all(|s| s.len() == size));
        let full: Vec<Vec<usize>> = cutoffs.iter().map(|&c| cutoff_subset(&assignment, &ids, c, usize::MAX, seed)).collect();
        for w in full.windows(2) {
            prop_assert!(w[0].iter().all(|i| w[1].contains(i)));
        }
    }
}
