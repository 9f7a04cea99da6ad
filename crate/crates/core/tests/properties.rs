use nalgebra::{DMatrix, DVector};
use ntkw_core::bounds::kernel_bound;
use ntkw_core::dataset::{
    self, flip_labels, random_unit_vector, DatasetMeta, IdxImages, IdxLabels, LabeledDataset, RawDataset,
};
use ntkw_core::network::{self, init_params, logistic_loss, logistic_loss_derivative, NetParams};
use ntkw_core::ntk::{kernel_stack, relu_pair_expectations};
use ntkw_core::ntrf::{fit_projected_sgd, ntrf_eval, FitOptions, NtrfModel};
use ntkw_core::seed;
use ntkw_core::sgd;
use ntkw_core::verify::{self, CheckConfig, Verdict};
use proptest::prelude::*;

fn unit_inputs(n: usize, d: usize, s: u64) -> Vec<f64> {
    let mut rng = seed::rng(s);
    (0..n).flat_map(|_| random_unit_vector(d, &mut rng)).collect()
}

fn signed_labels(n: usize, s: u64) -> Vec<f64> {
    (0..n)
        .map(|i| if (seed::derive_index(s, i as u64) >> 7) & 1 == 0 { 1.0 } else { -1.0 })
        .collect()
}

fn labeled(n: usize, d: usize, s: u64) -> LabeledDataset {
    LabeledDataset::new(unit_inputs(n, d, s), signed_labels(n, s ^ 0x5a5a), d, DatasetMeta::default()).unwrap()
}

fn random_layers(p: &NetParams, scale: f64, s: u64) -> Vec<DMatrix<f64>> {
    let mut rng = seed::rng(s);
    p.zeros_like()
        .into_iter()
        .map(|z| z.map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal)))
        .collect()
}

use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalized_inputs_have_unit_norm(
        pixels in prop::collection::vec(any::<u8>(), 12 * 16),
        labels in prop::collection::vec(prop::sample::select(vec![3u8, 8u8]), 12),
        s in any::<u64>(),
    ) {
        let images = IdxImages { count: 12, rows: 4, cols: 4, pixels };
        let raw = RawDataset::from_idx(images, IdxLabels { labels }, "prop".into()).unwrap();
        if let Ok(data) = dataset::binarize_and_normalize(&raw, 3, 8, 12, s) {
            for i in 0..data.len() {
                let norm = data.x(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn flipping_twice_restores_labels(n in 2usize..60, ratio in 0.0f64..=0.5, s in any::<u64>()) {
        let data = labeled(n, 3, s);
        let once = flip_labels(&data, ratio, s).unwrap();
        let twice = flip_labels(&once, ratio, s).unwrap();
        prop_assert_eq!(twice.labels(), data.labels());
    }

    #[test]
    fn idx_round_trips(count in 0usize..5, rows in 1usize..6, cols in 1usize..6, s in any::<u64>()) {
        let mut rng = seed::rng(s);
        let pixels: Vec<u8> = (0..count * rows * cols).map(|_| rng.random()).collect();
        let images = IdxImages { count, rows, cols, pixels };
        let bytes = images.to_bytes();
        let parsed = IdxImages::parse(&bytes).unwrap();
        prop_assert_eq!(&parsed, &images);
        prop_assert_eq!(parsed.to_bytes(), bytes);
        let labels = IdxLabels { labels: (0..count).map(|_| rng.random_range(0..10)).collect() };
        let lb = labels.to_bytes();
        prop_assert_eq!(IdxLabels::parse(&lb).unwrap().to_bytes(), lb);
    }

    #[test]
    fn dataset_cache_round_trips(n in 2usize..30, d in 1usize..8, s in any::<u64>()) {
        let data = labeled(n, d.max(2), s);
        let back = LabeledDataset::from_cache_bytes(&data.to_cache_bytes(), "prop").unwrap();
        prop_assert_eq!(back.inputs(), data.inputs());
        prop_assert_eq!(back.labels(), data.labels());
    }

    #[test]
    fn zero_one_below_four_times_logistic(z in -10.0f64..10.0) {
        let indicator = if z <= 0.0 { 1.0 } else { 0.0 };
        prop_assert!(indicator <= 4.0 * logistic_loss(z));
    }

    #[test]
    fn logistic_is_convex_and_lipschitz(a in -700.0f64..700.0, b in -700.0f64..700.0) {
        prop_assert!(logistic_loss_derivative(a).abs() <= 1.0);
        let mid = logistic_loss(0.5 * (a + b));
        let chord = 0.5 * (logistic_loss(a) + logistic_loss(b));
        prop_assert!(mid <= chord * (1.0 + 1e-12) + 1e-12);
        prop_assert!(logistic_loss(a).is_finite());
    }

    #[test]
    fn output_is_positively_homogeneous(c in 0.01f64..100.0, s in any::<u64>()) {
        let p = init_params(64, 5, 3, s).unwrap();
        let x = unit_inputs(1, 5, s ^ 1);
        let scaled: Vec<f64> = x.iter().map(|v| c * v).collect();
        let f = network::predict(&p, &x).unwrap();
        let g = network::predict(&p, &scaled).unwrap();
        prop_assert!((g - c * f).abs() <= 1e-10 * (c * f).abs().max(1e-12));
    }

    #[test]
    fn backprop_matches_pattern_products(m in 4usize..64, depth in 2usize..5, s in any::<u64>()) {
        let p = init_params(m, 6, depth, s).unwrap();
        let x = unit_inputs(1, 6, s ^ 2);
        let trace = network::forward(&p, &x).unwrap();
        let w = p.layers();
        let diag = |l: usize| {
            DMatrix::from_diagonal(&DVector::from_iterator(
                m,
                trace.patterns[l - 1].iter().map(|&on| if on { 1.0 } else { 0.0 }),
            ))
        };
        // b_l = (W_L D_{L-1} W_{L-1} ... D_{l+1} W_{l+1} D_l)ᵀ
        for l in 1..depth {
            let mut prod = w[depth - 1].clone();
            for r in (l + 1..depth).rev() {
                prod = prod * diag(r) * &w[r - 1];
            }
            prod *= diag(l);
            let expect = prod.transpose().column(0).into_owned();
            let got = &trace.back[l - 1];
            let scale = expect.amax().max(1e-300);
            prop_assert!((got - &expect).amax() <= 1e-10 * scale);
        }
    }

    #[test]
    fn arc_cosine_monotone_in_covariance(
        sii in 0.1f64..4.0, sjj in 0.1f64..4.0, a in -1.0f64..1.0, b in -1.0f64..1.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let scale = (sii * sjj).sqrt();
        let (k1_lo, k0_lo) = relu_pair_expectations(sii, sjj, lo * scale).unwrap();
        let (k1_hi, k0_hi) = relu_pair_expectations(sii, sjj, hi * scale).unwrap();
        prop_assert!(k1_lo <= k1_hi + 1e-15);
        prop_assert!(k0_lo <= k0_hi + 1e-15);
    }

    #[test]
    fn theta_tilde_bounded_by_depth(n in 2usize..12, d in 2usize..8, depth in 2usize..7, s in any::<u64>()) {
        let stack = kernel_stack(&unit_inputs(n, d, s), d, depth).unwrap();
        prop_assert!(stack.theta_tilde_last().amax() <= depth as f64 + 1e-12);
    }

    #[test]
    fn kernel_is_permutation_equivariant(s in any::<u64>(), depth in 2usize..6) {
        let (n, d) = (5, 4);
        let x = unit_inputs(n, d, s);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut seed::rng(s ^ 3));
        let px: Vec<f64> = perm.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect();
        let a = kernel_stack(&x, d, depth).unwrap();
        let b = kernel_stack(&px, d, depth).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((b.theta[(i, j)] - a.theta[(perm[i], perm[j])]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ntrf_eval_is_affine(s in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let p = init_params(16, 4, 3, s).unwrap();
        let x = unit_inputs(1, 4, s ^ 4);
        let d1 = random_layers(&p, 0.01, s ^ 5);
        let d2 = random_layers(&p, 0.01, s ^ 6);
        let mix: Vec<DMatrix<f64>> = d1.iter().zip(&d2).map(|(u, v)| u * a + v * b).collect();
        let big = 1e6;
        let f0 = ntrf_eval(&NtrfModel::at_anchor(&p, big).unwrap(), &x).unwrap();
        let f1 = ntrf_eval(&NtrfModel::new(&p, d1, big).unwrap(), &x).unwrap() - f0;
        let f2 = ntrf_eval(&NtrfModel::new(&p, d2, big).unwrap(), &x).unwrap() - f0;
        let fm = ntrf_eval(&NtrfModel::new(&p, mix, big).unwrap(), &x).unwrap() - f0;
        let expect = a * f1 + b * f2;
        prop_assert!((fm - expect).abs() <= 1e-12 * (f0.abs() + expect.abs()).max(1.0));
    }

    #[test]
    fn kernel_bound_ignores_label_sign(n in 3usize..20, s in any::<u64>(), depth in 2usize..6) {
        let data = labeled(n, 5, s);
        let stack = kernel_stack(data.inputs(), 5, depth).unwrap();
        let neg: Vec<f64> = data.labels().iter().map(|y| -y).collect();
        let a = kernel_bound(&stack.theta, depth, data.labels()).unwrap();
        let b = kernel_bound(&stack.theta, depth, &neg).unwrap();
        prop_assert_eq!(a.first_term, b.first_term);
        prop_assert_eq!(a.quadratic_form, b.quadratic_form);
    }

    #[test]
    fn kernel_bound_is_permutation_invariant_and_in_envelope(n in 3usize..20, s in any::<u64>(), depth in 2usize..6) {
        let data = labeled(n, 5, s);
        let stack = kernel_stack(data.inputs(), 5, depth).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut seed::rng(s ^ 7));
        let permuted = stack.permuted(&perm);
        let labels: Vec<f64> = perm.iter().map(|&i| data.y(i)).collect();
        let a = kernel_bound(&stack.theta, depth, data.labels()).unwrap();
        let b = kernel_bound(&permuted.theta, depth, &labels).unwrap();
        prop_assert!((a.first_term - b.first_term).abs() <= 1e-10 * a.first_term.abs());
        prop_assert!(!a.notes.iter().any(|n| n.contains("envelope")), "{:?}", a.notes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sgd_trajectory_invariants(n in 2usize..25, m in 16usize..64, s in any::<u64>(), eta in 1e-4f64..5e-2) {
        let data = labeled(n, 4, s);
        let init = init_params(m, 4, 3, s ^ 8).unwrap();
        let run = sgd::run_sgd(&init, &data, eta, s, 3).unwrap();
        let rec = &run.record;
        prop_assert_eq!(rec.per_step.len(), n);

        // Replaying one update per example reproduces the final iterate.
        let mut replay = init.clone();
        for i in 0..n {
            let lg = network::loss_and_grad(&replay, data.x(i), data.y(i)).unwrap();
            lg.grad.add_to(replay.layers_mut(), -eta);
        }
        prop_assert_eq!(replay.layers(), run.final_params.layers());

        let depth = init.depth();
        let mut budget = vec![0.0f64; depth];
        for step in &rec.per_step {
            for l in 0..depth {
                prop_assert!(step.distances[l] <= budget[l] * (1.0 + 1e-12) + 1e-15);
                budget[l] += eta * step.grad_norms[l];
            }
            prop_assert!(step.zero_one <= 4.0 * step.loss);
        }
    }

    #[test]
    fn ntrf_fit_is_deterministic(s in any::<u64>()) {
        let data = labeled(12, 4, s);
        let p = init_params(16, 4, 3, s ^ 9).unwrap();
        let mut opts = FitOptions::new(5.0, s);
        opts.epochs = 5;
        opts.batch = 4;
        let a = fit_projected_sgd(&p, &data, &opts).unwrap();
        let b = fit_projected_sgd(&p, &data, &opts).unwrap();
        prop_assert_eq!(a.model.delta(), b.model.delta());
        prop_assert_eq!(a.history, b.history);
    }

    #[test]
    fn verify_checks_are_deterministic(s in any::<u64>()) {
        let mut cfg = CheckConfig::new(64, 3);
        cfg.seeds = 2;
        cfg.n = 4;
        cfg.base_seed = s;
        for lemma in ["norms", "gradients", "linearization"] {
            let a = serde_json::to_string(&verify::run_check(lemma, &cfg).unwrap()).unwrap();
            let b = serde_json::to_string(&verify::run_check(lemma, &cfg).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn one_step_matches_finite_difference_loss_gradient() {
    let (m, d) = (32, 5);
    let init = init_params(m, d, 3, 21).unwrap();
    let data = labeled(1, d, 22);
    let eta = 0.05;
    let run = sgd::run_sgd(&init, &data, eta, 0, 0).unwrap();
    let (x, y) = (data.x(0), data.y(0));
    let loss_at = |p: &NetParams| logistic_loss(y * network::predict(p, x).unwrap());
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (l, w) in init.layers().iter().enumerate() {
        for r in 0..w.nrows() {
            for c in 0..w.ncols() {
                let bump = |delta: f64| {
                    let mut layers = init.layers().to_vec();
                    layers[l][(r, c)] += delta;
                    loss_at(&NetParams::from_layers(layers, 0).unwrap())
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let expect = w[(r, c)] - eta * fd;
                worst = worst.max((run.final_params.layers()[l][(r, c)] - expect).abs());
            }
        }
    }
    assert!(worst <= 1e-6, "max abs difference {worst:e}");
}

#[test]
fn objective_non_increasing_in_radius_on_small_problem() {
    let data = labeled(24, 5, 31);
    let p = init_params(48, 5, 3, 32).unwrap();
    let mut prev = f64::INFINITY;
    for radius in [1.0, 5.0, 10.0, 20.0] {
        let mut opts = FitOptions::new(radius, 33);
        opts.epochs = 60;
        opts.batch = 8;
        let fit = fit_projected_sgd(&p, &data, &opts).unwrap();
        assert!(fit.objective <= prev + 1e-3, "R={radius}: {} after {prev}", fit.objective);
        prev = fit.objective;
    }
}

#[test]
fn narrow_fixture_fails_with_reproduction_line() {
    let r = verify::run_check("norms", &CheckConfig::new(8, 3)).unwrap();
    assert_eq!(r.verdict, Verdict::Fail);
    let f = r.failure.expect("failure details");
    assert!(f.reproduce.starts_with("ntkw verify --lemma norms --m 8 --depth 3"));
    assert!(!f.values.is_empty());
}
