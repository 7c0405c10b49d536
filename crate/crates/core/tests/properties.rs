use circwalk::gradients::{batch_grad, compare_fd, fd_grad, grad_example};
use circwalk::markov::{shift_identities_check, TransitionMatrix};
use circwalk::model::{predict, softmax, AttentionGeometry, AttentionState, Params, Sample};
use circwalk::posembed::PositionalMatrix;
use circwalk::theorycheck::toeplitz_check;
use circwalk::trainer::{decompose_v, first_step_oracle_v};
use circwalk::walkgen::{make_dataset, qa_questions, stream_rng, wrap, QaTask, QaVocabulary, WalkConfig};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn random_sample(k: usize, n: usize, seed: u64) -> Sample {
    use rand::Rng;
    let mut rng = stream_rng(seed, 9);
    Sample {
        tokens: (0..n - 1).map(|_| rng.random_range(0..k as u32) as usize).collect(),
        label: rng.random_range(0..k as u32) as usize,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_shift_invariant(z in prop::collection::vec(-30.0f64..30.0, 1..20), c in -100.0f64..100.0) {
        let z = Array1::from(z);
        let a = softmax(&z).unwrap();
        let b = softmax(&(&z + c)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!((a.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn prediction_is_scale_invariant(f in prop::collection::vec(-5.0f64..5.0, 2..12), scale in 0.01f64..100.0) {
        let f = Array1::from(f);
        prop_assert_eq!(predict(&f), predict(&(&f * scale)));
    }

    #[test]
    fn transition_powers_stay_stochastic(k in 2usize..12, p in 0.0f64..=1.0, r in 0usize..60) {
        let pi = TransitionMatrix::new(k, p).unwrap();
        let pr = pi.power(r);
        for row in pr.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&v| v >= -1e-15));
        }
    }

    #[test]
    fn first_step_oracle_is_circulant(k in 3usize..10, p in 0.05f64..0.95, n in 2usize..60) {
        let w = WalkConfig::new(k, p, n, n).unwrap();
        let v = first_step_oracle_v(&w, 1.0, 0.1).unwrap();
        prop_assert!(toeplitz_check(&v).unwrap() <= 1e-13);
    }

    #[test]
    fn walks_move_one_step(k in 2usize..10, p in 0.0f64..=1.0, n in 2usize..40, seed in any::<u64>()) {
        let cfg = WalkConfig::new(k, p, n, n).unwrap();
        for ep in make_dataset(&cfg, 5, seed).unwrap() {
            for pair in ep.states.windows(2) {
                let up = pair[1] == wrap(pair[0] as i64 + 1, k);
                let down = pair[1] == wrap(pair[0] as i64 - 1, k);
                prop_assert!(up || down);
                if p == 1.0 { prop_assert!(up); }
                if p == 0.0 { prop_assert!(down); }
            }
        }
    }

    #[test]
    fn positional_columns_are_orthogonal(n in 2usize..40, extra in 0usize..200) {
        let m = n + extra;
        let pos = PositionalMatrix::build(m, n).unwrap();
        prop_assert!(pos.gram_residual() <= 1e-9 * (m as f64 + 1.0));
    }

    #[test]
    fn span_logits_match_dense_update(k in 2usize..5, n in 2usize..8, extra in 0usize..10, seed in any::<u64>(), normalize in any::<bool>()) {
        let m = n + extra;
        let mut rng = stream_rng(seed, 3);
        let params = Params::gaussian(k, m, 0.2, &mut rng).unwrap();
        let geom = AttentionGeometry::new(m, n, normalize).unwrap().with_exact_gram();
        let coeff = Array1::from_shape_fn(n, |j| 0.3 * (j as f64 + 1.0).sin());
        let base = geom.pos.matrix().t().dot(&params.w22.dot(&geom.query));
        let span = AttentionState::from_span(&params, &geom, &base, &coeff).unwrap();

        let mut moved = params.clone();
        let left = geom.pos.matrix().dot(&coeff);
        let outer = left.view().insert_axis(ndarray::Axis(1)).dot(&geom.query.view().insert_axis(ndarray::Axis(0)));
        moved.w22 += &outer;
        let direct = AttentionState::new(&moved, &geom).unwrap();
        for (a, b) in span.pos_logit.iter().zip(&direct.pos_logit) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn params_roundtrip_bitwise(k in 1usize..5, m in 1usize..8, seed in any::<u64>(), iteration in any::<u64>()) {
        let params = Params::gaussian(k, m, 1.0, &mut stream_rng(seed, 2)).unwrap();
        let mut buf = Vec::new();
        params.write_to(&mut buf, iteration).unwrap();
        let (back, it) = Params::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(it, iteration);
        prop_assert_eq!(back, params);
    }

    #[test]
    fn duplicated_samples_leave_the_gradient_unchanged(k in 2usize..5, n in 2usize..7, seed in any::<u64>()) {
        let m = n + 3;
        let params = Params::gaussian(k, m, 0.1, &mut stream_rng(seed, 2)).unwrap();
        let geom = AttentionGeometry::new(m, n, false).unwrap();
        let a = random_sample(k, n, seed);
        let b = random_sample(k, n, seed.wrapping_add(1));
        let single = batch_grad(&params, &geom, &[a.clone(), b.clone()], &[0.5, 0.5], 0.5).unwrap();
        let doubled = batch_grad(&params, &geom, &[a.clone(), a, b.clone(), b], &[0.25; 4], 0.5).unwrap();
        for (x, y) in single.grad.v.iter().zip(&doubled.grad.v) {
            prop_assert!((x - y).abs() <= 1e-14);
        }
        for (x, y) in single.grad.w22().iter().zip(doubled.grad.w22().iter()) {
            prop_assert!((x - y).abs() <= 1e-14);
        }
    }

    #[test]
    fn decomposition_recovers_scaled_transpose(k in 3usize..9, p in 0.05f64..0.95, beta in -5.0f64..5.0) {
        let pi = TransitionMatrix::new(k, p).unwrap();
        let v: Array2<f64> = pi.matrix().t().to_owned() * beta;
        let (b, g) = decompose_v(&v, &pi).unwrap();
        prop_assert!((b - beta).abs() <= 1e-12 * (1.0 + beta.abs()));
        prop_assert!(g <= 1e-12 * (1.0 + beta.abs()));
    }

    #[test]
    fn shift_identities_hold(k in 2usize..40) {
        prop_assert!(shift_identities_check(k).unwrap().all());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn analytic_gradient_matches_differences(k in 2usize..4, n in 2usize..5, extra in 0usize..4, seed in any::<u64>(), normalize in any::<bool>()) {
        let m = n + extra;
        let params = Params::gaussian(k, m, 0.3, &mut stream_rng(seed, 2)).unwrap();
        let geom = AttentionGeometry::new(m, n, normalize).unwrap();
        let sample = random_sample(k, n, seed);
        let analytic = grad_example(&params, &geom, &sample, 1.0).unwrap();
        let fd = fd_grad(&params, &geom, &sample, 1.0, 1e-6).unwrap();
        let cmp = compare_fd(&analytic, &fd, 1e-8);
        prop_assert!(cmp.max_rel_error <= 1e-5, "{:?}", cmp);
        prop_assert!(cmp.max_left_block <= 1e-8);
    }
}

#[test]
fn task1_labels_are_majorities() {
    let vocab = QaVocabulary;
    let apple = vocab.token("apple").unwrap();
    let orange = vocab.token("orange").unwrap();
    for q in qa_questions(QaTask::Task1) {
        let list = &q.words[4..9];
        let apples = list.iter().filter(|&&t| t == apple).count();
        let expected = if apples >= 3 { apple } else { orange };
        assert_eq!(q.label, expected, "{}", q.text());
    }
}
