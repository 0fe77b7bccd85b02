mod common;

use cdl_core::conv::{estimate_lipschitz, DEFAULT_POWER_MAX_ITER, DEFAULT_POWER_TOL};
use cdl_core::encoder::{encode, encode_observed, ista_step, objective, EncoderConfig, EncoderMode};
use cdl_core::eval::{detect_events, filter_err, match_events, match_filters, roc_curve, Detections};
use cdl_core::grads::{grad_h, lambda_loss_frozen, GammaPrior};
use cdl_core::io::{decode_dataset, decode_filters, encode_dataset, encode_filters, FilterFile};
use cdl_core::sim::{simulate, Dataset, GroundTruth, SimConfig, SpikeEvent};
use cdl_core::train::{train_with_progress, TrainConfig};
use cdl_core::{apply_dict, apply_dict_adjoint, shrink, CodeMap, FilterBank};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Shape `(C, K, N)` with `K <= N`.
fn shape() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=4, 1usize..=12, 0usize..=40).prop_map(|(c, k, extra)| (c, k, k + extra))
}

fn small_encoder_problem(seed: u64) -> (FilterBank, Vec<f64>, f64) {
    let mut r = rng(seed);
    let c = r.random_range(1..=3);
    let k = r.random_range(2..=6);
    let n = r.random_range(k + 8..=40);
    let h = FilterBank::random_unit(c, k, &mut r).unwrap();
    let lip = estimate_lipschitz(&h, n, 1e-10, 10_000).unwrap().lipschitz;
    let y = sparse_window(&h, n, 3, 1.0, 0.1, &mut r);
    (h, y, lip)
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn adjoint_identity((c, k, n) in shape(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let h = FilterBank::random_unit(c, k, &mut r).unwrap();
        let x = random_code(c, n + 1 - k, &mut r);
        let y = random_signal(n, &mut r);
        let lhs = dot(&apply_dict(&h, &x).unwrap(), &y);
        let rhs = dot(apply_dict_adjoint(&h, &y).unwrap().as_slice(), x.as_slice());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * norm(x.as_slice()) * norm(&y));
    }

    #[test]
    fn shrink_is_a_contraction(u in prop::collection::vec(-5.0f64..5.0, 1..50), shift in -2.0f64..2.0, b in 0.0f64..3.0) {
        let v: Vec<f64> = u.iter().enumerate().map(|(i, a)| a + shift * ((i % 3) as f64 - 1.0)).collect();
        let su = shrink(&u, b).unwrap();
        let sv = shrink(&v, b).unwrap();
        let d_out: Vec<f64> = su.iter().zip(&sv).map(|(a, c)| a - c).collect();
        let d_in: Vec<f64> = u.iter().zip(&v).map(|(a, c)| a - c).collect();
        prop_assert!(norm(&d_out) <= norm(&d_in) + 1e-15);
    }

    #[test]
    fn shrink_zeroes_small_entries(v in prop::collection::vec(-3.0f64..3.0, 1..50), b in 0.0f64..2.0) {
        let s = shrink(&v, b).unwrap();
        for (a, o) in v.iter().zip(&s) {
            if a.abs() <= b {
                prop_assert_eq!(*o, 0.0);
            }
        }
    }

    #[test]
    fn lipschitz_bounds_rayleigh_quotients((c, k, n) in shape(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let h = FilterBank::random_unit(c, k, &mut r).unwrap();
        let lip = estimate_lipschitz(&h, n, DEFAULT_POWER_TOL, DEFAULT_POWER_MAX_ITER).unwrap().lipschitz;
        for _ in 0..100 {
            let x = random_code(c, n + 1 - k, &mut r);
            let hx = apply_dict(&h, &x).unwrap();
            prop_assert!(dot(&hx, &hx) / dot(x.as_slice(), x.as_slice()) <= lip);
        }
    }
}

fn sim_config() -> impl Strategy<Value = SimConfig> {
    (
        1usize..=4,
        3usize..=12,
        0usize..=80,
        1usize..=12,
        10.0f64..300.0,
        any::<u64>(),
        prop::option::of(0.0f64..30.0),
    )
        .prop_map(|(c, k, extra, j, rate, seed, snr)| SimConfig {
            n_filters: c,
            filter_len: k,
            window_len: k + extra,
            n_windows: j,
            firing_rate_hz: rate,
            fs_hz: 1000.0,
            amp_mean: 2.0,
            amp_std: 0.3,
            snr_db: snr,
            seed,
            filter_source: Default::default(),
        })
}

proptest! {
    #![proptest_config(config(32))]

    #[test]
    fn events_respect_refractory_period(cfg in sim_config()) {
        let ds = simulate(&cfg).unwrap();
        let truth = ds.truth.unwrap();
        for ev in &truth.events {
            for ch in 0..cfg.n_filters {
                let onsets: Vec<usize> = ev.iter().filter(|e| e.channel == ch).map(|e| e.sample).collect();
                for w in onsets.windows(2) {
                    prop_assert!(w[1] >= w[0] + cfg.filter_len);
                }
            }
        }
    }

    #[test]
    fn noiseless_windows_are_scaled_reconstructions(cfg in sim_config()) {
        let cfg = SimConfig { snr_db: None, ..cfg };
        let ds = simulate(&cfg).unwrap();
        let truth = ds.truth.as_ref().unwrap();
        for j in 0..ds.n_windows() {
            let clean = apply_dict(&truth.filters, &truth.code(j, ds.window_len())).unwrap();
            for (a, b) in ds.window(j).iter().zip(&clean) {
                prop_assert!((a - b / ds.normalization_scale).abs() <= 1e-15 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn same_config_same_dataset(cfg in sim_config()) {
        prop_assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
    }
}

#[test]
fn event_rate_matches_thinned_poisson_rate() {
    let cfg = SimConfig::four_neuron(500, 1000, None, 77);
    let ds = simulate(&cfg).unwrap();
    let truth = ds.truth.unwrap();
    let expected = cfg.expected_events_per_window() * cfg.n_windows as f64;
    for ch in 0..cfg.n_filters {
        let count = truth.events.iter().flatten().filter(|e| e.channel == ch).count() as f64;
        let rel = (count - expected).abs() / expected;
        assert!(rel <= 0.05, "channel {ch}: {count} events vs {expected:.1} expected");
    }
}

#[test]
fn ista_objective_never_increases() {
    for seed in 0..50 {
        let (h, y, lip) = small_encoder_problem(seed);
        let cfg = EncoderConfig::new(60, lip, 0.5, 0.5).with_mode(EncoderMode::Ista);
        let mut prev = objective(&y, &h, &CodeMap::zeros(h.n_filters(), y.len() + 1 - h.filter_len()), 0.5, 0.5).unwrap();
        encode_observed(&y, &h, &cfg, |x| {
            let f = objective(&y, &h, x, 0.5, 0.5).unwrap();
            assert!(f <= prev * (1.0 + 1e-14), "seed {seed}: {f} after {prev}");
            prev = f;
        })
        .unwrap();
    }
}

#[test]
fn fista_ends_no_worse_than_ista() {
    for seed in 100..130 {
        let (h, y, lip) = small_encoder_problem(seed);
        let base = EncoderConfig::new(60, lip, 0.3, 0.5);
        let (xf, _) = encode(&y, &h, &base, false).unwrap();
        let (xi, _) = encode(&y, &h, &base.with_mode(EncoderMode::Ista), false).unwrap();
        let ff = objective(&y, &h, &xf, 0.3, 0.5).unwrap();
        let fi = objective(&y, &h, &xi, 0.3, 0.5).unwrap();
        assert!(ff <= fi + 1e-9, "seed {seed}: FISTA {ff} vs ISTA {fi}");
    }
}

#[test]
fn rerunning_the_forward_pass_reproduces_the_trace() {
    for seed in 0..10 {
        let (h, y, lip) = small_encoder_problem(seed);
        let cfg = EncoderConfig::new(15, lip, 0.4, 0.6);
        let (_, a) = encode(&y, &h, &cfg, true).unwrap();
        let (_, b) = encode(&y, &h, &cfg, true).unwrap();
        assert_eq!(a.unwrap(), b.unwrap());
    }
}

/// Long-run ISTA solution of the lasso problem.
fn ista_oracle(y: &[f64], h: &FilterBank, cfg: &EncoderConfig, iterations: usize) -> CodeMap {
    let mut x = CodeMap::zeros(h.n_filters(), y.len() + 1 - h.filter_len());
    for _ in 0..iterations {
        x = ista_step(y, h, &x, cfg.lipschitz, cfg.bias()).unwrap();
    }
    x
}

#[test]
fn iterates_approach_the_fixed_point() {
    for seed in 200..210 {
        let (h, y, lip) = small_encoder_problem(seed);
        let cfg = EncoderConfig::new(1, lip, 0.3, 0.5).with_mode(EncoderMode::Ista);
        let star = ista_oracle(&y, &h, &cfg, 20_000);
        let dist = |t: usize| {
            let (x, _) = encode(&y, &h, &EncoderConfig { iterations: t, ..cfg }, false).unwrap();
            let d: Vec<f64> = x.as_slice().iter().zip(star.as_slice()).map(|(a, b)| a - b).collect();
            norm(&d)
        };
        let ds: Vec<f64> = [5, 20, 80, 320].iter().map(|&t| dist(t)).collect();
        for w in ds.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "seed {seed}: {ds:?}");
        }
    }
}

#[test]
fn larger_lambda_gives_sparser_converged_codes() {
    for seed in 300..315 {
        let (h, y, lip) = small_encoder_problem(seed);
        let mut prev = usize::MAX;
        for lambda in [0.05, 0.2, 0.8, 3.2] {
            let (x, _) = encode(&y, &h, &EncoderConfig::new(1000, lip, lambda, 0.5), false).unwrap();
            assert!(x.l0_norm() <= prev, "seed {seed}, lambda {lambda}");
            prev = x.l0_norm();
        }
    }
}

#[test]
fn lambda_loss_blows_up_at_both_ends() {
    let prior = GammaPrior::new(3.0, 0.5).unwrap();
    let f = |l: f64| lambda_loss_frozen(l, 4.0, 2, 30, &prior).unwrap();
    let mid = f(1.0);
    assert!(f(1e-12) > mid + 1e3);
    assert!(f(1e-30) > f(1e-12));
    assert!(f(1e6) > mid + 1e3);
    assert!(f(1e9) > f(1e6));
}

#[test]
fn dead_layers_add_nothing() {
    // With a threshold above every pre-activation no layer is active, however
    // many there are, and only the decoder path (zero here) remains.
    let (h, y, lip) = small_encoder_problem(5);
    let big = EncoderConfig::new(3, lip, 1e6, 1.0);
    for t in [3, 9] {
        let cfg = EncoderConfig { iterations: t, ..big };
        let (x, tr) = encode(&y, &h, &cfg, true).unwrap();
        assert_eq!(x.l0_norm(), 0);
        assert!(grad_h(&y, &h, &cfg, &tr.unwrap()).unwrap().iter().all(|g| *g == 0.0));
    }
}

#[test]
fn filters_stay_unit_norm_and_lambda_positive_through_training() {
    let mut sim = SimConfig::four_neuron(100, 24, Some(12.0), 9);
    sim.n_filters = 2;
    sim.filter_len = 8;
    sim.firing_rate_hz = 200.0;
    let ds = simulate(&sim).unwrap();
    let mut r = rng(4);
    let h0 = FilterBank::random_unit(2, 8, &mut r).unwrap();
    let lip = estimate_lipschitz(&h0, 100, 1e-8, 1000).unwrap().lipschitz;
    let enc = EncoderConfig::new(10, lip, 5.0, ds.sigma);
    let cfg = TrainConfig {
        eta_h: 0.05,
        eta_lambda: 2.0,
        batch_size: 1,
        epochs: 3,
        validation_fraction: 0.25,
        ..TrainConfig::default()
    };
    let prior = GammaPrior::centered(5.0, 1.0).unwrap();
    train_with_progress(&ds, &h0, 5.0, &cfg, &enc, &prior, |rec, h| {
        assert!(h.unit_norm_deviation() <= 1e-12);
        assert!(rec.lambda > 0.0);
    })
    .unwrap();
}

fn bank(seed: u64, c: usize, k: usize) -> FilterBank {
    FilterBank::random_unit(c, k, &mut rng(seed)).unwrap()
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn filter_err_symmetric_sign_and_scale_invariant(seed in any::<u64>(), k in 2usize..20, scale in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0]) {
        let h = bank(seed, 2, k);
        let (a, b) = (h.filter(0), h.filter(1));
        let e = filter_err(a, b).unwrap();
        prop_assert!((filter_err(b, a).unwrap() - e).abs() <= 1e-9);
        let neg: Vec<f64> = b.iter().map(|v| -v).collect();
        prop_assert!((filter_err(a, &neg).unwrap() - e).abs() <= 1e-9);
        let scaled: Vec<f64> = b.iter().map(|v| v * scale).collect();
        prop_assert!((filter_err(a, &scaled).unwrap() - e).abs() <= 1e-9);
    }

    #[test]
    fn wider_shift_search_never_hurts(seed in any::<u64>(), c in 1usize..=4, k in 3usize..12) {
        let truth = bank(seed, c, k);
        let learned = bank(seed ^ 0xabc, c, k);
        let mut prev = f64::INFINITY;
        for s in 0..k {
            let total = match_filters(&truth, &learned, s).unwrap().total_err();
            prop_assert!(total <= prev + 1e-9);
            prev = total;
        }
    }

    #[test]
    fn event_matching_is_one_to_one(est in prop::collection::vec((0usize..2, 0usize..200), 0..40), truth in prop::collection::vec((0usize..2, 0usize..200), 0..40), tol in 0usize..15) {
        let to_ev = |v: &[(usize, usize)]| v.iter().map(|&(c, s)| SpikeEvent { channel: c, sample: s, amplitude: 1.0 }).collect::<Vec<_>>();
        let (e, t) = (to_ev(&est), to_ev(&truth));
        let pairs = match_events(&e, &t, tol);
        let mut used_e = vec![false; e.len()];
        let mut used_t = vec![false; t.len()];
        for (i, j) in pairs {
            prop_assert!(!used_e[i] && !used_t[j]);
            used_e[i] = true;
            used_t[j] = true;
            prop_assert_eq!(e[i].channel, t[j].channel);
            prop_assert!(e[i].sample.abs_diff(t[j].sample) <= tol);
        }
        let det = Detections { thresholds: vec![0.0], events: vec![vec![e.clone()]] };
        let rep = roc_curve(&det, std::slice::from_ref(&t), tol).unwrap();
        prop_assert!((0.0..=1.0).contains(&rep.true_miss[0]) && (0.0..=1.0).contains(&rep.false_alarm[0]));
    }

    #[test]
    fn raising_the_threshold_never_adds_detections(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_code(3, 60, &mut r);
        let mut prev = usize::MAX;
        for thr in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let n = detect_events(&x, thr, 4).len();
            prop_assert!(n <= prev);
            prev = n;
        }
    }
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    (1usize..5, 1usize..30, any::<u64>(), any::<bool>()).prop_map(|(j, n, seed, with_truth)| {
        let mut r = rng(seed);
        let samples: Vec<f64> = (0..j * n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
        let truth = (with_truth && n >= 2).then(|| {
            let k = r.random_range(1..=n);
            let filters = FilterBank::random_unit(2, k, &mut r).unwrap();
            let events = (0..j)
                .map(|_| {
                    (0..r.random_range(0..4))
                        .map(|_| SpikeEvent {
                            channel: r.random_range(0..2),
                            sample: r.random_range(0..=n - k),
                            amplitude: r.random::<f64>() * 3.0,
                        })
                        .collect()
                })
                .collect();
            GroundTruth { filters, events }
        });
        Dataset::new(
            j,
            n,
            samples,
            r.random::<f64>(),
            1000.0 + r.random::<f64>(),
            1.0 + r.random::<f64>(),
            truth,
        )
        .unwrap()
    })
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn dataset_files_round_trip(ds in arb_dataset()) {
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn filter_files_round_trip(seed in any::<u64>(), c in 1usize..6, k in 1usize..30, lambda in 0.0f64..1e4, lip in 0.0f64..100.0, sigma in 0.0f64..2.0) {
        let f = FilterFile { filters: bank(seed, c, k), lambda, lipschitz: lip, sigma };
        let bytes = encode_filters(&f).unwrap();
        let back = decode_filters(&bytes).unwrap();
        prop_assert_eq!(&back, &f);
        prop_assert_eq!(encode_filters(&back).unwrap(), bytes);
    }
}
