mod common;

use approx::assert_abs_diff_eq;
use exlab_core::augment::{sample_view, GridImage, ViewPolicy};
use exlab_core::defense::active::*;
use exlab_core::defense::detect::*;
use exlab_core::defense::reactive::*;
use exlab_core::linear_eval::encode;
use exlab_core::losses::softmax_cross_entropy;
use exlab_core::nn::{Architecture, Network, Tensor};
use exlab_core::rng::seeded;
use exlab_core::synthdata::{generate, DatasetSpec};
use exlab_core::victim::{train_victim, train_victim_watermarked, VictimConfig, VictimModel, DEFAULT_FLAGGED_NOISE};
use exlab_core::Error;
use common::{dual_objective, toy, D};
use proptest::prelude::*;
use rand::Rng;

fn quick_victim(seed: u64, watermark: bool) -> (VictimModel, exlab_core::synthdata::DatasetSplits) {
    let s = generate(&DatasetSpec { samples_per_class: 40, test_per_class: 40, seed, ..Default::default() }).unwrap();
    let cfg = VictimConfig { epochs: 8, encoder_widths: vec![256, 64, 32], head_widths: vec![32, 16], predictor_hidden: 16, seed, ..Default::default() };
    let v = if watermark { train_victim_watermarked(&s.train, &cfg) } else { train_victim(&s.train, &cfg) }.unwrap();
    (v, s)
}

// ---- perturbation defenses

#[test]
fn noise_mean_and_spread_converge() {
    let mut rng = seeded(0, 20);
    let cfg = NoiseConfig { mean: 10.0, sigma: 1.0 };
    let y = [0.0, 5.0, -3.0];
    let n = 100_000;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for _ in 0..n {
        for (k, v) in perturb_noise(&y, &cfg, &mut rng).iter().enumerate() {
            let d = v - y[k];
            sum[k] += d;
            sq[k] += d * d;
        }
    }
    for k in 0..3 {
        let mean = sum[k] / n as f64;
        let sd = (sq[k] / n as f64 - mean * mean).sqrt();
        assert!((9.9..=10.1).contains(&mean) && (mean - 10.0).abs() < 0.01 * 10.0, "{mean}");
        assert!((sd - 1.0).abs() < 0.01, "{sd}");
    }
}

#[test]
fn flagged_outputs_are_blown_up() {
    let mut rng = seeded(1, 20);
    let y = [0.5, -0.2, 0.1];
    let pass = perturb_if_similar(&y, &Verdict::default(), &DEFAULT_FLAGGED_NOISE, &mut rng);
    assert_eq!(pass, y.to_vec());
    let flagged = Verdict { flagged: true, best_match_id: Some(0), best_distance: Some(0.0) };
    let out = perturb_if_similar(&y, &flagged, &DEFAULT_FLAGGED_NOISE, &mut rng);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm(&out) > 100.0 * norm(&y));
}

#[test]
fn attacker_grad_is_negated_mse_backward() {
    for seed in 0..10 {
        let t = toy(seed);
        let a = attacker_grad(&t.f, &t.x, &t.y_v).unwrap();
        let x = Tensor::matrix(1, 16, t.x.clone()).unwrap();
        let trace = t.f.forward(&x).unwrap();
        let n = t.y_v.len() as f64;
        let dout: Vec<f64> = trace.output().data().iter().zip(&t.y_v).map(|(o, y)| 2.0 / n * (o - y)).collect();
        let (grads, _) = t.f.backward(&trace, &Tensor::matrix(1, 8, dout).unwrap()).unwrap();
        for (ai, gi) in a.iter().zip(grads.flatten()) {
            assert!((ai + gi).abs() < 1e-10);
        }
        let own = t.f.predict_one(&t.x).unwrap();
        assert!(attacker_grad(&t.f, &t.x, &own).unwrap().iter().all(|&v| v.abs() < 1e-15));
    }
}

#[test]
fn legit_grad_is_negated_cross_entropy_backward() {
    for seed in 0..10 {
        let t = toy(seed);
        for target in 0..4 {
            let c = legit_grad(&t.g, &t.y_v, target).unwrap();
            let y = Tensor::matrix(1, 8, t.y_v.clone()).unwrap();
            let trace = t.g.forward(&y).unwrap();
            let (_, dlogits) = softmax_cross_entropy(trace.output(), &[target]).unwrap();
            let (grads, _) = t.g.backward(&trace, &dlogits).unwrap();
            for (ci, gi) in c.iter().zip(grads.flatten()) {
                assert!((ci + gi).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn poisoning_gradient_matches_forward_mode_autodiff() {
    for seed in 0..10 {
        let t = toy(seed);
        let cfg = PoisonConfig::new(t.f.clone(), t.g.clone(), 1, 0.5);
        let obj = PoisonObjective::new(&cfg, &t.x, &t.y_v).unwrap();
        let mut rng = seeded(seed, 61);
        let y: Vec<f64> = t.y_v.iter().map(|v| v + 0.2 * (rng.random::<f64>() - 0.5)).collect();
        let closed = obj.gradient(&y).unwrap();
        for j in 0..y.len() {
            let dual: Vec<D> = y.iter().enumerate().map(|(i, &v)| D { v, d: (i == j) as u8 as f64 }).collect();
            let auto = dual_objective(&t.f, &t.g, &t.x, &t.y_v, &dual, 1, cfg.beta);
            assert!((auto.d - closed[j]).abs() < 1e-10, "seed {seed} coord {j}: {} vs {}", auto.d, closed[j]);
            assert!((auto.v - obj.value(&y).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn poisoning_starts_at_unit_similarity_and_stays_in_ball() {
    let t = toy(0);
    let cfg = PoisonConfig::new(t.f.clone(), t.g.clone(), 1, 0.5);
    let obj = PoisonObjective::new(&cfg, &t.x, &t.y_v).unwrap();
    let (ab, cd) = obj.similarities(&t.y_v).unwrap();
    assert_abs_diff_eq!(ab, 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(cd, 1.0, epsilon = 1e-12);

    let out = poison(&t.y_v, &t.x, &cfg).unwrap();
    assert_eq!(out.radii.len(), cfg.steps);
    assert!(out.radii.iter().all(|&r| r <= cfg.epsilon + 1e-12));
    assert!(out.sim_ab < 1.0 - 1e-3, "{}", out.sim_ab);
    assert!(out.sim_cd > out.sim_ab, "{} vs {}", out.sim_cd, out.sim_ab);
}

#[test]
fn vanishing_budget_keeps_the_served_vector() {
    let t = toy(1);
    let cfg = PoisonConfig::new(t.f.clone(), t.g.clone(), 0, 1e-12);
    let out = poison(&t.y_v, &t.x, &cfg).unwrap();
    for (a, b) in out.y_tilde.iter().zip(&t.y_v) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert!(PoisonConfig::new(t.f.clone(), t.g.clone(), 9, 0.5).validate().is_err());
}

// ---- detection

#[test]
fn history_ids_and_trivial_verdicts() {
    let mut store = HistoryStore::new();
    let cfg = DetectorConfig { metric: Metric::L2, threshold: 1e-6, space: Space::Projection };
    assert!(!check_similar(&store, "a", &[1.0, 2.0], &cfg).unwrap().flagged);
    assert_eq!(store.record("a", &[1.0, 2.0]).unwrap(), 0);
    assert_eq!(store.record("a", &[3.0, 2.0]).unwrap(), 1);
    assert_eq!(store.len(), 2);
    let v = check_similar(&store, "a", &[1.0, 2.0], &cfg).unwrap();
    assert!(v.flagged);
    assert_eq!(v.best_match_id, Some(0));
    assert_eq!(v.best_distance, Some(0.0));
    assert!(!check_similar(&store, "b", &[1.0, 2.0], &cfg).unwrap().flagged);
    assert!(store.record("a", &[1.0]).is_err());
}

#[test]
fn extreme_thresholds_give_extreme_rates() {
    let same = [0.1, 0.4, 2.0];
    let diff = [0.5, 3.0, 9.0];
    assert_eq!(rates_from_scores(Metric::L2, 0.0, &same, &diff).unwrap(), Rates { fpr: 0.0, fnr: 1.0 });
    assert_eq!(rates_from_scores(Metric::L2, f64::INFINITY, &same, &diff).unwrap(), Rates { fpr: 1.0, fnr: 0.0 });
}

#[test]
fn replayed_inputs_group_accounts() {
    let mut store = HistoryStore::new();
    let mut rng = seeded(5, 30);
    let mut rand_vec = |d: usize| -> Vec<f64> { (0..d).map(|_| rng.random::<f64>() - 0.5).collect() };
    let shared = rand_vec(32);
    for acct in ["mallory", "eve"] {
        store.record(acct, &rand_vec(32)).unwrap();
        store.record(acct, &shared).unwrap();
    }
    store.record("alice", &rand_vec(32)).unwrap();
    store.record("bob", &rand_vec(32)).unwrap();
    let cfg = DetectorConfig { metric: Metric::L2, threshold: 1e-6, space: Space::Projection };
    let groups = cross_account_scan(&store, &cfg).unwrap();
    assert_eq!(groups, vec![vec!["alice".to_string()], vec!["bob".to_string()], vec!["eve".to_string(), "mallory".to_string()]]);

    let mut relabeled = HistoryStore::new();
    for (old, new) in [("mallory", "m2"), ("eve", "e2"), ("alice", "a2"), ("bob", "b2")] {
        for v in store.history(old) {
            relabeled.record(new, v).unwrap();
        }
    }
    let groups = cross_account_scan(&relabeled, &cfg).unwrap();
    assert!(groups.contains(&vec!["e2".to_string(), "m2".to_string()]));
    assert_eq!(groups.len(), 3);
}

#[test]
fn toy_victim_detection_rates_are_monotone_and_calibrated() {
    let (v, s) = quick_victim(2, false);
    let pairs = make_eval_pairs(&s.test.images[..120], &ViewPolicy::contrastive(), &mut seeded(2, 50)).unwrap();
    let same = pair_scores(&v, Space::Projection, Metric::L2, &pairs.paired).unwrap();
    let diff = pair_scores(&v, Space::Projection, Metric::L2, &pairs.distinct).unwrap();
    let taus = candidate_thresholds(&same, &diff);
    let rates = sweep(&v, Metric::L2, Space::Projection, &pairs, &taus).unwrap();
    for w in rates.windows(2) {
        assert!(w[0].1.fpr <= w[1].1.fpr && w[0].1.fnr >= w[1].1.fnr);
    }
    let cfg = calibrate(&v, Metric::L2, Space::Projection, &pairs, 0.05).unwrap();
    assert!(evaluate_rates(&v, &cfg, &pairs).unwrap().fpr <= 0.05);
}

// ---- reactive defenses

#[test]
fn constant_half_rates_are_inconclusive() {
    let t = ownership_ttest(&[0.5; 20], 0.5).unwrap();
    assert_eq!(t.claim, Claim::Inconclusive);
    assert_eq!(t.ttest.delta_mu, 0.0);
    assert!(ownership_ttest(&[0.9; 19], 0.5).is_err());
    let line = VerdictRecord::new("watermark", &t.ttest, t.claim).to_json_line();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["claim"], "inconclusive");
    assert_eq!(v["test"], "watermark");
}

#[test]
fn di_scores_match_recomputation() {
    let (v, s) = quick_victim(3, false);
    let policy = ViewPolicy::contrastive();
    let (private, public) = (&s.train.images[..12], &s.test.images[..12]);
    let scores = di_scores(&v.encoder, &v.head, private, public, 3, &policy, &mut seeded(3, 50)).unwrap();

    let mut rng = seeded(3, 50);
    let embed = |imgs: &[GridImage]| v.head.predict(&encode(&v.encoder, imgs).unwrap()).unwrap();
    let mut recompute = |imgs: &[GridImage]| -> Vec<f64> {
        let clean = embed(imgs);
        let mut totals = vec![0.0; imgs.len()];
        for _ in 0..3 {
            let views: Vec<GridImage> = imgs.iter().map(|i| sample_view(i, &policy, &mut rng).unwrap().0).collect();
            let aug = embed(&views);
            for (i, tot) in totals.iter_mut().enumerate() {
                *tot += Metric::L2.score(clean.row(i), aug.row(i));
            }
        }
        totals.into_iter().map(|t| t / 3.0).collect()
    };
    let l_t = recompute(private);
    let l_p = recompute(public);
    for (a, b) in scores.l_t.iter().zip(&l_t).chain(scores.l_p.iter().zip(&l_p)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn degenerate_dataset_inference_cases() {
    let (v, s) = quick_victim(4, false);
    let imgs = &s.test.images[..10];
    let id = ViewPolicy::identity();
    let scores = di_scores(&v.encoder, &v.head, imgs, imgs, 1, &id, &mut seeded(4, 50)).unwrap();
    assert!(scores.l_t.iter().chain(&scores.l_p).all(|&g| g == 0.0));
    let same = DIScores::new(vec![0.3, 0.5, 0.4], vec![0.3, 0.5, 0.4]).unwrap();
    let test = di_test(&same).unwrap();
    assert_eq!(test.ttest.t, 0.0);
    assert_eq!(test.claim, Claim::Inconclusive);
    assert!(di_scores(&v.encoder, &v.head, imgs, &imgs[..5], 1, &id, &mut seeded(4, 50)).is_err());
    assert!(di_scores(&v.encoder, &v.head, imgs, imgs, 0, &id, &mut seeded(4, 50)).is_err());
    assert_eq!(rep_distance(&v.encoder, &v.encoder, imgs).unwrap(), 0.0);
}

#[test]
fn mismatched_suspect_needs_an_adapter() {
    let (v, s) = quick_victim(5, true);
    let pred = v.aug_predictor.as_ref().unwrap();
    let narrow = Network::new(&Architecture::mlp(&[256, 64, 24]), &mut seeded(5, 1)).unwrap();
    let cfg = WatermarkCheckConfig { pairs_per_subset: 10, ..Default::default() };
    let err = verify_watermark(&narrow, pred, &s.test.images, None, &cfg, &mut seeded(5, 50)).unwrap_err();
    assert!(matches!(err, Error::AdapterRequired { suspect: 24, expected: 32 }));
    let verdict = verify_watermark(&narrow, pred, &s.test.images, Some((&v.encoder, &s.train.images)), &cfg, &mut seeded(5, 50)).unwrap();
    assert!(verdict.adapted);
    assert_eq!(verdict.rates.len(), 20);
    let own = verify_watermark(&v.encoder, pred, &s.test.images, None, &cfg, &mut seeded(5, 50)).unwrap();
    assert!(!own.adapted);
}

#[test]
fn ridge_adapter_recovers_a_linear_map() {
    let (v, s) = quick_victim(6, false);
    // suspect = victim followed by an invertible linear map, so the adapter can undo it
    let mut rng = seeded(6, 1);
    let d = v.encoder.output_dim();
    let w: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 2.0 } else { 0.1 * (rng.random::<f64>() - 0.5) }).collect();
    let mut layers = v.encoder.layers().to_vec();
    layers.push(exlab_core::nn::DenseLayer::new(Tensor::matrix(d, d, w).unwrap(), Tensor::zeros(&[d]), exlab_core::nn::Activation::Identity).unwrap());
    let suspect = Network::from_layers(layers).unwrap();
    let adapted = fit_ridge_adapter(&suspect, &v.encoder, &s.train.images, 1e-8).unwrap();
    let dist = rep_distance(&v.encoder, &adapted, &s.test.images).unwrap();
    assert!(dist < 1e-3, "{dist}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ownership_claim_ignores_rate_order(rates in proptest::collection::vec(0.0f64..1.0, 20..40), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let mut shuffled = rates.clone();
        shuffled.shuffle(&mut seeded(seed, 0));
        let a = ownership_ttest(&rates, 0.5).unwrap();
        let b = ownership_ttest(&shuffled, 0.5).unwrap();
        prop_assert_eq!(a.claim, b.claim);
        prop_assert!((a.ttest.t - b.ttest.t).abs() < 1e-9 * (1.0 + a.ttest.t.abs()));
    }

    #[test]
    fn nearest_neighbour_matches_brute_force(
        hist in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 1..12),
        q in proptest::collection::vec(-1.0f64..1.0, 4),
        cosine in any::<bool>(),
    ) {
        let metric = if cosine { Metric::Cosine } else { Metric::L2 };
        let mut store = HistoryStore::new();
        for h in &hist {
            store.record("a", h).unwrap();
        }
        let cfg = DetectorConfig { metric, threshold: 0.5, space: Space::Projection };
        let v = check_similar(&store, "a", &q, &cfg).unwrap();
        let scores: Vec<f64> = hist.iter().map(|h| metric.score(h, &q)).collect();
        let best = if cosine { scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max) } else { scores.iter().cloned().fold(f64::INFINITY, f64::min) };
        prop_assert_eq!(v.best_distance, Some(best));
        prop_assert_eq!(scores[v.best_match_id.unwrap()], best);
        prop_assert_eq!(v.flagged, metric.flags(best, 0.5));
    }

    #[test]
    fn rates_are_monotone_in_threshold(
        same in proptest::collection::vec(0.0f64..5.0, 1..30),
        diff in proptest::collection::vec(0.0f64..5.0, 1..30),
        t1 in 0.0f64..6.0,
        t2 in 0.0f64..6.0,
    ) {
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let a = rates_from_scores(Metric::L2, lo, &same, &diff).unwrap();
        let b = rates_from_scores(Metric::L2, hi, &same, &diff).unwrap();
        prop_assert!(a.fpr <= b.fpr && a.fnr >= b.fnr);
        let c = rates_from_scores(Metric::Cosine, -lo, &same, &diff).unwrap();
        let d = rates_from_scores(Metric::Cosine, -hi, &same, &diff).unwrap();
        prop_assert!(c.fpr <= d.fpr);
    }
}
