use auctionkit::first_stage::{recover_pseudo_values, FirstStageEstimator, FirstStageOptions, PseudoValueSample};
use auctionkit::gmm::{builtin_models, estimate, GmmOptions, ModelOptions, WeightingMode};
use auctionkit::sim::{simulate_dataset, DgpSpec, SpecId};
use auctionkit::{load_dataset, save_dataset};

fn design(spec: SpecId, l: usize) -> DgpSpec {
    DgpSpec::new(spec, 5, l).unwrap()
}

#[test]
fn csv_round_trip_is_exact() {
    let sim = simulate_dataset(&design(SpecId::D2Sum, 40), 11).unwrap();
    let mut buf = Vec::new();
    save_dataset(&sim.dataset, &mut buf).unwrap();
    let back = load_dataset(buf.as_slice()).unwrap();
    assert_eq!(back, sim.dataset);
}

#[test]
fn bids_shade_values_and_keep_their_order() {
    let sim = simulate_dataset(&design(SpecId::D1, 60), 4).unwrap();
    for (a, vals) in sim.dataset.auctions().iter().zip(&sim.values) {
        for (p, (&b, &v)) in a.bids.iter().zip(vals).enumerate() {
            assert!(b < v);
            for (&b2, &v2) in a.bids.iter().zip(vals).skip(p + 1) {
                assert_eq!(b < b2, v < v2);
            }
        }
    }
}

#[test]
fn simulation_ignores_thread_count() {
    let dgp = design(SpecId::D2Ratio, 30);
    let run = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| simulate_dataset(&dgp, 9).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn gmm_on_true_values_recovers_theta() {
    let sim = simulate_dataset(&design(SpecId::D1, 400), 21).unwrap();
    let sample = PseudoValueSample::from_true_values(&sim.dataset, &sim.values).unwrap();
    let model = builtin_models().build("lognormal-score", 1, &ModelOptions::default()).unwrap();
    let fit = estimate(model.as_ref(), &sample, WeightingMode::Identity, &GmmOptions::default()).unwrap();
    assert!(fit.converged);
    assert!((fit.theta_hat[0] - 1.0).abs() < 0.15, "{:?}", fit.theta_hat);
    assert!((fit.theta_hat[1] - 1.0).abs() < 0.15, "{:?}", fit.theta_hat);
}

#[test]
fn pseudo_values_track_true_values() {
    let sim = simulate_dataset(&design(SpecId::D1, 200), 2).unwrap();
    let est = FirstStageEstimator::new(&sim.dataset, &FirstStageOptions::default_for(1)).unwrap();
    let s = recover_pseudo_values(&est).unwrap();
    let truth: Vec<f64> = sim.values.iter().flatten().copied().collect();
    assert_eq!(s.len(), truth.len());
    let mut errs: Vec<f64> = s.values().iter().zip(&truth).map(|(a, b)| (a - b).abs() / b).collect();
    errs.sort_by(f64::total_cmp);
    // Median relative error; the tails near the truncation bounds are worse.
    assert!(errs[errs.len() / 2] < 0.1, "median relative error {}", errs[errs.len() / 2]);
}
