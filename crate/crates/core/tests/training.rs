use lpforge::toytrain::{make_dataset, train, DatasetSpec, Scheme, TrainConfig};

#[test]
fn default_baseline_reaches_95_percent() {
    // Recorded reference run: seed 1 finishes at 0.975.
    let (_, h) = train(&TrainConfig::default(), Scheme::Baseline, None).unwrap();
    assert!(h.final_accuracy() >= 0.95, "{}", h.final_accuracy());
    assert_eq!(h.epochs.len(), 15);
    assert!(h.epochs.iter().all(|e| (0.0..=1.0).contains(&e.eval_accuracy)));
}

#[test]
fn low_precision_does_not_beat_baseline_on_matched_seeds() {
    for seed in 1..=3 {
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let (_, base) = train(&cfg, Scheme::Baseline, None).unwrap();
        let (_, low) = train(&cfg, Scheme::LowPrecision, None).unwrap();
        assert!(low.final_accuracy() <= base.final_accuracy(), "seed {seed}: {} > {}", low.final_accuracy(), base.final_accuracy());
    }
}

#[test]
fn separable_data_is_learned_exactly() {
    let cfg = TrainConfig {
        dataset: DatasetSpec { classes: 4, sigma: 0.0, ..DatasetSpec::default() },
        ..TrainConfig::default()
    };
    for scheme in [Scheme::Baseline, Scheme::LowPrecision, Scheme::Wrpn] {
        let (_, h) = train(&cfg, scheme, None).unwrap();
        assert_eq!(h.final_accuracy(), 1.0, "{scheme}");
    }
}

#[test]
fn history_round_trips_through_json_lines() {
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let (_, h) = train(&cfg, Scheme::Wrpn, None).unwrap();
    let back = lpforge::toytrain::TrainHistory::from_json_lines(h.scheme, h.seed, &h.to_json_lines()).unwrap();
    assert_eq!(back, h);
}

#[test]
fn default_dataset_shape() {
    let d = make_dataset(&DatasetSpec::default(), 11).unwrap();
    assert_eq!((d.len(), d.train_x.len(), d.eval_x.len()), (2000, 1600, 400));
}
