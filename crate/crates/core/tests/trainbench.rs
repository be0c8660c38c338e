use flashopt::optimizers::{Mode, OptimizerKind, OptimizerState, VarianceScheme};
use flashopt::trainbench::{memory_report, presets, DatasetKind, DatasetSpec, TrainConfig, Trainer};

fn small(kind: OptimizerKind, data: DatasetKind, mode: Mode, seed: u64) -> TrainConfig {
    let base = presets::parity(kind, data, mode, seed);
    TrainConfig {
        steps: 150,
        hidden: vec![16, 8],
        dataset: DatasetSpec {
            n_samples: 512,
            ..base.dataset.clone()
        },
        ..base
    }
}

fn final_bits(mut config: TrainConfig, release: bool) -> Vec<Vec<u32>> {
    config.gradient_release = release;
    let mut t = Trainer::new(config).unwrap();
    let (report, _) = t.run(None).unwrap();
    assert!(!report.diverged());
    t.master_weights()
        .iter()
        .map(|w| w.iter().map(|x| x.to_bits()).collect())
        .collect()
}

#[test]
fn gradient_release_matches_deferred_updates_bitwise() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::AdamW, OptimizerKind::Lion] {
        for mode in [Mode::Reference, Mode::Flash] {
            for data in [DatasetKind::TwoMoons, DatasetKind::LinearRegression] {
                let c = small(kind, data, mode, 11);
                assert_eq!(final_bits(c.clone(), false), final_bits(c, true), "{kind:?} {mode:?} {data:?}");
            }
        }
    }
}

#[test]
fn memory_table() {
    let rows = [
        (OptimizerKind::Sgd, Mode::Reference, false, 12.0),
        (OptimizerKind::Sgd, Mode::Reference, true, 8.0),
        (OptimizerKind::Sgd, Mode::Flash, false, 6.0),
        (OptimizerKind::Sgd, Mode::Flash, true, 4.0),
        (OptimizerKind::AdamW, Mode::Reference, false, 16.0),
        (OptimizerKind::AdamW, Mode::Reference, true, 12.0),
        (OptimizerKind::AdamW, Mode::Flash, false, 7.0),
        (OptimizerKind::AdamW, Mode::Flash, true, 5.0),
    ];
    for (kind, mode, release, total) in rows {
        let states = [OptimizerState::new(&vec![0.1; 320], kind, mode, VarianceScheme::Companded).unwrap()];
        let r = memory_report(&states, release).unwrap();
        assert_eq!(r.total, total, "{kind:?} {mode:?} release={release}");
        if mode == Mode::Flash {
            assert_eq!(r.scale_overhead_per_buffer, 0.0625);
            assert_eq!(r.scale_overhead_exact, 0.0625 * r.scaled_buffers as f64);
        }
    }
}

#[test]
fn trajectories_are_reproducible() {
    let c = small(OptimizerKind::AdamW, DatasetKind::TwoMoons, Mode::Flash, 5);
    let (a, ta) = Trainer::new(c.clone()).unwrap().run(Some(25)).unwrap();
    let (b, tb) = Trainer::new(c).unwrap().run(Some(25)).unwrap();
    assert_eq!(a.losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(ta, tb);
    assert_eq!(ta.unwrap().snapshots.len(), 6);
}
