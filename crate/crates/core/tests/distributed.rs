//! Partition invariance, transport equivalence and run-to-run determinism of
//! whole training runs.

use gbun::booster::{predict, train, write_model, BoosterModel, ModeChoice, TrainConfig};
use gbun::collective::{predicted_comm_values, TransportKind};
use gbun::dataset::PartitionStrategy;
use gbun::synthetic::{blobs, separable_binary};

fn max_weight_gap(a: &BoosterModel, b: &BoosterModel) -> f64 {
    assert_eq!(a.rounds.len(), b.rounds.len());
    a.rounds
        .iter()
        .zip(&b.rounds)
        .flat_map(|(x, y)| x.weights.as_slice().iter().zip(y.weights.as_slice()))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn base(rounds: u32) -> TrainConfig {
    TrainConfig {
        k: 16,
        rounds,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn any_partition_count_gives_the_same_model() {
    let ds = separable_binary(400, 30, 6, 11);
    let single = train(&base(10), &ds, None, &mut |_| {}).unwrap();
    for s in [2, 4, 8] {
        for strategy in [PartitionStrategy::Contiguous, PartitionStrategy::RoundRobin] {
            let cfg = TrainConfig {
                partitions: s,
                partition_strategy: strategy,
                ..base(10)
            };
            let multi = train(&cfg, &ds, None, &mut |_| {}).unwrap();
            let gap = max_weight_gap(&single.model, &multi.model);
            assert!(gap <= 1e-9, "S={s} {strategy}: {gap}");
            for (x, y) in single
                .train_scores
                .as_slice()
                .iter()
                .zip(multi.train_scores.as_slice())
            {
                assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn multiclass_partitions_agree() {
    let ds = blobs(300, 5, 4, 0.4, 3);
    let cfg = TrainConfig {
        objective: "multi:softmax".into(),
        ..base(6)
    };
    let one = train(&cfg, &ds, None, &mut |_| {}).unwrap();
    let four = train(&TrainConfig { partitions: 4, ..cfg }, &ds, None, &mut |_| {}).unwrap();
    assert!(max_weight_gap(&one.model, &four.model) <= 1e-9);
    assert_eq!(four.forward_passes, vec![6; 4]);
}

#[test]
fn tcp_and_in_process_are_bit_identical() {
    let ds = separable_binary(300, 40, 5, 12);
    let mem = TrainConfig {
        partitions: 3,
        ..base(5)
    };
    let tcp = TrainConfig {
        transport: TransportKind::Tcp,
        ..mem.clone()
    };
    let a = train(&mem, &ds, None, &mut |_| {}).unwrap();
    let b = train(&tcp, &ds, None, &mut |_| {}).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.train_scores, b.train_scores);
    for ledger in &b.ledgers {
        for r in ledger.rounds() {
            assert_eq!(r.values_sent as usize, predicted_comm_values(16));
            assert_eq!(r.bytes_on_wire, r.frames * 16 + (r.values_sent + r.values_received) * 8);
        }
    }
}

#[test]
fn repeated_runs_write_identical_files() {
    let ds = separable_binary(200, 20, 20, 13);
    for mode in [ModeChoice::Dense, ModeChoice::Hashed] {
        let cfg = TrainConfig {
            mode,
            partitions: 2,
            ..base(4)
        };
        let files: Vec<Vec<u8>> = (0..2)
            .map(|_| {
                let out = train(&cfg, &ds, None, &mut |_| {}).unwrap();
                let mut buf = Vec::new();
                write_model(&out.model, &mut buf).unwrap();
                buf
            })
            .collect();
        assert_eq!(files[0], files[1], "{mode}");
    }
}

#[test]
fn prediction_uses_training_statistics() {
    let ds = separable_binary(200, 20, 4, 14);
    let out = train(&base(3), &ds, None, &mut |_| {}).unwrap();
    // scoring a subset must not refit normalization on that subset
    let head = ds.slice_rows(0..10);
    let full = predict(&out.model, &ds).unwrap();
    let part = predict(&out.model, &head).unwrap();
    assert_eq!(part.as_slice(), &full.as_slice()[..10]);
}
