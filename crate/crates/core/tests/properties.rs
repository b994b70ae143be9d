use posdiff::adapters::{greedy_assign, order_from_positions, GridSpec};
use posdiff::checkpoint::Checkpoint;
use posdiff::data::{generate, DatasetSpec, Split};
use posdiff::diffusion::{consistent_noise, reverse_process, DiffusionConfig, NoiseSchedule, PositionSet};
use posdiff::metrics::{inversions, kendall_tau, pairwise_accuracy, spearman, MetricsReport, Placement};
use posdiff::model::{Model, ModelConfig};
use posdiff::task::{instances_from_dataset, Task};
use posdiff::trainer::{evaluate, EvalConfig, Predictor};
use proptest::prelude::*;

fn permutation(k: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<usize>> {
    k.prop_flat_map(|k| Just((0..k).collect::<Vec<_>>()).prop_shuffle())
}

proptest! {
    #[test]
    fn rank_metrics_stay_in_range(pred in permutation(2..=12), seed in any::<u64>()) {
        let mut truth: Vec<usize> = (0..pred.len()).collect();
        let n = truth.len();
        truth.rotate_left((seed as usize) % n);
        let tau = kendall_tau(&pred, &truth).unwrap();
        let rho = spearman(&pred, &truth).unwrap();
        let pw = pairwise_accuracy(&pred, &truth).unwrap();
        prop_assert!((-1.0..=1.0).contains(&tau));
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
        prop_assert_eq!(pw, (tau + 1.0) / 2.0);
        let reversed: Vec<usize> = pred.iter().map(|&r| n - 1 - r).collect();
        // reversing the prediction turns every concordant pair into a discordant one
        let c = (n * (n - 1) / 2) as u64;
        prop_assert_eq!(inversions(&reversed, &truth).unwrap(), c - inversions(&pred, &truth).unwrap());
    }

    #[test]
    fn identical_rankings_are_perfect(pred in permutation(2..=15)) {
        prop_assert_eq!(kendall_tau(&pred, &pred).unwrap(), 1.0);
        prop_assert_eq!(pairwise_accuracy(&pred, &pred).unwrap(), 1.0);
        prop_assert!((spearman(&pred, &pred).unwrap() - 1.0).abs() < 1e-12);
        let report = MetricsReport::from_placements(&[Placement::new(pred.clone(), pred).unwrap()]).unwrap();
        prop_assert_eq!(report.pmr, 100.0);
        prop_assert_eq!(report.direct_comparison, 100.0);
    }

    #[test]
    fn greedy_decoding_is_a_permutation(side in 1usize..=6, coords in prop::collection::vec(-3.0f64..3.0, 72)) {
        let grid = GridSpec::new(side).unwrap();
        let k = side * side;
        let a = greedy_assign(&coords[..2 * k], &grid).unwrap();
        let mut slots = a.slots.clone();
        slots.sort_unstable();
        prop_assert_eq!(slots, (0..k).collect::<Vec<_>>());
    }

    #[test]
    fn scalar_decoding_follows_sorted_order(pos in prop::collection::vec(-2.0f64..2.0, 1..20)) {
        let a = order_from_positions(&pos).unwrap();
        for i in 0..pos.len() {
            for j in 0..pos.len() {
                if pos[i] < pos[j] {
                    prop_assert!(a.slots[i] < a.slots[j]);
                }
            }
        }
    }

    #[test]
    fn planted_noise_reaches_its_target(
        target in prop::collection::vec(-1.5f64..1.5, 2..24),
        ratio in 1usize..=40,
    ) {
        let cfg = DiffusionConfig { steps: 200, inference_ratio: ratio, ..Default::default() };
        let sched = NoiseSchedule::from_config(&cfg).unwrap();
        let n = target.len();
        let target = PositionSet::new(1, target).unwrap();
        let x = reverse_process(|x: &PositionSet, t| consistent_noise(x, &target, t, &sched), n, 1, &cfg, &sched, None)
            .unwrap();
        for (a, b) in x.coords().iter().zip(target.coords()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn oracle_solves_generated_puzzles_and_sequences() {
    let specs = [
        DatasetSpec { count: 12, image_size: 64, grid_sizes: vec![2, 3, 5], ..DatasetSpec::default() },
        DatasetSpec { count: 30, k_min: 2, k_max: 9, vocab: 64, ..DatasetSpec::sequences() },
    ];
    for spec in specs {
        let ds = generate(&spec).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            let inst = instances_from_dataset(&ds, split).unwrap();
            if inst.is_empty() {
                continue;
            }
            let ev = evaluate(Predictor::Oracle, &inst, &DiffusionConfig::default(), &EvalConfig::default()).unwrap();
            assert_eq!(ev.report.pmr, 100.0);
            assert_eq!(ev.report.kendall_tau, 1.0);
        }
    }
}

#[test]
fn checkpoint_reload_reproduces_predictions() {
    let cfg = ModelConfig { width: 16, heads: 2, time_dim: 8, feature_dim: 8, vocab: 64, ..Default::default() };
    let model: Model<f32> = Model::new(Task::Sequence, &cfg, 40).unwrap();
    let dc = DiffusionConfig { steps: 40, inference_ratio: 4, ..Default::default() };
    let ds = generate(&DatasetSpec { count: 20, vocab: 64, splits: [0.0, 0.0, 1.0], ..DatasetSpec::sequences() }).unwrap();
    let inst = instances_from_dataset(&ds, Split::Test).unwrap();
    let before = evaluate(Predictor::Model(&model), &inst, &dc, &EvalConfig::default()).unwrap();
    let bytes = Checkpoint::from_model(&model, &dc, 0).to_bytes().unwrap();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    let after = evaluate(Predictor::Model(&loaded.model), &inst, &dc, &EvalConfig::default()).unwrap();
    assert_eq!(before.positions, after.positions);
    assert_eq!(before.report.to_text(), after.report.to_text());
}
