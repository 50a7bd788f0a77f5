//! Property tests: probability outputs, the convexity inequality for the
//! output ensemble, loss shapes, aggregation symmetries, histogram and
//! partition invariants, and config/snapshot round trips.

use proptest::collection::vec;
use proptest::prelude::*;

use ecdnn::aggregate::{ma_aggregate, Ensemble};
use ecdnn::config::ExperimentSpec;
use ecdnn::data::{Dataset, LabeledBatch};
use ecdnn::harness::partition;
use ecdnn::loss::{local_loss, loss_sim};
use ecdnn::metrics::distribution;
use ecdnn::net::{DenseNet, Layout, ParamVec};
use ecdnn::snapshot;

/// A small random net plus a batch of inputs/labels that fit it.
fn net_and_batch() -> impl Strategy<Value = (DenseNet, LabeledBatch)> {
    (2usize..5, 2usize..7, 1usize..5).prop_flat_map(|(classes, hidden, n)| {
        let layout = Layout::new(vec![2, hidden, classes]).unwrap();
        let count = layout.param_count();
        (
            vec(-3.0f64..3.0, count),
            vec((-4.0f64..4.0, -4.0f64..4.0), n),
            vec(0usize..classes, n),
        )
            .prop_map(move |(params, points, labels)| {
                let net =
                    DenseNet::new(ParamVec::from_values(layout.clone(), params).unwrap());
                let inputs = points.into_iter().map(|(a, b)| vec![a, b]).collect();
                (net, LabeledBatch::new(inputs, labels).unwrap())
            })
    })
}

fn member_set() -> impl Strategy<Value = (Vec<DenseNet>, LabeledBatch)> {
    (1usize..5, net_and_batch()).prop_flat_map(|(extra, (net, batch))| {
        let layout = net.layout().clone();
        let count = layout.param_count();
        vec(vec(-3.0f64..3.0, count), extra).prop_map(move |others| {
            let mut members = vec![net.clone()];
            for values in others {
                members.push(DenseNet::new(
                    ParamVec::from_values(layout.clone(), values).unwrap(),
                ));
            }
            (members, batch.clone())
        })
    })
}

proptest! {
    #[test]
    fn forward_outputs_are_probability_vectors((net, batch) in net_and_batch()) {
        for x in batch.inputs() {
            let p = net.forward(x).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1200))]

    // The convexity guarantee for output averaging under cross entropy,
    // quantified over random member sets and batches.
    #[test]
    fn ensemble_loss_never_exceeds_mean_member_loss((members, batch) in member_set()) {
        let ens = Ensemble::new(members.iter().collect()).unwrap();
        let gap = ens.jensen_gap(&batch).unwrap();
        prop_assert!(
            gap.ensemble_loss <= gap.mean_member_loss + 1e-9,
            "{} > {}",
            gap.ensemble_loss,
            gap.mean_member_loss
        );
    }
}

proptest! {
    #[test]
    fn similarity_loss_is_nonpositive(
        (a, b) in (1usize..6).prop_flat_map(|len| {
            (vec(0.0f64..1.0, len), vec(0.0f64..1.0, len))
        }),
    ) {
        let v = loss_sim(&a, &b).unwrap();
        prop_assert!(v <= 0.0);
        prop_assert_eq!(loss_sim(&a, &a).unwrap(), 0.0);
        if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9) {
            prop_assert!(v < 0.0);
        }
    }

    #[test]
    fn local_loss_is_linear_in_the_diversity_coefficient(
        (net, batch) in net_and_batch(),
        alpha in 0.01f64..3.0,
    ) {
        let classes = net.layout().class_count();
        let zbar: Vec<Vec<f64>> = batch
            .inputs()
            .iter()
            .map(|_| {
                let raw = vec![1.0 / classes as f64; classes];
                raw
            })
            .collect();
        let base = local_loss(&net, &batch, Some(&zbar), 0.0).unwrap();
        let sim_total: f64 = batch
            .inputs()
            .iter()
            .zip(&zbar)
            .map(|(x, z)| loss_sim(&net.forward(x).unwrap(), z).unwrap())
            .sum();
        let full = local_loss(&net, &batch, Some(&zbar), alpha).unwrap();
        prop_assert!((full - (base + alpha * sim_total)).abs() < 1e-10);
    }

    #[test]
    fn averaging_is_permutation_invariant_and_idempotent(
        values in vec(vec(-5.0f64..5.0, 12), 1..6),
        rotation in 0usize..6,
    ) {
        let layout = Layout::new(vec![2, 2, 2]).unwrap();
        let members: Vec<ParamVec> = values
            .into_iter()
            .map(|v| ParamVec::from_values(layout.clone(), v).unwrap())
            .collect();
        let mut rotated: Vec<&ParamVec> = members.iter().collect();
        rotated.rotate_left(rotation % members.len());
        let fwd = ma_aggregate(&members.iter().collect::<Vec<_>>()).unwrap();
        let rot = ma_aggregate(&rotated).unwrap();
        for (a, b) in fwd.values().iter().zip(rot.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        let same: Vec<&ParamVec> = std::iter::repeat(&members[0]).take(4).collect();
        let avg = ma_aggregate(&same).unwrap();
        for (a, b) in avg.values().iter().zip(members[0].values()) {
            prop_assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn ensemble_prediction_is_permutation_invariant((members, batch) in member_set()) {
        let fwd = Ensemble::new(members.iter().collect()).unwrap();
        let rev = Ensemble::new(members.iter().rev().collect()).unwrap();
        for x in batch.inputs() {
            let a = fwd.predict(x).unwrap();
            let b = rev.predict(x).unwrap();
            for (pa, pb) in a.iter().zip(&b) {
                prop_assert!((pa - pb).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn histogram_counts_sum_to_input_size(
        values in vec(-10.0f64..10.0, 1..200),
        width in 0.01f64..2.0,
    ) {
        let h = distribution(&values, width).unwrap();
        let total: usize = h.bins.iter().map(|&(_, c)| c).sum();
        prop_assert_eq!(total, values.len());
        prop_assert_eq!(h.total, values.len());
        let negatives = values.iter().filter(|&&v| v < 0.0).count();
        prop_assert!((h.negative_fraction - negatives as f64 / values.len() as f64).abs() < 1e-12);
        // Every value lands in the bin holding floor(v / width).
        for &v in &values {
            let lo = (v / width).floor() * width;
            prop_assert!(h.bins.iter().any(|&(bin_lo, _)| (bin_lo - lo).abs() < 1e-9));
        }
    }

    #[test]
    fn partition_covers_each_example_exactly_once(
        n in 2usize..400,
        k in 1usize..12,
        seed in 0u64..1000,
    ) {
        prop_assume!(k <= n);
        let features = (0..n).map(|i| vec![i as f64]).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        let ds = Dataset::new(features, labels, 2).unwrap();
        let shards = partition(&ds, k, seed).unwrap();
        prop_assert_eq!(shards.len(), k);
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        let max = sizes.iter().max().unwrap();
        let min = sizes.iter().min().unwrap();
        prop_assert!(max - min <= 1);
    }

    #[test]
    fn snapshots_round_trip_any_bit_pattern(bits in vec(any::<u64>(), 4)) {
        let layout = Layout::new(vec![1, 1]).unwrap();
        // Interpret arbitrary bits as f64 payloads, NaNs included: the hex
        // encoding must preserve them exactly.
        let params = ParamVec::from_values(
            layout,
            bits[..2].iter().map(|&b| f64::from_bits(b)).collect(),
        )
        .unwrap();
        let text = snapshot::to_json(&params).unwrap();
        let back = snapshot::from_json(&text).unwrap();
        for (a, b) in back.values().iter().zip(params.values()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn config_round_trips_through_toml(
        total in 1u64..5000,
        lr in 0.001f64..0.5,
        alpha in 0.0f64..1.0,
        tau in 1u64..500,
        seeds in vec(0u64..100, 1..4),
    ) {
        let text = format!(
            r#"
name = "prop"
[dataset.gaussians]
n = 100
dim = 2
classes = 2
noise = 0.5
seed = 1
[model]
hidden = [4]
[train]
total_iterations = {total}
learning_rate = {lr}
alpha = {alpha}
[sweep]
taus = [{tau}]
workers = [2]
seeds = [{}]
"#,
            seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        );
        let spec = ExperimentSpec::from_toml_str(&text).unwrap();
        let round = ExperimentSpec::from_toml_str(&spec.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(round, spec);
    }
}
