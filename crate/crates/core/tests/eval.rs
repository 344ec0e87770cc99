mod common;

use common::sorted_top_k_error;
use mrdis::data::Dataset;
use mrdis::disambig::{redistribute, Partition};
use mrdis::eval::{evaluate, fuse_dumps, per_class_accuracy, top_k_error, ScoreDump};
use mrdis::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Score rows with values on a coarse grid so equal scores are common.
fn tied_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0..4) as f64).collect();
            let t: f64 = raw.iter().sum::<f64>().max(1.0);
            raw.into_iter().map(|v| v / t).collect()
        })
        .collect()
}

fn prob_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let t: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / t).collect()
        })
        .collect()
}

fn tiny_dataset(labels: &[usize], k: usize) -> Dataset {
    let mut d = Dataset::new(1, 3, k, 0).unwrap();
    for (i, &y) in labels.iter().enumerate() {
        d.push(y, &[i as u8, (i >> 8) as u8, 7]).unwrap();
    }
    d
}

fn dump(rows: &[Vec<f64>], data: &Dataset, model: u8) -> ScoreDump {
    ScoreDump {
        model: [model; 32],
        dataset: data.fingerprint(),
        resolution: 1,
        ids: (0..rows.len() as u32).collect(),
        width: rows[0].len(),
        values: rows.iter().flatten().copied().collect(),
    }
}

fn random_partition(rng: &mut ChaCha8Rng, n: usize) -> Partition {
    let k = rng.gen_range(1..=n);
    let mut groups: Vec<Vec<usize>> = (0..k).map(|g| vec![g]).collect();
    for c in k..n {
        groups[rng.gen_range(0..k)].push(c);
    }
    Partition::from_groups(n, groups, 0.5).unwrap()
}

#[test]
fn top_k_rejects_bad_arguments() {
    let rows = vec![vec![0.5, 0.5]];
    assert!(top_k_error(&rows, &[0], 0).is_err());
    assert!(top_k_error(&rows, &[0], 3).is_err());
    assert!(top_k_error(&rows, &[2], 1).is_err());
    assert!(top_k_error(&rows, &[0, 1], 1).is_err());
    // equal scores: the lower index ranks first
    assert_eq!(top_k_error(&rows, &[0], 1).unwrap(), 0.0);
    assert_eq!(top_k_error(&rows, &[1], 1).unwrap(), 1.0);
}

#[test]
fn evaluation_refuses_a_different_dataset() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = tiny_dataset(&[0, 1, 2], 3);
    let b = tiny_dataset(&[0, 1, 1], 3);
    let d = dump(&prob_rows(&mut rng, 3, 3), &a, 1);
    assert!(matches!(evaluate(&d, &b, None), Err(Error::Mismatch(_))));
}

#[test]
fn fusing_a_dump_with_itself_changes_no_number() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let labels: Vec<usize> = (0..200).map(|_| rng.gen_range(0..7)).collect();
    let data = tiny_dataset(&labels, 7);
    let d = dump(&prob_rows(&mut rng, 200, 7), &data, 3);
    let fused = fuse_dumps(&[&d, &d], Some(&[0.5, 0.5])).unwrap();
    assert_eq!(fused.values, d.values);
    let (a, b) = (
        evaluate(&d, &data, None).unwrap(),
        evaluate(&fused, &data, None).unwrap(),
    );
    assert_eq!(
        (a.top1_error, a.top5_error, &a.per_class_accuracy),
        (b.top1_error, b.top5_error, &b.per_class_accuracy)
    );
    assert_ne!(a.model_fingerprint, b.model_fingerprint);
    assert_eq!(fuse_dumps(&[&d], Some(&[1.0])).unwrap(), d);
}

#[test]
fn identity_partition_leaves_the_report_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let labels: Vec<usize> = (0..50).map(|_| rng.gen_range(0..6)).collect();
    let data = tiny_dataset(&labels, 6);
    let d = dump(&prob_rows(&mut rng, 50, 6), &data, 3);
    let plain = evaluate(&d, &data, None).unwrap();
    let ident = evaluate(&d, &data, Some(&Partition::identity(6))).unwrap();
    assert_eq!(
        (plain.top1_error, plain.top5_error),
        (ident.top1_error, ident.top5_error)
    );
    assert!(ident.partition_fingerprint.is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn top_k_matches_sorting(n in 1usize..60, k in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = tied_rows(&mut rng, n, k);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let mut last = 1.0;
        for kk in 1..=k {
            let e = top_k_error(&rows, &labels, kk).unwrap();
            prop_assert_eq!(e, sorted_top_k_error(&rows, &labels, kk));
            prop_assert!(e <= last);
            last = e;
        }
        prop_assert_eq!(last, 0.0);
    }

    #[test]
    fn per_class_accuracy_matches_counting(n in 1usize..80, k in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = tied_rows(&mut rng, n, k);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let acc = per_class_accuracy(&rows, &labels, k);
        for c in 0..k {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if idx.is_empty() {
                prop_assert_eq!(acc[c], None);
                continue;
            }
            let sub: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
            let want = 1.0 - sorted_top_k_error(&sub, &vec![c; idx.len()], 1);
            prop_assert!((acc[c].unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn partitioned_evaluation_composes_redistribute_and_top_k(n in 1usize..60, k in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_partition(&mut rng, k);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let data = tiny_dataset(&labels, k);
        let rows = prob_rows(&mut rng, n, p.len());
        let d = dump(&rows, &data, 9);
        let report = evaluate(&d, &data, Some(&p)).unwrap();
        let spread: Vec<Vec<f64>> = rows.iter().map(|r| redistribute(r, &p).unwrap()).collect();
        prop_assert_eq!(report.top1_error, sorted_top_k_error(&spread, &labels, 1));
        prop_assert_eq!(report.top5_error, sorted_top_k_error(&spread, &labels, k.min(5)));
        prop_assert_eq!(report.n_images, n);
        // evaluation has no hidden state
        prop_assert_eq!(evaluate(&d, &data, Some(&p)).unwrap(), report);
    }

    #[test]
    fn score_dump_bytes_round_trip(n in 1usize..40, k in 1usize..9, seed in any::<u64>(), res in 0u32..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let data = tiny_dataset(&labels, k);
        let mut d = dump(&prob_rows(&mut rng, n, k), &data, rng.gen());
        d.resolution = res;
        let bytes = d.to_bytes();
        let back = ScoreDump::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn fused_rows_stay_probability_vectors(n in 1usize..30, k in 1usize..9, m in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let data = tiny_dataset(&labels, k);
        let dumps: Vec<ScoreDump> = (0..m).map(|i| dump(&prob_rows(&mut rng, n, k), &data, i as u8)).collect();
        let refs: Vec<&ScoreDump> = dumps.iter().collect();
        let fused = fuse_dumps(&refs, None).unwrap();
        prop_assert!(fused.validate().is_ok());
        for i in 0..n {
            prop_assert!((fused.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
