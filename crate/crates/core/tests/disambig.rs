mod common;

use common::{
    brute_force_merge, counted_confusion, fd_gradient, max_relative_error, random_similarity, symmetric_similarity,
};
use mrdis::data::Dataset;
use mrdis::disambig::{
    confusion_matrix, generate_soft_labels, hard_loss, load_or_generate_soft_labels, merge_categories, merge_with,
    multitask_loss, redistribute, relabel, soft_loss, symmetrize, MergeOptions, MultiTaskLossConfig, Partition,
    SimilarityMatrix, SoftLoss,
};
use mrdis::io::fingerprint;
use mrdis::multires::crop::center_crop;
use mrdis::multires::resolution::tiny_network;
use mrdis::multires::{predict, LoadedModel};
use mrdis::nn::{Checkpoint, Mode, Network};
use mrdis::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn similarity(m: &[Vec<f64>]) -> SimilarityMatrix {
    SimilarityMatrix::new(m.len(), m.iter().flatten().copied().collect()).unwrap()
}

fn random_partition(rng: &mut ChaCha8Rng, n: usize) -> Partition {
    let k = rng.gen_range(1..=n);
    // every group gets one member, the rest land anywhere
    let mut groups: Vec<Vec<usize>> = (0..k).map(|g| vec![g]).collect();
    for c in k..n {
        groups[rng.gen_range(0..k)].push(c);
    }
    Partition::from_groups(n, groups, 0.5).unwrap()
}

#[test]
fn merge_agrees_with_brute_force_on_tied_matrices() {
    // dyadic levels keep every average exact, so ties survive merging
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..150 {
        let n = rng.gen_range(2..=7);
        let m = random_similarity(&mut rng, n, 4);
        for tau in [0.0, 0.25, 0.375, 0.5, 0.75] {
            let got = merge_categories(&similarity(&m), tau).unwrap();
            assert_eq!(got.groups, brute_force_merge(&m, tau), "case {case} tau {tau} {m:?}");
        }
    }
}

#[test]
fn merge_steps_follow_the_greedy_order() {
    let m = vec![
        vec![1.0, 0.9, 0.1, 0.0],
        vec![0.9, 1.0, 0.3, 0.1],
        vec![0.1, 0.3, 1.0, 0.6],
        vec![0.0, 0.1, 0.6, 1.0],
    ];
    let out = merge_with(&similarity(&m), 0.1, MergeOptions::default()).unwrap();
    let pairs: Vec<_> = out.steps.iter().map(|s| (s.first.clone(), s.second.clone())).collect();
    assert_eq!(
        pairs,
        vec![(vec![0], vec![1]), (vec![2], vec![3]), (vec![0, 1], vec![2, 3])]
    );
    // {0,1} against {2,3}: average of 0.1, 0.3, 0.0, 0.1
    assert!((out.steps[2].similarity - 0.125).abs() < 1e-15);
    assert!(out.steps.windows(2).all(|w| w[0].similarity >= w[1].similarity));
}

#[test]
fn soft_loss_with_a_one_hot_target_is_the_hard_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let k = rng.gen_range(2..8);
        let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let y = rng.gen_range(0..k);
        let mut t = vec![0.0; k];
        t[y] = 1.0;
        let (hl, hg) = hard_loss(&z, y).unwrap();
        let (sl, sg) = soft_loss(&z, &t, SoftLoss::Standard).unwrap();
        assert!((hl - sl).abs() < 1e-12);
        for (a, b) in hg.iter().zip(&sg) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn soft_gradient_vanishes_when_prediction_matches_target() {
    let t = [0.1, 0.2, 0.3, 0.4];
    let z: Vec<f64> = t.iter().map(|v: &f64| v.ln() + 2.5).collect();
    let (_, g) = soft_loss(&z, &t, SoftLoss::Standard).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn printed_orientation_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let k = rng.gen_range(2..7);
        let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let t: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let (_, g) = soft_loss(&z, &t, SoftLoss::Printed).unwrap();
        let n = fd_gradient(&z, |v| soft_loss(v, &t, SoftLoss::Printed).unwrap().0);
        assert!(max_relative_error(&g, &n) < 1e-4);
    }
}

#[test]
fn zero_lambda_drops_the_soft_term() {
    let z = [0.3, -1.0, 2.0];
    let cfg = MultiTaskLossConfig {
        lambda: 0.0,
        soft_loss: SoftLoss::Standard,
    };
    let t = multitask_loss(&z, 2, &[5.0, -5.0], &[0.5, 0.5], &cfg).unwrap();
    assert_eq!(t.soft, 0.0);
    assert_eq!(t.grad_aux, vec![0.0, 0.0]);
    assert_eq!((t.hard, t.grad_main), hard_loss(&z, 2).unwrap());
}

fn random_dataset(n: usize, size: usize, k: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Dataset::new(size, 3, k, seed).unwrap();
    for i in 0..n {
        let px: Vec<u8> = (0..size * size * 3).map(|_| rng.gen()).collect();
        d.push(i % k, &px).unwrap();
    }
    d
}

fn loaded(net: &Network<f64>, stored: usize) -> LoadedModel {
    let ck = Checkpoint::from_network(net, stored, 0);
    let fp = fingerprint(&ck.to_bytes().unwrap());
    LoadedModel::from_checkpoint(ck, fp).unwrap()
}

#[test]
fn frozen_uniform_network_gives_uniform_soft_labels() {
    let mut net = Network::<f64>::init(tiny_network(5), 1).unwrap();
    let head = net.spec.head_index();
    for p in &mut net.layers[head].params {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let d = random_dataset(40, 16, 3, 2);
    for ten in [false, true] {
        let s = generate_soft_labels(&loaded(&net, 16), &d, ten).unwrap();
        assert_eq!((s.len(), s.width), (40, 5));
        assert!(s.values.iter().all(|v| (v - 0.2).abs() < 1e-12));
    }
}

#[test]
fn soft_labels_equal_direct_forward_calls_and_repeat_exactly() {
    let net = Network::<f64>::init(tiny_network(4), 7).unwrap();
    let model = loaded(&net, 16);
    // 24 px images are resized to the stored 16 px first
    for size in [16, 24] {
        let d = random_dataset(70, size, 2, 5);
        let s = generate_soft_labels(&model, &d, false).unwrap();
        assert_eq!(s.values, generate_soft_labels(&model, &d, false).unwrap().values);
        let t = generate_soft_labels(&model, &d, true).unwrap();
        for i in 0..d.len() {
            let img = mrdis::multires::crop::resize_bilinear(&d.image(i), 16, 16).unwrap();
            let c = center_crop(&img, model.crop_size()).unwrap();
            let p = net.probabilities(&Tensor::stack(&[c]).unwrap(), Mode::Eval).unwrap();
            for (a, b) in s.get(i).iter().zip(p.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(t.get(i), predict(&model, &img).unwrap().as_slice());
        }
    }
}

#[test]
fn soft_label_cache_is_tied_to_its_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("soft.mrsl");
    let d = random_dataset(10, 16, 2, 1);
    let a = loaded(&Network::<f64>::init(tiny_network(3), 1).unwrap(), 16);
    let b = loaded(&Network::<f64>::init(tiny_network(3), 2).unwrap(), 16);
    let first = load_or_generate_soft_labels(&cache, &a, &d, false).unwrap();
    let again = load_or_generate_soft_labels(&cache, &a, &d, false).unwrap();
    assert_eq!(first, again);
    assert!(matches!(
        load_or_generate_soft_labels(&cache, &b, &d, false),
        Err(Error::Mismatch(_))
    ));
    let bigger = random_dataset(12, 16, 2, 1);
    assert!(matches!(
        load_or_generate_soft_labels(&cache, &a, &bigger, false),
        Err(Error::Mismatch(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn confusion_and_similarity_match_counting(n in 1usize..300, k in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let preds: Vec<usize> = labels.iter().map(|&y| if rng.gen_bool(0.6) { y } else { rng.gen_range(0..k) }).collect();
        let c = confusion_matrix(&preds, &labels, k).unwrap();
        let want = counted_confusion(&preds, &labels, k);
        for i in 0..k {
            for j in 0..k {
                prop_assert!((c.get(i, j) - want[i][j]).abs() < 1e-15);
            }
        }
        let s = symmetrize(&c).unwrap();
        let ws = symmetric_similarity(&want);
        for i in 0..k {
            for j in 0..k {
                prop_assert_eq!(s.get(i, j).to_bits(), s.get(j, i).to_bits());
                prop_assert!((s.get(i, j) - ws[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn higher_tau_refines_the_partition(n in 2usize..9, seed in any::<u64>(), levels in prop::sample::select(vec![0u32, 2, 4, 8])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = similarity(&random_similarity(&mut rng, n, levels));
        let taus: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let parts: Vec<Partition> = taus.iter().map(|&t| merge_categories(&s, t).unwrap()).collect();
        for w in parts.windows(2) {
            prop_assert!(w[0].len() <= w[1].len());
            let coarse = w[0].group_of();
            for g in &w[1].groups {
                prop_assert!(g.iter().all(|&c| coarse[c] == coarse[g[0]]));
            }
        }
    }

    #[test]
    fn merge_commutes_with_relabeling_classes(n in 2usize..9, seed in any::<u64>(), tau in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_similarity(&mut rng, n, 0);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut pm = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                pm[perm[i]][perm[j]] = m[i][j];
            }
        }
        let a = merge_categories(&similarity(&m), tau).unwrap();
        let b = merge_categories(&similarity(&pm), tau).unwrap();
        let mapped: Vec<Vec<usize>> = a.groups.iter().map(|g| g.iter().map(|&c| perm[c]).collect()).collect();
        prop_assert_eq!(Partition::from_groups(n, mapped, tau).unwrap().groups, b.groups);
    }

    #[test]
    fn redistribute_conserves_mass(n in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_partition(&mut rng, n);
        let scores: Vec<f64> = (0..p.len()).map(|_| rng.gen::<f64>()).collect();
        let out = redistribute(&scores, &p).unwrap();
        for (g, members) in p.groups.iter().enumerate() {
            let mass: f64 = members.iter().map(|&c| out[c]).sum();
            prop_assert!((mass - scores[g]).abs() < 1e-12);
            prop_assert!(members.iter().all(|&c| out[c] == out[members[0]]));
        }
        prop_assert!((out.iter().sum::<f64>() - scores.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn relabel_counts_sum_over_members(n in 1usize..12, count in 0usize..200, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_partition(&mut rng, n);
        let labels: Vec<usize> = (0..count).map(|_| rng.gen_range(0..n)).collect();
        let supers = relabel(&labels, &p).unwrap();
        for (g, members) in p.groups.iter().enumerate() {
            let direct = supers.iter().filter(|&&s| s == g).count();
            let summed: usize = members.iter().map(|&c| labels.iter().filter(|&&y| y == c).count()).sum();
            prop_assert_eq!(direct, summed);
        }
    }

    #[test]
    fn partition_json_round_trips(n in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = random_partition(&mut rng, n);
        p.tau = rng.gen::<f64>();
        p.source_confusion = rng.gen_bool(0.5).then(|| "cafe01".to_string());
        let bytes = p.to_json().unwrap();
        let back = Partition::from_json(&bytes).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(back.to_json().unwrap(), bytes);
    }
}
