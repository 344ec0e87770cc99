use mrdis::eval::argmax;
use mrdis::io::fingerprint;
use mrdis::multires::resolution::{network_for_size, tiny_network};
use mrdis::multires::{fuse, predict, ten_crop, train_crop, LoadedModel, DEFAULT_CROP_SCALES};
use mrdis::nn::{Checkpoint, Mode, Network};
use mrdis::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(stored: usize, k: usize, seed: u64) -> (LoadedModel, Network<f64>) {
    let spec = network_for_size(stored, k).unwrap();
    let net = Network::<f64>::init(spec, seed).unwrap();
    let ck = Checkpoint::from_network(&net, stored, 0);
    let fp = fingerprint(&ck.to_bytes().unwrap());
    (LoadedModel::from_checkpoint(ck, fp).unwrap(), net)
}

fn image(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::from_vec(&[3, n, n], (0..3 * n * n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

/// Window copy by direct indexing, optionally mirrored.
fn window(img: &Tensor<f64>, x0: usize, y0: usize, m: usize, mirror: bool) -> Tensor<f64> {
    let n = img.shape()[1];
    let mut out = Vec::with_capacity(3 * m * m);
    for c in 0..3 {
        for y in 0..m {
            for x in 0..m {
                let sx = if mirror { x0 + m - 1 - x } else { x0 + x };
                out.push(img.data()[(c * n + y0 + y) * n + sx]);
            }
        }
    }
    Tensor::from_vec(&[1, 3, m, m], out).unwrap()
}

#[test]
fn predict_is_the_mean_of_ten_single_crop_forwards() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (stored, k) in [(16, 3), (32, 5)] {
        let (m, net) = model(stored, k, 8);
        let img = image(&mut rng, stored);
        let c = m.crop_size();
        let d = stored - c;
        let origins = [(0, 0), (d, 0), (0, d), (d, d), (d / 2, d / 2)];
        let mut want = vec![0.0; k];
        for mirror in [false, true] {
            for &(x, y) in &origins {
                let p = net.probabilities(&window(&img, x, y, c, mirror), Mode::Eval).unwrap();
                for (w, v) in want.iter_mut().zip(p.row(0)) {
                    *w += v / 10.0;
                }
            }
        }
        let got = predict(&m, &img).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn ten_crop_mean_ignores_crop_order() {
    let (m, _) = model(16, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = image(&mut rng, 16);
    let mut crops = ten_crop(&img, m.crop_size()).unwrap();
    let forward = m.batch_probabilities(&crops).unwrap();
    crops.reverse();
    let mut backward = m.batch_probabilities(&crops).unwrap();
    backward.reverse();
    for (a, b) in forward.iter().zip(&backward) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn predict_rejects_a_wrong_image_size() {
    let (m, _) = model(16, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert!(predict(&m, &image(&mut rng, 20)).is_err());
}

#[test]
fn f32_and_f64_models_agree_closely() {
    let net = Network::<f64>::init(tiny_network(4), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = image(&mut rng, 16);
    let a = Checkpoint::from_network(&net, 16, 0);
    let b = Checkpoint::from_network(&net.convert::<f32>(), 16, 0);
    let pa = predict(&LoadedModel::from_checkpoint(a, [0; 32]).unwrap(), &img).unwrap();
    let pb = predict(&LoadedModel::from_checkpoint(b, [0; 32]).unwrap(), &img).unwrap();
    for (x, y) in pa.iter().zip(&pb) {
        assert!((x - y).abs() < 1e-4);
    }
}

fn prob_vectors(n: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
            let t: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / t).collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fusion_is_permutation_invariant(n in 1usize..5, k in 1usize..10, seed in any::<u64>(), rot in 0usize..5) {
        let rows = prob_vectors(n, k, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let t: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / t).collect();
        let wsum: f64 = w.iter().sum();
        prop_assume!((wsum - 1.0).abs() <= 1e-9);
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let a = fuse(&refs, Some(&w)).unwrap();
        let r = rot % n;
        let mut refs2 = refs.clone();
        refs2.rotate_left(r);
        let mut w2 = w.clone();
        w2.rotate_left(r);
        let b = fuse(&refs2, Some(&w2)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn equal_weight_fusion_is_the_arithmetic_mean(n in 1usize..5, k in 1usize..10, seed in any::<u64>()) {
        let rows = prob_vectors(n, k, seed);
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let got = fuse(&refs, None).unwrap();
        let w = 1.0 / n as f64;
        for j in 0..k {
            let mut want = 0.0;
            for r in &rows {
                want += w * r[j];
            }
            prop_assert_eq!(got[j], want);
        }
    }

    #[test]
    fn argmax_ignores_positive_scaling(k in 1usize..12, seed in any::<u64>(), c in 1e-3f64..1e3) {
        let s = &prob_vectors(1, k, seed)[0];
        let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
        prop_assert_eq!(argmax(s), argmax(&scaled));
    }

    #[test]
    fn training_crops_always_come_out_at_crop_size(n in 8usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = image(&mut rng, n);
        let m = (n * 7) / 8;
        let c = train_crop(&img, &DEFAULT_CROP_SCALES, m, &mut rng).unwrap();
        prop_assert_eq!(c.shape(), &[3, m, m]);
        prop_assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
