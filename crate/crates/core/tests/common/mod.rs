//! Reference implementations the integration tests compare against. Each one
//! is written the slow, obvious way and shares no code with the library.

#![allow(dead_code)]

use rand::Rng;

pub mod layers;

/// Central difference step.
pub const FD_STEP: f64 = 1e-5;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let plus = f(&probe);
            probe[i] = orig - FD_STEP;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Central differences for functions with ReLU or max kinks. Where the two
/// one-sided slopes disagree, a kink lies within one step and the central
/// difference is meaningless there, so the step shrinks tenfold (down to
/// 1e-8) until they agree. Returns the gradient and the number of entries
/// that needed a smaller step.
pub fn fd_gradient_kinked(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> (Vec<f64>, usize) {
    let mut probe = x.to_vec();
    let f0 = f(&probe);
    let mut kinks = 0;
    let g = (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let mut h = FD_STEP;
            loop {
                probe[i] = orig + h;
                let plus = f(&probe);
                probe[i] = orig - h;
                let minus = f(&probe);
                probe[i] = orig;
                let (fwd, bwd) = ((plus - f0) / h, (f0 - minus) / h);
                let smooth = (fwd - bwd).abs() <= 1e-3 * fwd.abs().max(bwd.abs()) + 1e-7;
                if smooth || h <= 1e-8 {
                    if h < FD_STEP {
                        kinks += 1;
                    }
                    return (plus - minus) / (2.0 * h);
                }
                h /= 10.0;
            }
        })
        .collect();
    (g, kinks)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Direct 2-D convolution over an NCHW batch. Padding taps are skipped, which
/// is the same as multiplying by zero. Per output pixel the sum runs over
/// (input channel, ky, kx) in that order.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    input: &[f64],
    shape: [usize; 4],
    weight: &[f64],
    out_channels: usize,
    kernel: usize,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = shape;
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let mut out = vec![0.0; n * out_channels * oh * ow];
    for b in 0..n {
        for o in 0..out_channels {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..c {
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let iy = (y * stride + ky) as isize - padding as isize;
                                let ix = (x * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let v = input[((b * c + i) * h + iy as usize) * w + ix as usize];
                                let k = weight[((o * c + i) * kernel + ky) * kernel + kx];
                                acc += v * k;
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        acc += bias[o];
                    }
                    out[((b * out_channels + o) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    (out, [n, out_channels, oh, ow])
}

/// Greedy merge that rebuilds every group-to-group similarity from the
/// original matrix on each iteration. A group is a weight vector over the
/// original classes; merging two groups averages their weights, so the
/// similarity of two groups is the bilinear form `w_a' S w_b`. Ties go to
/// the pair whose (smallest member, smallest member) is lexicographically
/// smallest. Returns groups sorted by smallest member.
pub fn brute_force_merge(s: &[Vec<f64>], tau: f64) -> Vec<Vec<usize>> {
    let n = s.len();
    let mut groups: Vec<(Vec<usize>, Vec<f64>)> = (0..n)
        .map(|i| {
            let mut w = vec![0.0; n];
            w[i] = 1.0;
            (vec![i], w)
        })
        .collect();
    let sim = |a: &[f64], b: &[f64]| -> f64 {
        let mut t = 0.0;
        for i in 0..n {
            for j in 0..n {
                if a[i] != 0.0 && b[j] != 0.0 {
                    t += a[i] * b[j] * s[i][j];
                }
            }
        }
        t
    };
    loop {
        let key = |g: usize| *groups[g].0.iter().min().unwrap();
        // each unordered pair once, oriented by smallest member, so rounding
        // in the two summation orders cannot split a tie
        let mut candidates = Vec::new();
        for a in 0..groups.len() {
            for b in 0..groups.len() {
                if key(a) < key(b) {
                    candidates.push((sim(&groups[a].1, &groups[b].1), a, b));
                }
            }
        }
        if candidates.is_empty() {
            break;
        }
        let best = candidates.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        if best <= tau {
            break;
        }
        let (_, a, b) = candidates
            .into_iter()
            .filter(|c| c.0 == best)
            .min_by_key(|c| (key(c.1), key(c.2)))
            .unwrap();
        let (hi, lo) = if a > b { (a, b) } else { (b, a) };
        let (mb, wb) = groups.remove(hi);
        let (ma, wa) = &mut groups[lo];
        ma.extend(mb);
        for (x, y) in wa.iter_mut().zip(wb) {
            *x = 0.5 * (*x + y);
        }
    }
    let mut out: Vec<Vec<usize>> = groups
        .into_iter()
        .map(|(mut m, _)| {
            m.sort_unstable();
            m
        })
        .collect();
    out.sort();
    out
}

/// Random symmetric non-negative matrix with the given diagonal. With
/// `levels > 0` entries are multiples of `1 / levels`, which forces ties.
pub fn random_similarity<R: Rng>(rng: &mut R, n: usize, levels: u32) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        m[i][i] = if levels > 0 {
            rng.gen_range(0..=levels) as f64 / levels as f64
        } else {
            rng.gen::<f64>()
        };
        for j in i + 1..n {
            let v = if levels > 0 {
                rng.gen_range(0..=levels) as f64 / levels as f64
            } else {
                rng.gen::<f64>()
            };
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    m
}

/// Top-k error by fully sorting each score row; equal scores keep index order.
pub fn sorted_top_k_error(scores: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let mut wrong = 0;
    for (row, &y) in scores.iter().zip(labels) {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        if !idx[..k.min(idx.len())].contains(&y) {
            wrong += 1;
        }
    }
    wrong as f64 / labels.len() as f64
}

/// Row-normalized confusion counts; rows without samples stay zero.
pub fn counted_confusion(predictions: &[usize], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; k]; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        c[y][p] += 1.0;
    }
    for row in &mut c {
        let t: f64 = row.iter().sum();
        if t > 0.0 {
            row.iter_mut().for_each(|v| *v /= t);
        }
    }
    c
}

/// Nearest class mean in raw pixel space.
pub struct NearestCentroid {
    centroids: Vec<Vec<f64>>,
}

impl NearestCentroid {
    pub fn fit(images: &[&[u8]], labels: &[usize], k: usize) -> Self {
        let d = images[0].len();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (img, &y) in images.iter().zip(labels) {
            for (s, &p) in sums[y].iter_mut().zip(img.iter()) {
                *s += p as f64;
            }
            counts[y] += 1;
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
        }
        Self { centroids: sums }
    }

    pub fn predict(&self, image: &[u8]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (c, m) in self.centroids.iter().enumerate() {
            let d: f64 = m.iter().zip(image).map(|(&a, &b)| (a - b as f64).powi(2)).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }
}

/// Symmetrized similarity from a confusion matrix, computed entry by entry.
/// A class with no samples is similar to nothing.
pub fn symmetric_similarity(c: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = c.len();
    let empty: Vec<bool> = c.iter().map(|r| r.iter().all(|&v| v == 0.0)).collect();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if !empty[i] && !empty[j] {
                s[i][j] = 0.5 * (c[i][j] + c[j][i]);
            }
        }
    }
    s
}
