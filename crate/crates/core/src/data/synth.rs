//! Synthetic scenes: a background gradient with a few colored shapes per
//! class, and class pairs that differ in a single attribute.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{invalid, Result};
use crate::io::Fingerprint;
use crate::seed::mix;

const RECIPE_STREAM: u64 = 0x5EC1;
const MIN_RESOLUTION: usize = 8;
const SUPERSAMPLE: usize = 2;

/// Two classes sharing a recipe except for the color of their first object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguousPair {
    pub a: usize,
    pub b: usize,
    /// In `(0, 1]`; 1 moves the color all the way to its complement.
    pub separation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGenSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub resolution: usize,
    pub ambiguous_pairs: Vec<AmbiguousPair>,
    /// In `[0, 1]`; 0 renders every image of a class identically.
    pub intra_class_variation: f64,
    pub seed: u64,
    /// In `[0, 1)`; class `c` gets `images_per_class * (1 - imbalance * c / (K - 1))`
    /// training images.
    pub imbalance: f64,
}

impl Default for SceneGenSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            images_per_class: 500,
            val_per_class: 100,
            test_per_class: 100,
            resolution: 48,
            ambiguous_pairs: vec![
                AmbiguousPair {
                    a: 0,
                    b: 1,
                    separation: 0.1,
                },
                AmbiguousPair {
                    a: 2,
                    b: 3,
                    separation: 0.1,
                },
            ],
            intra_class_variation: 0.5,
            seed: 0,
            imbalance: 0.0,
        }
    }
}

impl SceneGenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return Err(invalid("need between 2 and 65535 classes"));
        }
        if self.images_per_class == 0 {
            return Err(invalid("images_per_class must be positive"));
        }
        if self.resolution < MIN_RESOLUTION {
            return Err(invalid(format!(
                "resolution {} is too small to place objects (minimum {MIN_RESOLUTION})",
                self.resolution
            )));
        }
        if !(0.0..=1.0).contains(&self.intra_class_variation) {
            return Err(invalid("intra_class_variation must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.imbalance) {
            return Err(invalid("imbalance must be in [0, 1)"));
        }
        let mut used = vec![false; self.num_classes];
        for p in &self.ambiguous_pairs {
            if !(p.separation > 0.0 && p.separation <= 1.0) {
                return Err(invalid("pair separation must be in (0, 1]"));
            }
            if p.a == p.b || p.a >= self.num_classes || p.b >= self.num_classes {
                return Err(invalid(format!("bad ambiguous pair ({}, {})", p.a, p.b)));
            }
            for c in [p.a, p.b] {
                if std::mem::replace(&mut used[c], true) {
                    return Err(invalid(format!("class {c} appears in two ambiguous pairs")));
                }
            }
        }
        Ok(())
    }

    pub fn train_count(&self, class: usize) -> usize {
        let frac = class as f64 / (self.num_classes - 1) as f64;
        ((self.images_per_class as f64 * (1.0 - self.imbalance * frac)).round() as usize).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Disk,
    Rect,
    Triangle,
    Ring,
}

#[derive(Clone, Debug, PartialEq)]
struct ObjectRecipe {
    shape: Shape,
    color: [f64; 3],
    cx: f64,
    cy: f64,
    radius: f64,
    aspect: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Recipe {
    bg_from: [f64; 3],
    bg_to: [f64; 3],
    bg_dir: (f64, f64),
    objects: Vec<ObjectRecipe>,
}

/// A channel value kept at least 0.2 away from mid-gray so its complement differs.
fn vivid<R: Rng>(rng: &mut R) -> f64 {
    let v = rng.gen_range(0.0..0.3);
    if rng.gen_bool(0.5) {
        v
    } else {
        1.0 - v
    }
}

fn class_recipe(seed: u64, class: usize) -> Recipe {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, RECIPE_STREAM, class as u64]));
    let bg_from = [0; 3].map(|_| rng.gen_range(0.1..0.9));
    let bg_to = [0; 3].map(|_| rng.gen_range(0.1..0.9));
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let count = rng.gen_range(2..=4);
    let objects = (0..count)
        .map(|_| ObjectRecipe {
            shape: [Shape::Disk, Shape::Rect, Shape::Triangle, Shape::Ring][rng.gen_range(0..4)],
            color: [0; 3].map(|_| vivid(&mut rng)),
            cx: rng.gen_range(0.25..0.75),
            cy: rng.gen_range(0.25..0.75),
            radius: rng.gen_range(0.1..0.22),
            aspect: rng.gen_range(0.6..1.6),
        })
        .collect();
    Recipe {
        bg_from,
        bg_to,
        bg_dir: (angle.cos(), angle.sin()),
        objects,
    }
}

fn recipes(spec: &SceneGenSpec) -> Vec<Recipe> {
    let mut out: Vec<Recipe> = (0..spec.num_classes).map(|c| class_recipe(spec.seed, c)).collect();
    for p in &spec.ambiguous_pairs {
        let mut twin = out[p.a].clone();
        let obj = &mut twin.objects[0];
        for ch in &mut obj.color {
            *ch += p.separation * (1.0 - 2.0 * *ch);
        }
        out[p.b] = twin;
    }
    out
}

fn jitter<R: Rng>(rng: &mut R, amount: f64) -> f64 {
    if amount == 0.0 {
        0.0
    } else {
        rng.gen_range(-amount..=amount)
    }
}

fn covers(o: &ObjectRecipe, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - o.cx, y - o.cy);
    let r = o.radius;
    match o.shape {
        Shape::Disk => dx * dx + dy * dy <= r * r,
        Shape::Rect => dx.abs() <= r * o.aspect && dy.abs() <= r / o.aspect,
        Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r) * o.aspect,
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.36 * r * r
        }
    }
}

/// Renders one image as `N x N x 3` bytes.
fn render(recipe: &Recipe, n: usize, variation: f64, image_seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
    let v = variation;
    let bg_shift = [0; 3].map(|_| jitter(&mut rng, 0.08 * v));
    let objects: Vec<ObjectRecipe> = recipe
        .objects
        .iter()
        .map(|o| {
            let mut o = o.clone();
            o.cx += jitter(&mut rng, 0.15 * v);
            o.cy += jitter(&mut rng, 0.15 * v);
            o.radius *= 1.0 + jitter(&mut rng, 0.3 * v);
            for ch in &mut o.color {
                *ch = (*ch + jitter(&mut rng, 0.1 * v)).clamp(0.0, 1.0);
            }
            o
        })
        .collect();

    let s = SUPERSAMPLE;
    let mut out = vec![0u8; n * n * 3];
    for py in 0..n {
        for px in 0..n {
            let mut acc = [0.0; 3];
            for sy in 0..s {
                for sx in 0..s {
                    let x = (px as f64 + (sx as f64 + 0.5) / s as f64) / n as f64;
                    let y = (py as f64 + (sy as f64 + 0.5) / s as f64) / n as f64;
                    let t = ((x - 0.5) * recipe.bg_dir.0 + (y - 0.5) * recipe.bg_dir.1 + 0.5).clamp(0.0, 1.0);
                    let mut c = [0.0; 3];
                    for ch in 0..3 {
                        c[ch] = recipe.bg_from[ch] + t * (recipe.bg_to[ch] - recipe.bg_from[ch]) + bg_shift[ch];
                    }
                    for o in &objects {
                        if covers(o, x, y) {
                            c = o.color;
                        }
                    }
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            let noise = [0; 3].map(|_| jitter(&mut rng, 0.06 * v));
            for ch in 0..3 {
                let value = acc[ch] / (s * s) as f64 + noise[ch];
                out[(py * n + px) * 3 + ch] = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn render_split(spec: &SceneGenSpec, recipes: &[Recipe], split: u64, counts: &[usize]) -> Result<Dataset> {
    let jobs: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| (0..k).map(move |i| (c, i)))
        .collect();
    let images: Vec<Vec<u8>> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let seed = mix(&[spec.seed, split, c as u64, i as u64]);
            render(&recipes[c], spec.resolution, spec.intra_class_variation, seed)
        })
        .collect();
    let mut ds = Dataset::new(spec.resolution, 3, spec.num_classes, spec.seed)?;
    for (&(c, _), px) in jobs.iter().zip(&images) {
        ds.push(c, px)?;
    }
    Ok(ds)
}

/// Renders the train, validation and test splits. Each image has its own
/// seed derived from the global seed, split, class and index.
pub fn generate(spec: &SceneGenSpec) -> Result<GeneratedSplits> {
    spec.validate()?;
    let recipes = recipes(spec);
    let k = spec.num_classes;
    let train_counts: Vec<usize> = (0..k).map(|c| spec.train_count(c)).collect();
    Ok(GeneratedSplits {
        train: render_split(spec, &recipes, 0, &train_counts)?,
        val: render_split(spec, &recipes, 1, &vec![spec.val_per_class; k])?,
        test: render_split(spec, &recipes, 2, &vec![spec.test_per_class; k])?,
    })
}

/// Writes `train.mrsd`, `val.mrsd` and `test.mrsd` into `dir`.
pub fn write_splits(splits: &GeneratedSplits, dir: &Path) -> Result<[Fingerprint; 3]> {
    std::fs::create_dir_all(dir)?;
    Ok([
        splits.train.save(&dir.join("train.mrsd"))?,
        splits.val.save(&dir.join("val.mrsd"))?,
        splits.test.save(&dir.join("test.mrsd"))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneGenSpec {
        SceneGenSpec {
            num_classes: 4,
            images_per_class: 3,
            val_per_class: 2,
            test_per_class: 1,
            resolution: 16,
            ambiguous_pairs: vec![AmbiguousPair {
                a: 1,
                b: 3,
                separation: 0.2,
            }],
            intra_class_variation: 0.5,
            seed: 9,
            imbalance: 0.0,
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = small();
        let a = generate(&s).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (12, 8, 4));
        let b = generate(&s).unwrap();
        assert_eq!(a.train.to_bytes(), b.train.to_bytes());
        assert_eq!(a.test.to_bytes(), b.test.to_bytes());
    }

    #[test]
    fn zero_variation_makes_identical_images() {
        let s = SceneGenSpec {
            intra_class_variation: 0.0,
            ..small()
        };
        let g = generate(&s).unwrap();
        assert_eq!(g.train.image_bytes(0), g.train.image_bytes(1));
        assert_eq!(g.train.image_bytes(0), g.val.image_bytes(0));
        assert_ne!(g.train.image_bytes(0), g.train.image_bytes(3));
    }

    #[test]
    fn imbalance_shrinks_later_classes() {
        let s = SceneGenSpec {
            images_per_class: 10,
            imbalance: 0.5,
            ..small()
        };
        assert_eq!((0..4).map(|c| s.train_count(c)).collect::<Vec<_>>(), [10, 8, 7, 5]);
    }

    #[test]
    fn pair_twin_differs_only_in_first_object_color() {
        let s = small();
        let r = recipes(&s);
        assert_eq!(r[1].objects.len(), r[3].objects.len());
        assert_eq!(r[1].bg_from, r[3].bg_from);
        assert_ne!(r[1].objects[0].color, r[3].objects[0].color);
        assert_eq!(r[1].objects[1..], r[3].objects[1..]);
    }

    #[test]
    fn invalid_specs() {
        let bad = [
            SceneGenSpec {
                resolution: 4,
                ..small()
            },
            SceneGenSpec {
                num_classes: 1,
                ..small()
            },
            SceneGenSpec {
                ambiguous_pairs: vec![
                    AmbiguousPair {
                        a: 0,
                        b: 1,
                        separation: 0.1,
                    },
                    AmbiguousPair {
                        a: 1,
                        b: 2,
                        separation: 0.1,
                    },
                ],
                ..small()
            },
            SceneGenSpec {
                ambiguous_pairs: vec![AmbiguousPair {
                    a: 0,
                    b: 1,
                    separation: 0.0,
                }],
                ..small()
            },
            SceneGenSpec {
                intra_class_variation: 1.5,
                ..small()
            },
        ];
        for s in bad {
            assert!(generate(&s).is_err());
        }
    }
}
