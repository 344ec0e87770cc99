//! Labeled square images stored as raw bytes, with seeded shuffles and
//! downsampling between resolutions.

mod png;
mod synth;

pub use png::import_png_dir;
pub use synth::{generate, write_splits, AmbiguousPair, GeneratedSplits, SceneGenSpec};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{format, invalid, shape, Result};
use crate::io::{fingerprint, write_atomic, ByteReader, ByteWriter, Fingerprint};
use crate::multires::crop::resize_bilinear;
use crate::seed::mix;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MRSD";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 2 + 2 + 1 + 2 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub image_count: u32,
    pub height: u16,
    pub width: u16,
    pub channels: u8,
    pub num_classes: u16,
    pub seed: u64,
}

/// Images are stored row-major as `height x width x channels` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    size: usize,
    channels: usize,
    num_classes: usize,
    seed: u64,
    labels: Vec<usize>,
    pixels: Vec<u8>,
}

impl Dataset {
    pub fn new(size: usize, channels: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if size == 0 || size > u16::MAX as usize {
            return Err(invalid(format!("image size {size} out of range")));
        }
        if channels == 0 || channels > u8::MAX as usize {
            return Err(invalid(format!("channel count {channels} out of range")));
        }
        if num_classes == 0 || num_classes > u16::MAX as usize {
            return Err(invalid(format!("class count {num_classes} out of range")));
        }
        Ok(Self {
            size,
            channels,
            num_classes,
            seed,
            labels: Vec::new(),
            pixels: Vec::new(),
        })
    }

    pub fn push(&mut self, label: usize, pixels: &[u8]) -> Result<()> {
        if label >= self.num_classes {
            return Err(invalid(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        if pixels.len() != self.image_len() {
            return Err(shape(format!(
                "{} bytes for a {}-byte image",
                pixels.len(),
                self.image_len()
            )));
        }
        if self.labels.len() >= u32::MAX as usize {
            return Err(invalid("dataset is full"));
        }
        self.labels.push(label);
        self.pixels.extend_from_slice(pixels);
        Ok(())
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            version: VERSION,
            image_count: self.labels.len() as u32,
            height: self.size as u16,
            width: self.size as u16,
            channels: self.channels as u8,
            num_classes: self.num_classes as u16,
            seed: self.seed,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image_len(&self) -> usize {
        self.size * self.size * self.channels
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` as a `[C, N, N]` tensor with values in `[0, 1]`.
    pub fn image(&self, i: usize) -> Tensor<f64> {
        let (n, c) = (self.size, self.channels);
        let src = self.image_bytes(i);
        let mut out = vec![0.0; src.len()];
        for y in 0..n {
            for x in 0..n {
                for ch in 0..c {
                    out[(ch * n + y) * n + x] = src[(y * n + x) * c + ch] as f64 / 255.0;
                }
            }
        }
        Tensor::from_vec(&[c, n, n], out).expect("non-empty image")
    }

    /// File-order iteration.
    pub fn iter(&self) -> impl Iterator<Item = (Tensor<f64>, usize)> + '_ {
        (0..self.len()).map(|i| (self.image(i), self.labels[i]))
    }

    /// Deterministic permutation of the record indices for one epoch.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        shuffled_indices(self.len(), seed, epoch)
    }

    /// Labels rewritten through `map`, e.g. to super categories.
    pub fn with_labels(&self, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(shape("relabeling changes the image count"));
        }
        let mut out = Self::new(self.size, self.channels, num_classes, self.seed)?;
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        out.labels = labels;
        out.pixels = self.pixels.clone();
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = self.header();
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(h.version);
        w.u32(h.image_count);
        w.u16(h.height);
        w.u16(h.width);
        w.u8(h.channels);
        w.u16(h.num_classes);
        w.u64(h.seed);
        for i in 0..self.len() {
            w.u16(self.labels[i] as u16);
            w.bytes(self.image_bytes(i));
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "dataset");
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let count = r.u32()? as usize;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let channels = r.u8()? as usize;
        let num_classes = r.u16()? as usize;
        let seed = r.u64()?;
        if height != width {
            return Err(format(format!("dataset images are {height}x{width}, not square")));
        }
        let mut ds = Self::new(height, channels, num_classes, seed).map_err(|e| format(e.to_string()))?;
        let record = 2 + ds.image_len();
        if bytes.len() != HEADER_LEN + count * record {
            return Err(format(format!(
                "dataset holds {} bytes, header promises {count} records of {record} bytes",
                bytes.len() - HEADER_LEN
            )));
        }
        ds.labels.reserve(count);
        ds.pixels.reserve(count * ds.image_len());
        for _ in 0..count {
            let label = r.u16()? as usize;
            let px = r.take(ds.image_len())?;
            ds.push(label, px).map_err(|e| format(e.to_string()))?;
        }
        r.finish()?;
        Ok(ds)
    }

    pub fn fingerprint(&self) -> Fingerprint {
        fingerprint(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<Fingerprint> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes)?;
        Ok(fingerprint(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::io::read_file(path)?)
    }

    /// Bilinear downsample of every image to `size`; labels are preserved.
    pub fn resample(&self, size: usize) -> Result<Self> {
        if size > self.size {
            return Err(invalid(format!(
                "refusing to upsample {}px images to {size}px",
                self.size
            )));
        }
        if size == self.size {
            return Ok(self.clone());
        }
        let mut out = Self::new(size, self.channels, self.num_classes, self.seed)?;
        let (n, c) = (self.size, self.channels);
        for i in 0..self.len() {
            let src = self.image_bytes(i);
            let mut chw = vec![0.0; src.len()];
            for p in 0..n * n {
                for ch in 0..c {
                    chw[ch * n * n + p] = src[p * c + ch] as f64;
                }
            }
            let t = Tensor::from_vec(&[c, n, n], chw)?;
            let r = resize_bilinear(&t, size, size)?;
            let mut hwc = vec![0u8; size * size * c];
            for p in 0..size * size {
                for ch in 0..c {
                    hwc[p * c + ch] = r.data()[ch * size * size + p].round().clamp(0.0, 255.0) as u8;
                }
            }
            out.push(self.labels[i], &hwc)?;
        }
        Ok(out)
    }
}

pub fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, epoch]));
    idx.shuffle(&mut rng);
    idx
}
