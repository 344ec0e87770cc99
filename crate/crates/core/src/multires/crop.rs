//! Image resizing and the train/test cropping protocols.
//!
//! Images are `[C, H, W]` tensors.

use rand::Rng;

use crate::error::{invalid, shape, Result};
use crate::tensor::{cast, Scalar, Tensor};

/// Side fractions of the stored image size a training crop may take.
pub const DEFAULT_CROP_SCALES: [f64; 5] = [1.0, 0.875, 0.75, 0.625, 0.5];

/// Crop anchor positions, in the order used by [`ten_crop`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Anchor {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl Anchor {
    pub const ALL: [Anchor; 5] = [
        Anchor::TopLeft,
        Anchor::TopRight,
        Anchor::BottomLeft,
        Anchor::BottomRight,
        Anchor::Center,
    ];

    /// Top-left corner `(x, y)` of a `w x h` window inside an `n x n` image.
    pub fn origin(self, n: usize, w: usize, h: usize) -> (usize, usize) {
        match self {
            Anchor::TopLeft => (0, 0),
            Anchor::TopRight => (n - w, 0),
            Anchor::BottomLeft => (0, n - h),
            Anchor::BottomRight => (n - w, n - h),
            Anchor::Center => ((n - w) / 2, (n - h) / 2),
        }
    }
}

fn square_side(image: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
    match *image.shape() {
        [c, h, w] if h == w => Ok((c, h)),
        _ => Err(shape(format!(
            "expected a square [C, N, N] image, got {:?}",
            image.shape()
        ))),
    }
}

/// Bilinear resampling with half-pixel centers (edge-clamped).
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [c, h, w] = match *image.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(shape("resize expects a [C, H, W] image")),
    };
    if out_h == 0 || out_w == 0 {
        return Err(invalid("resize target must be non-empty"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let taps = |inp: usize, out: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let src = image.data();
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let od = out.data_mut();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = cast::<T>(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = cast::<T>(fx);
                let top = plane[y0 * w + x0] + (plane[y0 * w + x1] - plane[y0 * w + x0]) * fx;
                let bot = plane[y1 * w + x0] + (plane[y1 * w + x1] - plane[y1 * w + x0]) * fx;
                od[(ch * out_h + oy) * out_w + ox] = top + (bot - top) * fy;
            }
        }
    }
    Ok(out)
}

pub fn crop<T: Scalar>(image: &Tensor<T>, x: usize, y: usize, w: usize, h: usize) -> Result<Tensor<T>> {
    let [c, ih, iw] = match *image.shape() {
        [c, h, w] => [c, h, w],
        _ => return Err(shape("crop expects a [C, H, W] image")),
    };
    if w == 0 || h == 0 || x + w > iw || y + h > ih {
        return Err(invalid(format!("crop {w}x{h} at ({x}, {y}) exceeds {iw}x{ih}")));
    }
    let src = image.data();
    let mut data = Vec::with_capacity(c * w * h);
    for ch in 0..c {
        for row in y..y + h {
            let start = (ch * ih + row) * iw + x;
            data.extend_from_slice(&src[start..start + w]);
        }
    }
    Tensor::from_vec(&[c, h, w], data)
}

pub fn flip_horizontal<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let w = *image.shape().last().expect("image rank");
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// One random training crop: window size, anchor, mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropParams {
    pub width: usize,
    pub height: usize,
    pub anchor: Anchor,
    pub flip: bool,
}

fn scale_sides(n: usize, scales: &[f64]) -> Result<Vec<usize>> {
    if scales.is_empty() {
        return Err(invalid("crop scale set is empty"));
    }
    scales
        .iter()
        .map(|&s| {
            if !(s > 0.0 && s <= 1.0) {
                return Err(invalid(format!("crop scale {s} outside (0, 1]")));
            }
            let side = (s * n as f64).round() as usize;
            if side == 0 {
                return Err(invalid(format!("image side {n} too small for crop scale {s}")));
            }
            Ok(side)
        })
        .collect()
}

/// Width and height are drawn independently from `scales * N`; the anchor
/// is one of the five fixed positions; the mirror is a fair coin.
pub fn sample_crop<R: Rng>(n: usize, scales: &[f64], rng: &mut R) -> Result<CropParams> {
    let sides = scale_sides(n, scales)?;
    let width = sides[rng.gen_range(0..sides.len())];
    let height = sides[rng.gen_range(0..sides.len())];
    let anchor = Anchor::ALL[rng.gen_range(0..5)];
    let flip = rng.gen_bool(0.5);
    Ok(CropParams {
        width,
        height,
        anchor,
        flip,
    })
}

pub fn apply_crop<T: Scalar>(image: &Tensor<T>, params: CropParams, out_size: usize) -> Result<Tensor<T>> {
    let (_, n) = square_side(image)?;
    if params.width > n || params.height > n {
        return Err(invalid("crop window larger than the image"));
    }
    let (x, y) = params.anchor.origin(n, params.width, params.height);
    let region = crop(image, x, y, params.width, params.height)?;
    let resized = resize_bilinear(&region, out_size, out_size)?;
    Ok(if params.flip {
        flip_horizontal(&resized)
    } else {
        resized
    })
}

/// Scale-jittered training crop of an `N x N` image, resized to `M x M`.
pub fn train_crop<T: Scalar, R: Rng>(
    image: &Tensor<T>,
    scales: &[f64],
    out_size: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let (_, n) = square_side(image)?;
    let params = sample_crop(n, scales, rng)?;
    apply_crop(image, params, out_size)
}

/// The ten test crops: TL, TR, BL, BR, center, then the same five mirrored.
pub fn ten_crop<T: Scalar>(image: &Tensor<T>, crop_size: usize) -> Result<Vec<Tensor<T>>> {
    let (_, n) = square_side(image)?;
    if crop_size > n || crop_size == 0 {
        return Err(invalid(format!("crop size {crop_size} does not fit image side {n}")));
    }
    let mut crops = Vec::with_capacity(10);
    for anchor in Anchor::ALL {
        let (x, y) = anchor.origin(n, crop_size, crop_size);
        crops.push(crop(image, x, y, crop_size, crop_size)?);
    }
    for i in 0..5 {
        let f = flip_horizontal(&crops[i]);
        crops.push(f);
    }
    Ok(crops)
}

pub fn center_crop<T: Scalar>(image: &Tensor<T>, crop_size: usize) -> Result<Tensor<T>> {
    let (_, n) = square_side(image)?;
    if crop_size > n || crop_size == 0 {
        return Err(invalid(format!("crop size {crop_size} does not fit image side {n}")));
    }
    let (x, y) = Anchor::Center.origin(n, crop_size, crop_size);
    crop(image, x, y, crop_size, crop_size)
}
