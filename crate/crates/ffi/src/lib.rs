//! C ABI over the `mrdis` library.
//!
//! Every fallible call returns an [`MrdisStatus`]. On failure the message is
//! kept per thread and read back with [`mrdis_last_error`]. Handles are
//! opaque, owned by the caller once returned, and released with the matching
//! `_free` function.
//!
//! # Safety
//!
//! Pointer arguments follow one contract throughout: a pointer paired with a
//! length must be valid for that many elements (it may be null only when the
//! length is 0), strings are NUL-terminated UTF-8, handles must come from this
//! library and not be used after being freed, and out-pointers must be valid
//! for one write. Arrays are row-major.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mrdis::data::Dataset;
use mrdis::disambig::{merge_categories, redistribute, Partition, SimilarityMatrix};
use mrdis::eval::{evaluate, fuse_dumps, score_dataset, top_k_error, ScoreDump};
use mrdis::multires::{fuse, predict, LoadedModel};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrdisStatus {
    Ok = 0,
    Shape = 1,
    NonFinite = 2,
    InvalidArgument = 3,
    Format = 4,
    Mismatch = 5,
    Io = 6,
    Json = 7,
    Csv = 8,
    Image = 9,
    NullPointer = 10,
    /// A Rust panic was caught at the boundary; the handle involved may be
    /// in an unspecified state.
    Panic = 11,
}

/// Trained network at its stored precision.
pub struct MrdisModel(LoadedModel);

/// Labelled image split.
pub struct MrdisDataset(Dataset);

/// Per-image score vectors from one model or a fusion.
pub struct MrdisScoreDump(ScoreDump);

struct Failure(MrdisStatus, String);

impl From<mrdis::Error> for Failure {
    fn from(e: mrdis::Error) -> Self {
        use mrdis::Error as E;
        let status = match &e {
            E::Shape(_) => MrdisStatus::Shape,
            E::NonFinite(_) => MrdisStatus::NonFinite,
            E::InvalidArgument(_) => MrdisStatus::InvalidArgument,
            E::Format(_) => MrdisStatus::Format,
            E::Mismatch(_) => MrdisStatus::Mismatch,
            E::Io(_) => MrdisStatus::Io,
            E::Json(_) => MrdisStatus::Json,
            E::Csv(_) => MrdisStatus::Csv,
            E::Image(_) => MrdisStatus::Image,
        };
        Failure(status, e.to_string())
    }
}

type Outcome<T> = Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Outcome<()>) -> MrdisStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MrdisStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            MrdisStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MrdisStatus::NullPointer, format!("{what} is null"))
}

fn shape(msg: String) -> Failure {
    Failure(MrdisStatus::Shape, msg)
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Outcome<&'a [T]> {
    match (p.is_null(), len) {
        (_, 0) => Ok(&[]),
        (true, _) => Err(null(what)),
        (false, _) => Ok(std::slice::from_raw_parts(p, len)),
    }
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Outcome<&'a mut [T]> {
    match (p.is_null(), len) {
        (_, 0) => Ok(&mut []),
        (true, _) => Err(null(what)),
        (false, _) => Ok(std::slice::from_raw_parts_mut(p, len)),
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Outcome<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write<T>(p: *mut T, value: T, what: &str) -> Outcome<()> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(value);
    Ok(())
}

unsafe fn path<'a>(p: *const c_char) -> Outcome<&'a Path> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure(MrdisStatus::InvalidArgument, "path is not UTF-8".into()))
}

fn copy_into(dst: &mut [f64], src: &[f64], what: &str) -> Outcome<()> {
    if dst.len() != src.len() {
        return Err(shape(format!(
            "{what} needs {} values, buffer holds {}",
            src.len(),
            dst.len()
        )));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failure on the same thread.
#[no_mangle]
pub extern "C" fn mrdis_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mrdis_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn mrdis_model_load(file: *const c_char, out: *mut *mut MrdisModel) -> MrdisStatus {
    guard(|| {
        let model = LoadedModel::load(path(file)?)?;
        write(out, Box::into_raw(Box::new(MrdisModel(model))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn mrdis_model_free(model: *mut MrdisModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square images the model takes; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn mrdis_model_image_size(model: *const MrdisModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.stored_size())
}

#[no_mangle]
pub unsafe extern "C" fn mrdis_model_channels(model: *const MrdisModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.0.checkpoint.header.network.input_channels)
}

#[no_mangle]
pub unsafe extern "C" fn mrdis_model_num_outputs(model: *const MrdisModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.num_outputs())
}

/// Ten-crop class probabilities for one image.
///
/// `pixels` holds `size * size * channels` interleaved 8-bit samples, rows
/// top to bottom. `scores` must hold exactly `mrdis_model_num_outputs`
/// values.
#[no_mangle]
pub unsafe extern "C" fn mrdis_model_predict(
    model: *const MrdisModel,
    pixels: *const u8,
    pixels_len: usize,
    scores: *mut f64,
    scores_len: usize,
) -> MrdisStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let (n, c) = (m.stored_size(), m.checkpoint.header.network.input_channels);
        let px = input(pixels, pixels_len, "pixels")?;
        if px.len() != n * n * c {
            return Err(shape(format!(
                "model takes {n}x{n}x{c} images, got {} samples",
                px.len()
            )));
        }
        let mut one = Dataset::new(n, c, 1, 0)?;
        one.push(0, px)?;
        let p = predict(m, &one.image(0))?;
        copy_into(output(scores, scores_len, "scores")?, &p, "prediction")
    })
}

/// Scores every image of `dataset`.
#[no_mangle]
pub unsafe extern "C" fn mrdis_model_score_dataset(
    model: *const MrdisModel,
    dataset: *const MrdisDataset,
    out: *mut *mut MrdisScoreDump,
) -> MrdisStatus {
    guard(|| {
        let dump = score_dataset(&handle(model, "model")?.0, &handle(dataset, "dataset")?.0)?;
        write(out, Box::into_raw(Box::new(MrdisScoreDump(dump))), "out")
    })
}

/// Loads a dataset split file.
#[no_mangle]
pub unsafe extern "C" fn mrdis_dataset_load(file: *const c_char, out: *mut *mut MrdisDataset) -> MrdisStatus {
    guard(|| {
        let d = Dataset::load(path(file)?)?;
        write(out, Box::into_raw(Box::new(MrdisDataset(d))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn mrdis_dataset_free(dataset: *mut MrdisDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

#[no_mangle]
pub unsafe extern "C" fn mrdis_dataset_len(dataset: *const MrdisDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

#[no_mangle]
pub unsafe extern "C" fn mrdis_dataset_num_classes(dataset: *const MrdisDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.num_classes())
}

/// Copies the labels; `labels_len` must equal `mrdis_dataset_len`.
#[no_mangle]
pub unsafe extern "C" fn mrdis_dataset_labels(
    dataset: *const MrdisDataset,
    labels: *mut usize,
    labels_len: usize,
) -> MrdisStatus {
    guard(|| {
        let d = &handle(dataset, "dataset")?.0;
        let dst = output(labels, labels_len, "labels")?;
        if dst.len() != d.len() {
            return Err(shape(format!("{} labels, buffer holds {}", d.len(), dst.len())));
        }
        dst.copy_from_slice(d.labels());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mrdis_score_dump_load(file: *const c_char, out: *mut *mut MrdisScoreDump) -> MrdisStatus {
    guard(|| {
        let d = ScoreDump::load(path(file)?)?;
        write(out, Box::into_raw(Box::new(MrdisScoreDump(d))), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn mrdis_score_dump_save(dump: *const MrdisScoreDump, file: *const c_char) -> MrdisStatus {
    guard(|| {
        handle(dump, "dump")?.0.save(path(file)?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mrdis_score_dump_free(dump: *mut MrdisScoreDump) {
    if !dump.is_null() {
        drop(Box::from_raw(dump));
    }
}

#[no_mangle]
pub unsafe extern "C" fn mrdis_score_dump_len(dump: *const MrdisScoreDump) -> usize {
    dump.as_ref().map_or(0, |d| d.0.len())
}

#[no_mangle]
pub unsafe extern "C" fn mrdis_score_dump_width(dump: *const MrdisScoreDump) -> usize {
    dump.as_ref().map_or(0, |d| d.0.width)
}

/// Copies all scores, `len * width` values.
#[no_mangle]
pub unsafe extern "C" fn mrdis_score_dump_values(
    dump: *const MrdisScoreDump,
    values: *mut f64,
    values_len: usize,
) -> MrdisStatus {
    guard(|| {
        let d = &handle(dump, "dump")?.0;
        copy_into(output(values, values_len, "values")?, &d.values, "score dump")
    })
}

/// Weighted mean of dumps over the same images. `weights` may be null for
/// equal weights; otherwise it holds `num_dumps` values summing to 1.
#[no_mangle]
pub unsafe extern "C" fn mrdis_score_dump_fuse(
    dumps: *const *const MrdisScoreDump,
    num_dumps: usize,
    weights: *const f64,
    out: *mut *mut MrdisScoreDump,
) -> MrdisStatus {
    guard(|| {
        let refs = input(dumps, num_dumps, "dumps")?
            .iter()
            .map(|&d| handle(d, "dump").map(|h| &h.0))
            .collect::<Outcome<Vec<&ScoreDump>>>()?;
        let w = if weights.is_null() {
            None
        } else {
            Some(input(weights, num_dumps, "weights")?)
        };
        let fused = fuse_dumps(&refs, w)?;
        write(out, Box::into_raw(Box::new(MrdisScoreDump(fused))), "out")
    })
}

/// Top-1 and top-5 error of `dump` on `dataset`, which must be the split it
/// was scored on. Either out-pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn mrdis_evaluate(
    dump: *const MrdisScoreDump,
    dataset: *const MrdisDataset,
    top1_error: *mut f64,
    top5_error: *mut f64,
) -> MrdisStatus {
    guard(|| {
        let r = evaluate(&handle(dump, "dump")?.0, &handle(dataset, "dataset")?.0, None)?;
        if !top1_error.is_null() {
            top1_error.write(r.top1_error);
        }
        if !top5_error.is_null() {
            top5_error.write(r.top5_error);
        }
        Ok(())
    })
}

/// Weighted mean of `num_models` score vectors of `width` values each.
/// `weights` may be null for equal weights. `out` holds `width` values.
#[no_mangle]
pub unsafe extern "C" fn mrdis_fuse(
    scores: *const f64,
    num_models: usize,
    width: usize,
    weights: *const f64,
    out: *mut f64,
) -> MrdisStatus {
    guard(|| {
        if width == 0 {
            return Err(shape("width must be positive".into()));
        }
        let all = input(scores, num_models * width, "scores")?;
        let rows: Vec<&[f64]> = all.chunks_exact(width).collect();
        let w = if weights.is_null() {
            None
        } else {
            Some(input(weights, num_models, "weights")?)
        };
        let fused = fuse(&rows, w)?;
        copy_into(output(out, width, "out")?, &fused, "fused scores")
    })
}

/// Greedy merging of an `n x n` similarity matrix at threshold `tau`.
///
/// Writes each class's group index to `group_of` (`n` values). Groups are
/// numbered by their smallest member.
#[no_mangle]
pub unsafe extern "C" fn mrdis_merge(
    similarity: *const f64,
    n: usize,
    tau: f64,
    group_of: *mut usize,
    num_groups: *mut usize,
) -> MrdisStatus {
    guard(|| {
        let s = SimilarityMatrix::new(n, input(similarity, n * n, "similarity")?.to_vec())?;
        let p = merge_categories(&s, tau)?;
        output(group_of, n, "group_of")?.copy_from_slice(&p.group_of());
        write(num_groups, p.len(), "num_groups")
    })
}

/// Spreads super-category scores equally over member classes.
///
/// `group_of` maps each of `num_classes` classes to a group in
/// `0..num_groups`, numbered by smallest member as `mrdis_merge` returns.
#[no_mangle]
pub unsafe extern "C" fn mrdis_redistribute(
    super_scores: *const f64,
    num_groups: usize,
    group_of: *const usize,
    num_classes: usize,
    out: *mut f64,
) -> MrdisStatus {
    guard(|| {
        let map = input(group_of, num_classes, "group_of")?;
        let mut groups = vec![Vec::new(); num_groups];
        for (c, &g) in map.iter().enumerate() {
            groups
                .get_mut(g)
                .ok_or_else(|| {
                    Failure(
                        MrdisStatus::InvalidArgument,
                        format!("class {c} maps to group {g} of {num_groups}"),
                    )
                })?
                .push(c);
        }
        let p = Partition::from_groups(num_classes, groups, 1.0)?;
        if p.group_of() != map {
            return Err(Failure(
                MrdisStatus::InvalidArgument,
                "groups must be numbered by their smallest member".into(),
            ));
        }
        let spread = redistribute(input(super_scores, num_groups, "super_scores")?, &p)?;
        copy_into(output(out, num_classes, "out")?, &spread, "redistributed scores")
    })
}

/// Fraction of images whose label is not among the `k` highest scores.
/// Equal scores rank the lower class index first.
#[no_mangle]
pub unsafe extern "C" fn mrdis_top_k_error(
    scores: *const f64,
    num_images: usize,
    width: usize,
    labels: *const usize,
    k: usize,
    out: *mut f64,
) -> MrdisStatus {
    guard(|| {
        if width == 0 {
            return Err(shape("width must be positive".into()));
        }
        let all = input(scores, num_images * width, "scores")?;
        let rows: Vec<&[f64]> = all.chunks_exact(width).collect();
        let e = top_k_error(&rows, input(labels, num_images, "labels")?, k)?;
        write(out, e, "out")
    })
}
