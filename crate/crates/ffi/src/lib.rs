//! C ABI over the chatpainter library.
//!
//! Every fallible function returns a [`CpStatus`]; on failure the message is
//! available from [`cp_last_error`] on the same thread. Results come back
//! through out-pointers. Strings returned by the library are owned by the
//! caller and released with [`cp_string_free`]; handles are released with
//! their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use chatpainter::conditioning::kl_standard_normal;
use chatpainter::data_ingest::{load_dataset, Dataset};
use chatpainter::data_synth::{generate_dataset, Dialogue, Turn};
use chatpainter::evaluation::{generate_images, inception_style_score, Condition, PosteriorMatrix};
use chatpainter::model::Stage;
use chatpainter::training::{lr_schedule, Checkpoint};
use chatpainter::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Dataset = 5,
    Checkpoint = 6,
    NonFinite = 7,
    BufferTooSmall = 8,
    Panic = 99,
}

/// A loaded dataset directory.
pub struct CpDataset {
    inner: Dataset,
}

/// A checkpoint ready for generation.
pub struct CpGenerator {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> CpStatus {
    match e {
        Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::UnsupportedResolution(_) => {
            CpStatus::InvalidArgument
        }
        Error::Config(_) => CpStatus::Config,
        Error::Io { .. } | Error::Image { .. } | Error::Json(_) => CpStatus::Io,
        Error::Dataset(_) | Error::Sample { .. } => CpStatus::Dataset,
        Error::Checkpoint(_) | Error::MissingParameter(_) => CpStatus::Checkpoint,
        Error::NonFinite(_) | Error::Diverged(_) => CpStatus::NonFinite,
        _ => CpStatus::InvalidArgument,
    }
}

struct Fail(CpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CpStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CpStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn owned_string(s: &str) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn cp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// KL divergence of `N(mu, diag(exp(log_sigma))^2)` from `N(0, I)`.
///
/// # Safety
/// `mu` and `log_sigma` must point to `n` doubles; `out` to one.
#[no_mangle]
pub unsafe extern "C" fn cp_kl_standard_normal(
    mu: *const f64,
    log_sigma: *const f64,
    n: usize,
    out: *mut f64,
) -> CpStatus {
    guard(|| {
        let mu = slice_arg(mu, n, "mu")?;
        let ls = slice_arg(log_sigma, n, "log_sigma")?;
        write(out, kl_standard_normal(mu, ls)?, "out")
    })
}

/// Learning rate at `epoch`: `lr0` halved every `half_every` epochs.
///
/// # Safety
/// `out` must point to one double.
#[no_mangle]
pub unsafe extern "C" fn cp_lr_schedule(epoch: usize, lr0: f64, half_every: usize, out: *mut f64) -> CpStatus {
    guard(|| {
        if half_every == 0 {
            return Err(Fail(CpStatus::InvalidArgument, "half_every must be positive".into()));
        }
        write(out, lr_schedule(epoch, lr0, half_every), "out")
    })
}

/// Inception-style score of a row-major `rows x classes` posterior matrix.
///
/// # Safety
/// `p` must point to `rows * classes` doubles; `mean` and `std` to one each.
#[no_mangle]
pub unsafe extern "C" fn cp_inception_score(
    p: *const f64,
    rows: usize,
    classes: usize,
    n_splits: usize,
    split_size: usize,
    seed: u64,
    mean: *mut f64,
    std: *mut f64,
) -> CpStatus {
    guard(|| {
        let n = rows
            .checked_mul(classes)
            .ok_or_else(|| Fail(CpStatus::InvalidArgument, "rows * classes overflows".into()))?;
        let data = slice_arg(p, n, "p")?;
        let m = PosteriorMatrix::new(rows, classes, data.to_vec())?;
        let r = inception_style_score(&m, n_splits, split_size, seed)?;
        write(mean, r.mean, "mean")?;
        write(std, r.std, "std")
    })
}

/// Writes a dataset of `n` scenes to `out_dir` and returns its content
/// digest as a hex string in `digest` (free with `cp_string_free`).
///
/// # Safety
/// `out_dir` must be a NUL-terminated string, `resolutions` must point to
/// `n_resolutions` values and `digest` to one pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_dataset_generate(
    out_dir: *const c_char,
    n: usize,
    seed: u64,
    resolutions: *const usize,
    n_resolutions: usize,
    digest: *mut *mut c_char,
) -> CpStatus {
    guard(|| {
        let dir = str_arg(out_dir, "out_dir")?;
        let res = slice_arg(resolutions, n_resolutions, "resolutions")?;
        if digest.is_null() {
            return Err(null("digest"));
        }
        let m = generate_dataset(n, seed, res, Path::new(dir))?;
        write(digest, owned_string(&m.digest), "digest")
    })
}

/// Opens a dataset directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` must point to one pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_dataset_open(dir: *const c_char, out: *mut *mut CpDataset) -> CpStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = load_dataset(Path::new(dir))?;
        write(out, Box::into_raw(Box::new(CpDataset { inner })), "out")
    })
}

/// Number of samples.
///
/// # Safety
/// `ds` must be a live handle and `out` must point to one value.
#[no_mangle]
pub unsafe extern "C" fn cp_dataset_len(ds: *const CpDataset, out: *mut usize) -> CpStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        write(out, ds.inner.len(), "out")
    })
}

/// Caption of the sample at position `index` (free with `cp_string_free`).
///
/// # Safety
/// `ds` must be a live handle and `out` must point to one pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_dataset_caption(ds: *const CpDataset, index: usize, out: *mut *mut c_char) -> CpStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let s = ds.inner.samples().get(index).ok_or_else(|| {
            Fail(
                CpStatus::InvalidArgument,
                format!("index {index} out of range for {} samples", ds.inner.len()),
            )
        })?;
        write(out, owned_string(&s.caption), "out")
    })
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `ds` must come from `cp_dataset_open` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cp_dataset_free(ds: *mut CpDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a Stage-I or Stage-II checkpoint for generation.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` must point to one pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_generator_open(path: *const c_char, out: *mut *mut CpGenerator) -> CpStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(Path::new(path))?;
        ckpt.check_groups()?;
        write(out, Box::into_raw(Box::new(CpGenerator { ckpt })), "out")
    })
}

fn resolution(g: &CpGenerator) -> usize {
    let d = &g.ckpt.config.model.dims;
    match g.ckpt.stage {
        Stage::One => d.w0,
        Stage::Two => d.w,
    }
}

/// Side length of the generated images.
///
/// # Safety
/// `g` must be a live handle and `out` must point to one value.
#[no_mangle]
pub unsafe extern "C" fn cp_generator_resolution(g: *const CpGenerator, out: *mut usize) -> CpStatus {
    guard(|| {
        let g = g.as_ref().ok_or_else(|| null("generator"))?;
        write(out, resolution(g), "out")
    })
}

unsafe fn render(g: &CpGenerator, cond: Condition<'_>, seed: u64, rgb: *mut u8, rgb_len: usize) -> Result<(), Fail> {
    let r = resolution(g);
    let need = r * r * 3;
    if rgb.is_null() {
        return Err(null("rgb"));
    }
    if rgb_len < need {
        return Err(Fail(
            CpStatus::BufferTooSmall,
            format!("rgb buffer holds {rgb_len} bytes, {need} needed"),
        ));
    }
    let img = generate_images(&g.ckpt, &[cond], seed)?
        .pop()
        .ok_or_else(|| Fail(CpStatus::Panic, "no image generated".into()))?;
    let bytes = img.image.to_rgb8();
    slice::from_raw_parts_mut(rgb, need).copy_from_slice(&bytes);
    Ok(())
}

/// Renders the caption and dialogue of dataset sample `index` into `rgb` as
/// 8-bit row-major RGB (`resolution * resolution * 3` bytes). Noise is drawn
/// from `seed` and the sample id, as in the evaluation pipeline.
///
/// # Safety
/// `g` and `ds` must be live handles; `rgb` must point to `rgb_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cp_generator_render_sample(
    g: *const CpGenerator,
    ds: *const CpDataset,
    index: usize,
    seed: u64,
    rgb: *mut u8,
    rgb_len: usize,
) -> CpStatus {
    guard(|| {
        let g = g.as_ref().ok_or_else(|| null("generator"))?;
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let s = ds.inner.samples().get(index).ok_or_else(|| {
            Fail(
                CpStatus::InvalidArgument,
                format!("index {index} out of range for {} samples", ds.inner.len()),
            )
        })?;
        let cond = Condition {
            id: s.id,
            caption: &s.caption,
            dialogue: &s.dialogue,
        };
        render(g, cond, seed, rgb, rgb_len)
    })
}

/// Renders free text. `dialogue` holds one turn per line, question and
/// answer separated by a tab; exactly ten turns are required.
///
/// # Safety
/// `g` must be a live handle, `caption` and `dialogue` NUL-terminated
/// strings and `rgb` must point to `rgb_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cp_generator_render_text(
    g: *const CpGenerator,
    caption: *const c_char,
    dialogue: *const c_char,
    id: u64,
    seed: u64,
    rgb: *mut u8,
    rgb_len: usize,
) -> CpStatus {
    guard(|| {
        let g = g.as_ref().ok_or_else(|| null("generator"))?;
        let caption = str_arg(caption, "caption")?;
        let text = str_arg(dialogue, "dialogue")?;
        let turns = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once('\t')
                    .map(|(q, a)| Turn {
                        question: q.trim().to_string(),
                        answer: a.trim().to_string(),
                    })
                    .ok_or_else(|| Fail(CpStatus::InvalidArgument, format!("dialogue line `{l}` has no tab")))
            })
            .collect::<Result<Vec<_>, Fail>>()?;
        let dialogue = Dialogue::new(turns)?;
        let cond = Condition {
            id,
            caption,
            dialogue: &dialogue,
        };
        render(g, cond, seed, rgb, rgb_len)
    })
}

/// Releases a generator handle. Null is ignored.
///
/// # Safety
/// `g` must come from `cp_generator_open` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cp_generator_free(g: *mut CpGenerator) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}
