//! C ABI over `latentwarp`.
//!
//! Every function returns an [`LwStatus`]; outputs go through pointer
//! arguments. Objects are opaque and must be released with their `_free`
//! function. After a non-OK status, [`lw_last_error_message`] describes the
//! failure on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use latentwarp::cli::pipeline_config_from_kv;
use latentwarp::flow::{backward_warp_with, forward_splat_with, read_flo, write_flo};
use latentwarp::grid::{read_tensor, write_tensor};
use latentwarp::kv::{KeyValues, ParseError};
use latentwarp::mask::{binary_mask, mask_to_latent_res, occlusion_map_with, MaskParams, UnitMap};
use latentwarp::pipeline::{run_video, RunOutput};
use latentwarp::synth::generate;
use latentwarp::{BinaryMask, Boundary, Error, FlowField, LatentGrid, SceneSpec, SequenceBundle};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LwStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Format = 3,
    Io = 4,
    Sequencing = 5,
    Contract = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LwBoundary {
    Clamp = 0,
    Wrap = 1,
}

impl From<LwBoundary> for Boundary {
    fn from(b: LwBoundary) -> Self {
        match b {
            LwBoundary::Clamp => Boundary::Clamp,
            LwBoundary::Wrap => Boundary::Wrap,
        }
    }
}

/// A `channels x height x width` float grid.
pub struct LwGrid(LatentGrid);

/// A per-pixel displacement field.
pub struct LwFlow(FlowField);

/// A binary decision mask.
pub struct LwMask(BinaryMask);

/// Frames plus flows in both directions.
pub struct LwBundle(SequenceBundle);

/// Output of a full pipeline run.
pub struct LwRun(RunOutput);

struct Failure {
    status: LwStatus,
    message: String,
}

type FfiResult<T> = Result<T, Failure>;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Format(_) | Error::Truncated { .. } | Error::Image(_) => LwStatus::Format,
            Error::Validation(_) | Error::Dimension(_) => LwStatus::InvalidArgument,
            Error::CacheMiss { .. } | Error::CacheOverwrite { .. } | Error::Sequencing(_) => LwStatus::Sequencing,
            Error::Contract(_) => LwStatus::Contract,
            Error::Io(_) => LwStatus::Io,
        };
        Failure {
            status,
            message: e.to_string(),
        }
    }
}

impl From<ParseError> for Failure {
    fn from(e: ParseError) -> Self {
        Failure {
            status: LwStatus::Format,
            message: e.to_string(),
        }
    }
}

fn fail(status: LwStatus, message: impl Into<String>) -> Failure {
    Failure {
        status,
        message: message.into(),
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> LwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LwStatus::Ok,
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(payload) => {
            let text = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_last_error(&format!("panic: {text}"));
            LwStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .ok_or_else(|| fail(LwStatus::NullArgument, format!("{what} is null")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .ok_or_else(|| fail(LwStatus::NullArgument, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(LwStatus::NullArgument, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(LwStatus::NullArgument, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(fail(LwStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(LwStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn copy_into<T: Copy>(src: &[T], dst: &mut [T]) -> FfiResult<()> {
    if dst.len() != src.len() {
        return Err(fail(
            LwStatus::InvalidArgument,
            format!("buffer holds {} elements, need {}", dst.len(), src.len()),
        ));
    }
    dst.copy_from_slice(src);
    Ok(())
}

fn unit_map(grid: &LatentGrid, what: &str) -> FfiResult<UnitMap> {
    if grid.channels() != 1 {
        return Err(fail(
            LwStatus::InvalidArgument,
            format!("{what} must have one channel, has {}", grid.channels()),
        ));
    }
    Ok(UnitMap::new(grid.height(), grid.width(), grid.data().to_vec())?)
}

// ---- library -------------------------------------------------------------

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lw_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

// ---- grids ---------------------------------------------------------------

/// Creates a grid from `channels * height * width` floats in channel-major order.
///
/// # Safety
/// `data` must point to `len` readable floats; `out_grid` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_grid_new(
    channels: usize,
    height: usize,
    width: usize,
    data: *const f32,
    len: usize,
    out_grid: *mut *mut LwGrid,
) -> LwStatus {
    guard(|| {
        let dst = out(out_grid, "out_grid")?;
        let values = slice(data, len, "data")?;
        let grid = LatentGrid::new(channels, height, width, values.to_vec())?;
        *dst = boxed(LwGrid(grid));
        Ok(())
    })
}

/// # Safety
/// `grid` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lw_grid_free(grid: *mut LwGrid) {
    release(grid);
}

/// # Safety
/// `grid` must be valid; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_grid_dims(
    grid: *const LwGrid,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> LwStatus {
    guard(|| {
        let g = &get(grid, "grid")?.0;
        *out(channels, "channels")? = g.channels();
        *out(height, "height")? = g.height();
        *out(width, "width")? = g.width();
        Ok(())
    })
}

/// Copies the grid values into `buffer`, which must hold exactly
/// `channels * height * width` floats.
///
/// # Safety
/// `buffer` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn lw_grid_copy_data(grid: *const LwGrid, buffer: *mut f32, len: usize) -> LwStatus {
    guard(|| copy_into(get(grid, "grid")?.0.data(), slice_mut(buffer, len, "buffer")?))
}

/// # Safety
/// `path` must be a NUL-terminated string; `out_grid` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_grid_read_tensor(path: *const c_char, out_grid: *mut *mut LwGrid) -> LwStatus {
    guard(|| {
        let dst = out(out_grid, "out_grid")?;
        let grid = read_tensor(text(path, "path")?)?;
        *dst = boxed(LwGrid(grid));
        Ok(())
    })
}

/// # Safety
/// `grid` must be valid; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lw_grid_write_tensor(grid: *const LwGrid, path: *const c_char) -> LwStatus {
    guard(|| Ok(write_tensor(&get(grid, "grid")?.0, text(path, "path")?)?))
}

// ---- flows ---------------------------------------------------------------

/// Creates a flow from separate horizontal and vertical components of
/// `height * width` floats each.
///
/// # Safety
/// `u` and `v` must each point to `len` readable floats.
#[no_mangle]
pub unsafe extern "C" fn lw_flow_new(
    height: usize,
    width: usize,
    u: *const f32,
    v: *const f32,
    len: usize,
    out_flow: *mut *mut LwFlow,
) -> LwStatus {
    guard(|| {
        let dst = out(out_flow, "out_flow")?;
        let (u, v) = (slice(u, len, "u")?, slice(v, len, "v")?);
        let flow = FlowField::new(height, width, u.to_vec(), v.to_vec())?;
        *dst = boxed(LwFlow(flow));
        Ok(())
    })
}

/// # Safety
/// `flow` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lw_flow_free(flow: *mut LwFlow) {
    release(flow);
}

/// # Safety
/// `flow` must be valid; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_flow_dims(flow: *const LwFlow, height: *mut usize, width: *mut usize) -> LwStatus {
    guard(|| {
        let f = &get(flow, "flow")?.0;
        *out(height, "height")? = f.height();
        *out(width, "width")? = f.width();
        Ok(())
    })
}

/// # Safety
/// `u` and `v` must each point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn lw_flow_copy_data(flow: *const LwFlow, u: *mut f32, v: *mut f32, len: usize) -> LwStatus {
    guard(|| {
        let f = &get(flow, "flow")?.0;
        copy_into(f.u(), slice_mut(u, len, "u")?)?;
        copy_into(f.v(), slice_mut(v, len, "v")?)
    })
}

/// Reads a Middlebury `.flo` file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_flow` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_flow_read_flo(path: *const c_char, out_flow: *mut *mut LwFlow) -> LwStatus {
    guard(|| {
        let dst = out(out_flow, "out_flow")?;
        let flow = read_flo(text(path, "path")?)?;
        *dst = boxed(LwFlow(flow));
        Ok(())
    })
}

/// # Safety
/// `flow` must be valid; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lw_flow_write_flo(flow: *const LwFlow, path: *const c_char) -> LwStatus {
    guard(|| Ok(write_flo(&get(flow, "flow")?.0, text(path, "path")?)?))
}

// ---- warping and masks ---------------------------------------------------

/// Bilinear pull of `source` along `flow`.
///
/// # Safety
/// Handles must be valid; `out_grid` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_backward_warp(
    source: *const LwGrid,
    flow: *const LwFlow,
    boundary: LwBoundary,
    out_grid: *mut *mut LwGrid,
) -> LwStatus {
    guard(|| {
        let dst = out(out_grid, "out_grid")?;
        let warped = backward_warp_with(&get(source, "source")?.0, &get(flow, "flow")?.0, boundary.into())?;
        *dst = boxed(LwGrid(warped));
        Ok(())
    })
}

/// Bilinear push of `source` along `flow`, summing overlaps.
///
/// # Safety
/// Handles must be valid; `out_grid` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_forward_splat(
    source: *const LwGrid,
    flow: *const LwFlow,
    boundary: LwBoundary,
    out_grid: *mut *mut LwGrid,
) -> LwStatus {
    guard(|| {
        let dst = out(out_grid, "out_grid")?;
        let splat = forward_splat_with(&get(source, "source")?.0, &get(flow, "flow")?.0, boundary.into())?;
        *dst = boxed(LwGrid(splat));
        Ok(())
    })
}

/// One-channel occupancy of the current frame for a previous-to-current flow.
///
/// # Safety
/// `flow` must be valid; `out_grid` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_occlusion_map(
    flow_prev_to_cur: *const LwFlow,
    boundary: LwBoundary,
    out_grid: *mut *mut LwGrid,
) -> LwStatus {
    guard(|| {
        let dst = out(out_grid, "out_grid")?;
        let o = occlusion_map_with(&get(flow_prev_to_cur, "flow")?.0, boundary.into())?;
        *dst = boxed(LwGrid(o.to_grid()));
        Ok(())
    })
}

/// Thresholds one-channel occlusion and residual grids into a mask.
///
/// # Safety
/// Handles must be valid; `out_mask` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_binary_mask(
    occlusion: *const LwGrid,
    residual: *const LwGrid,
    alpha: f32,
    threshold: f32,
    out_mask: *mut *mut LwMask,
) -> LwStatus {
    guard(|| {
        let dst = out(out_mask, "out_mask")?;
        let o = unit_map(&get(occlusion, "occlusion")?.0, "occlusion")?;
        let r = unit_map(&get(residual, "residual")?.0, "residual")?;
        let mask = binary_mask(&o, &r, &MaskParams::new(alpha, threshold)?)?;
        *dst = boxed(LwMask(mask));
        Ok(())
    })
}

/// Pools a pixel mask to latent resolution.
///
/// # Safety
/// `mask` must be valid; `out_mask` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_mask_to_latent(mask: *const LwMask, factor: usize, out_mask: *mut *mut LwMask) -> LwStatus {
    guard(|| {
        let dst = out(out_mask, "out_mask")?;
        let pooled = mask_to_latent_res(&get(mask, "mask")?.0, factor)?;
        *dst = boxed(LwMask(pooled));
        Ok(())
    })
}

/// # Safety
/// `mask` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lw_mask_free(mask: *mut LwMask) {
    release(mask);
}

/// # Safety
/// `mask` must be valid; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_mask_dims(
    mask: *const LwMask,
    height: *mut usize,
    width: *mut usize,
    ones: *mut usize,
) -> LwStatus {
    guard(|| {
        let m = &get(mask, "mask")?.0;
        *out(height, "height")? = m.height();
        *out(width, "width")? = m.width();
        *out(ones, "ones")? = m.count_ones();
        Ok(())
    })
}

/// Writes one byte per cell, 0 or 1, in row-major order.
///
/// # Safety
/// `buffer` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lw_mask_copy_bits(mask: *const LwMask, buffer: *mut u8, len: usize) -> LwStatus {
    guard(|| {
        let bytes: Vec<u8> = get(mask, "mask")?.0.bits().iter().map(|&b| b as u8).collect();
        copy_into(&bytes, slice_mut(buffer, len, "buffer")?)
    })
}

// ---- sequences and runs --------------------------------------------------

/// Generates a synthetic sequence from `key=value` scene text.
///
/// # Safety
/// `spec` must be a NUL-terminated string; `out_bundle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_bundle_synth(spec: *const c_char, out_bundle: *mut *mut LwBundle) -> LwStatus {
    guard(|| {
        let dst = out(out_bundle, "out_bundle")?;
        let scene = SceneSpec::parse(text(spec, "spec")?)?;
        *dst = boxed(LwBundle(generate(&scene)?.quantized()));
        Ok(())
    })
}

/// # Safety
/// `bundle` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lw_bundle_free(bundle: *mut LwBundle) {
    release(bundle);
}

/// # Safety
/// `bundle` must be valid; `frames` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_bundle_len(bundle: *const LwBundle, frames: *mut usize) -> LwStatus {
    guard(|| {
        *out(frames, "frames")? = get(bundle, "bundle")?.0.len();
        Ok(())
    })
}

/// Translates the key frames of `bundle`. `config` holds `key=value`
/// pipeline settings and may be null for defaults.
///
/// # Safety
/// `bundle` must be valid; `config` must be null or NUL-terminated;
/// `out_run` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_run_video(
    bundle: *const LwBundle,
    config: *const c_char,
    out_run: *mut *mut LwRun,
) -> LwStatus {
    guard(|| {
        let dst = out(out_run, "out_run")?;
        let bundle = &get(bundle, "bundle")?.0;
        let kv = if config.is_null() {
            KeyValues::default()
        } else {
            KeyValues::parse(text(config, "config")?)?
        };
        let cfg = pipeline_config_from_kv(&kv)?;
        cfg.validate()?;
        let denoiser = cfg.denoiser.build(bundle.frames[0].grid().channels())?;
        let run = run_video(bundle, &cfg, denoiser.as_ref())?;
        *dst = boxed(LwRun(run));
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lw_run_free(run: *mut LwRun) {
    release(run);
}

/// Number of translated key frames.
///
/// # Safety
/// `run` must be valid; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_run_len(run: *const LwRun, count: *mut usize) -> LwStatus {
    guard(|| {
        *out(count, "count")? = get(run, "run")?.0.translations.len();
        Ok(())
    })
}

unsafe fn translation<'a>(run: *const LwRun, i: usize) -> FfiResult<&'a latentwarp::pipeline::FrameTranslation> {
    let r = &get(run, "run")?.0;
    r.translations.get(i).ok_or_else(|| {
        fail(
            LwStatus::InvalidArgument,
            format!("key frame {i} of {}", r.translations.len()),
        )
    })
}

/// Source frame index and aligned step count of the `i`-th key frame.
///
/// # Safety
/// `run` must be valid; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_run_key_frame(
    run: *const LwRun,
    i: usize,
    frame_index: *mut usize,
    aligned_steps: *mut usize,
) -> LwStatus {
    guard(|| {
        let t = translation(run, i)?;
        *out(frame_index, "frame_index")? = t.frame_index;
        *out(aligned_steps, "aligned_steps")? = t.aligned_steps;
        Ok(())
    })
}

/// Final latent of the `i`-th key frame.
///
/// # Safety
/// `run` must be valid; `out_grid` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_run_latent(run: *const LwRun, i: usize, out_grid: *mut *mut LwGrid) -> LwStatus {
    guard(|| {
        let dst = out(out_grid, "out_grid")?;
        *dst = boxed(LwGrid(translation(run, i)?.latent().clone()));
        Ok(())
    })
}

/// Decoded, 8-bit quantized output frame of the `i`-th key frame.
///
/// # Safety
/// `run` must be valid; `out_grid` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_run_frame(run: *const LwRun, i: usize, out_grid: *mut *mut LwGrid) -> LwStatus {
    guard(|| {
        let dst = out(out_grid, "out_grid")?;
        *dst = boxed(LwGrid(translation(run, i)?.frame.grid().clone()));
        Ok(())
    })
}

/// Mean warp error and token consistency of the run. Values that are
/// undefined (fewer than two key frames) are reported as NaN.
///
/// # Safety
/// `run` must be valid; the output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn lw_run_metrics(
    run: *const LwRun,
    warp_error: *mut f64,
    masked_warp_error: *mut f64,
    token_consistency: *mut f64,
) -> LwStatus {
    guard(|| {
        let m = &get(run, "run")?.0.metrics;
        *out(warp_error, "warp_error")? = m.mean.unwrap_or(f64::NAN);
        *out(masked_warp_error, "masked_warp_error")? = m.masked_mean.unwrap_or(f64::NAN);
        *out(token_consistency, "token_consistency")? = m.token_consistency.unwrap_or(f64::NAN);
        Ok(())
    })
}
