//! C ABI for datasets, cells and search checkpoints.
//!
//! Every fallible function returns an [`AmStatus`]; on failure the message is
//! available from [`am_last_error`] on the same thread. Objects are opaque
//! handles released with their `_free` function. Strings returned to the
//! caller are owned by the caller and released with [`am_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use autometa::data::{generate_synthetic_glyphs, load_dataset, ClassDataset};
use autometa::search::SearchState;
use autometa::{cell_depth, compile_network, enumerate_expansions, CellSpec, Error, NetworkSpec};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    /// Malformed file or JSON.
    Format = 4,
    VersionMismatch = 5,
    InvalidCell = 6,
    InvalidConfig = 7,
    InsufficientData = 8,
    /// The requested value does not exist, e.g. the best cell of an empty
    /// search.
    NotFound = 9,
    Panic = 10,
    Internal = 11,
}

/// A class-labelled image dataset.
pub struct AmDataset(ClassDataset);

/// A cell genotype.
pub struct AmCell(CellSpec);

/// A loaded search checkpoint.
pub struct AmSearchState(SearchState);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AmStatus {
    match e {
        Error::Io { .. } => AmStatus::Io,
        Error::BadMagic | Error::Truncated { .. } | Error::CountMismatch(_) | Error::Json(_) => AmStatus::Format,
        Error::VersionMismatch { .. } => AmStatus::VersionMismatch,
        Error::InvalidCell(_) | Error::CellFull(_) => AmStatus::InvalidCell,
        Error::Config(_) => AmStatus::InvalidConfig,
        Error::InsufficientData(_) => AmStatus::InsufficientData,
        _ => AmStatus::Internal,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (AmStatus, String)>) -> AmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside autometa".into());
            AmStatus::Panic
        }
    }
}

fn lib<T>(r: autometa::Result<T>) -> Result<T, (AmStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (AmStatus, String) {
    (AmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (AmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (AmStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, (AmStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (AmStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn am_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn am_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn am_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Renders a synthetic glyph dataset.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn am_dataset_generate(
    seed: u64,
    n_classes: usize,
    per_class: usize,
    size: usize,
    out: *mut *mut AmDataset,
) -> AmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = lib(generate_synthetic_glyphs(seed, n_classes, per_class, size))?;
        *out = Box::into_raw(Box::new(AmDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn am_dataset_load(path: *const c_char, out: *mut *mut AmDataset) -> AmStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let ds = lib(load_dataset(path))?;
        *out = Box::into_raw(Box::new(AmDataset(ds)));
        Ok(())
    })
}

/// Writes the dataset in FSDS format.
///
/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn am_dataset_save(ds: *const AmDataset, path: *const c_char) -> AmStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let path = str_arg(path, "path")?;
        lib(ds.0.save(path))
    })
}

/// Number of classes, image height and width. Any output pointer may be NULL.
///
/// # Safety
/// `ds` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn am_dataset_shape(
    ds: *const AmDataset,
    n_classes: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> AmStatus {
    guard(|| {
        let ds = &ref_arg(ds, "dataset")?.0;
        for (p, v) in [(n_classes, ds.n_classes()), (height, ds.height), (width, ds.width)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn am_dataset_free(ds: *mut AmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Parses a cell such as `[[0,"conv3",1,"max3"]]`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn am_cell_from_json(json: *const c_char, out: *mut *mut AmCell) -> AmStatus {
    guard(|| {
        let json = str_arg(json, "json")?;
        let out = out_arg(out, "out")?;
        let cell = lib(CellSpec::from_json(json))?;
        *out = Box::into_raw(Box::new(AmCell(cell)));
        Ok(())
    })
}

/// Canonical key of the cell; free with `am_string_free`.
///
/// # Safety
/// `cell` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn am_cell_key(cell: *const AmCell, out: *mut *mut c_char) -> AmStatus {
    guard(|| {
        let cell = ref_arg(cell, "cell")?;
        let out = out_arg(out, "out")?;
        *out = to_c_string(cell.0.key());
        Ok(())
    })
}

/// # Safety
/// `cell` must be a live handle and `blocks` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn am_cell_num_blocks(cell: *const AmCell, blocks: *mut usize) -> AmStatus {
    guard(|| {
        *out_arg(blocks, "blocks")? = ref_arg(cell, "cell")?.0.len();
        Ok(())
    })
}

/// Longest input-to-output path in blocks.
///
/// # Safety
/// `cell` must be a live handle and `depth` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn am_cell_depth(cell: *const AmCell, depth: *mut usize) -> AmStatus {
    guard(|| {
        *out_arg(depth, "depth")? = cell_depth(&ref_arg(cell, "cell")?.0);
        Ok(())
    })
}

/// Number of distinct cells reachable by adding one block.
///
/// # Safety
/// `cell` must be a live handle and `count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn am_cell_expansion_count(cell: *const AmCell, max_blocks: usize, count: *mut usize) -> AmStatus {
    guard(|| {
        let cell = &ref_arg(cell, "cell")?.0;
        let count = out_arg(count, "count")?;
        *count = lib(enumerate_expansions(cell, cell.len(), max_blocks))?.len();
        Ok(())
    })
}

/// Learnable parameters of the network built from this cell.
///
/// # Safety
/// `cell` must be a live handle and `count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn am_cell_param_count(
    cell: *const AmCell,
    filters: usize,
    n_classes: usize,
    count: *mut usize,
) -> AmStatus {
    guard(|| {
        let cell = &ref_arg(cell, "cell")?.0;
        let count = out_arg(count, "count")?;
        let spec = NetworkSpec::new(cell.clone(), filters, n_classes);
        let (net, _) = lib(compile_network(&spec, 0))?;
        *count = net.param_count();
        Ok(())
    })
}

/// # Safety
/// `cell` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn am_cell_free(cell: *mut AmCell) {
    if !cell.is_null() {
        drop(Box::from_raw(cell));
    }
}

/// Loads a `state.json` checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn am_state_load(path: *const c_char, out: *mut *mut AmSearchState) -> AmStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let state = lib(SearchState::load(path))?;
        *out = Box::into_raw(Box::new(AmSearchState(state)));
        Ok(())
    })
}

/// Completed stages and number of trained candidates. Either output may be
/// NULL.
///
/// # Safety
/// `state` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn am_state_progress(state: *const AmSearchState, stage: *mut usize, trained: *mut usize) -> AmStatus {
    guard(|| {
        let s = &ref_arg(state, "state")?.0;
        if let Some(p) = stage.as_mut() {
            *p = s.stage;
        }
        if let Some(p) = trained.as_mut() {
            *p = s.history.len();
        }
        Ok(())
    })
}

/// Best cell of the current beam and its observed score. Returns
/// `NotFound` before the first stage completes.
///
/// # Safety
/// `state` must be a live handle, `cell` a valid pointer; `score` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn am_state_best_cell(state: *const AmSearchState, cell: *mut *mut AmCell, score: *mut f64) -> AmStatus {
    guard(|| {
        let s = &ref_arg(state, "state")?.0;
        let cell = out_arg(cell, "cell")?;
        let best = s
            .best()
            .ok_or_else(|| (AmStatus::NotFound, "search has no completed stage".to_string()))?;
        if let Some(p) = score.as_mut() {
            *p = best.score;
        }
        *cell = Box::into_raw(Box::new(AmCell(best.cell.clone())));
        Ok(())
    })
}

/// # Safety
/// `state` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn am_state_free(state: *mut AmSearchState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}
