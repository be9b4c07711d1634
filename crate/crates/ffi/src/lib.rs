//! C ABI over the attncalib workbench.
//!
//! Models and calibrations are opaque handles created by `ac_*` constructors
//! and released with the matching `*_free`. Every fallible call returns an
//! [`AcStatus`]; on failure the message is kept per thread and can be copied
//! out with [`ac_last_error`]. Handles are not synchronised: share one across
//! threads only for concurrent reads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use attncalib::calib_dac::DacModule;
use attncalib::calib_uac::{calibrate, CalibrationMatrix, UacConfig};
use attncalib::evalkit::parse_answer;
use attncalib::model::{Decoding, Model, ModelConfig, RecordSpec, TokenSequence, OBJECTS};
use attncalib::ndgrad::Tensor;
use attncalib::pipeline::Calibration;
use attncalib::probe::{measure_spb, ProbeConfig, ProbeInput};
use attncalib::synth::Query;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Runtime = 5,
    Panic = 6,
}

/// Polling answer written by [`ac_poll`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcAnswer {
    No = 0,
    Yes = 1,
    Unparsed = 2,
}

/// A loaded or freshly initialised backbone.
pub struct AcModel {
    model: Model,
}

/// A calibration bound to the model it was built for.
pub struct AcCalibration {
    calib: Calibration,
    n_vision: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(AcStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(AcStatus::NullPointer, format!("{what} is null"))
    }

    fn arg(msg: impl Into<String>) -> Self {
        Failure(AcStatus::InvalidArgument, msg.into())
    }
}

/// Errors on a readable path are format errors; unreadable paths are I/O.
fn load_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    match std::fs::metadata(path) {
        Ok(m) if m.is_file() => Failure(AcStatus::Format, e.to_string()),
        _ => Failure(AcStatus::Io, e.to_string()),
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AcStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AcStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            AcStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::arg("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_arg<'a>(m: *const AcModel) -> Result<&'a Model, Failure> {
    m.as_ref().map(|m| &m.model).ok_or_else(|| Failure::null("model"))
}

/// A null calibration means none.
unsafe fn calib_arg<'a>(c: *const AcCalibration, model: &Model) -> Result<Option<&'a Calibration>, Failure> {
    match c.as_ref() {
        None => Ok(None),
        Some(c) if c.n_vision != model.n_vision() => Err(Failure::arg(format!(
            "calibration built for {} vision tokens, model has {}",
            c.n_vision,
            model.n_vision()
        ))),
        Some(c) => Ok(Some(&c.calib)),
    }
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the length the full
/// message needs, terminator included.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ac_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = (bytes.len() - 1).min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a backbone checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_model_load(path: *const c_char, out: *mut *mut AcModel) -> AcStatus {
    guard(|| {
        let p = path_arg(path)?;
        let model = Model::load(&p).map_err(|e| load_failure(&p, e))?;
        write_out(out, AcModel { model })
    })
}

/// Initialises an untrained backbone with the default architecture.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_model_init(seed: u64, out: *mut *mut AcModel) -> AcStatus {
    guard(|| {
        let model = Model::init(ModelConfig::default(), seed).map_err(|e| Failure(AcStatus::Runtime, e.to_string()))?;
        write_out(out, AcModel { model })
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ac_model_save(model: *const AcModel, path: *const c_char) -> AcStatus {
    guard(|| {
        let m = model_arg(model)?;
        let p = path_arg(path)?;
        m.save(&p).map_err(|e| Failure(AcStatus::Io, e.to_string()))
    })
}

/// Writes the patch grid size, patch width and layer count. Any output
/// pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_model_shape(
    model: *const AcModel,
    grid_h: *mut usize,
    grid_w: *mut usize,
    patch_dim: *mut usize,
    n_layers: *mut usize,
) -> AcStatus {
    guard(|| {
        let c = model_arg(model)?.config();
        for (ptr, v) in [(grid_h, c.grid_h), (grid_w, c.grid_w), (patch_dim, c.patch_dim), (n_layers, c.n_layers)] {
            if let Some(p) = ptr.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ac_model_free(model: *mut AcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Estimates a uniform calibration for every layer with the default
/// estimation input and prompt.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_uac_estimate(model: *const AcModel, out: *mut *mut AcCalibration) -> AcStatus {
    guard(|| {
        let m = model_arg(model)?;
        let matrix = calibrate(m, &UacConfig::default()).map_err(|e| Failure(AcStatus::Runtime, e.to_string()))?;
        let hooks = matrix.hooks(m).map_err(|e| Failure(AcStatus::Runtime, e.to_string()))?;
        write_out(
            out,
            AcCalibration {
                calib: Calibration::Uac(hooks),
                n_vision: m.n_vision(),
            },
        )
    })
}

/// Loads a saved calibration matrix for `model`.
///
/// # Safety
/// `model` must be a live handle, `path` a NUL-terminated string and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ac_uac_load(
    model: *const AcModel,
    path: *const c_char,
    out: *mut *mut AcCalibration,
) -> AcStatus {
    guard(|| {
        let m = model_arg(model)?;
        let p = path_arg(path)?;
        let matrix = CalibrationMatrix::load(&p).map_err(|e| load_failure(&p, e))?;
        let hooks = matrix.hooks(m).map_err(|e| Failure::arg(e.to_string()))?;
        write_out(
            out,
            AcCalibration {
                calib: Calibration::Uac(hooks),
                n_vision: m.n_vision(),
            },
        )
    })
}

/// Loads a trained dynamic calibration module for `model`.
///
/// # Safety
/// As for [`ac_uac_load`].
#[no_mangle]
pub unsafe extern "C" fn ac_dac_load(
    model: *const AcModel,
    path: *const c_char,
    out: *mut *mut AcCalibration,
) -> AcStatus {
    guard(|| {
        let m = model_arg(model)?;
        let p = path_arg(path)?;
        let dac = DacModule::load(&p).map_err(|e| load_failure(&p, e))?;
        if dac.n_vision() != m.n_vision() {
            return Err(Failure::arg(format!(
                "module expects {} vision tokens, model has {}",
                dac.n_vision(),
                m.n_vision()
            )));
        }
        if let Some(&l) = dac.spec().layers.iter().find(|&&l| l >= m.config().n_layers) {
            return Err(Failure::arg(format!("module hooks layer {l}, model has {}", m.config().n_layers)));
        }
        write_out(
            out,
            AcCalibration {
                calib: Calibration::Dac(dac),
                n_vision: m.n_vision(),
            },
        )
    })
}

/// # Safety
/// `calib` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ac_calibration_free(calib: *mut AcCalibration) {
    if !calib.is_null() {
        drop(Box::from_raw(calib));
    }
}

/// Blank-image attention probe at one layer with the default input and
/// prompt. Writes the `grid_h * grid_w` raster heatmap (summing to 1) into
/// `heatmap` and its KL divergence from uniform into `kl`. `calib` may be
/// null; `heatmap` may be null when `heatmap_len` is 0.
///
/// # Safety
/// Handles must be live; `heatmap` must hold `heatmap_len` doubles and `kl`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_probe(
    model: *const AcModel,
    calib: *const AcCalibration,
    layer: usize,
    heatmap: *mut f64,
    heatmap_len: usize,
    kl: *mut f64,
) -> AcStatus {
    guard(|| {
        let m = model_arg(model)?;
        let c = calib_arg(calib, m)?;
        if kl.is_null() {
            return Err(Failure::null("kl"));
        }
        let n = m.n_vision();
        if heatmap_len != 0 && heatmap_len != n {
            return Err(Failure::arg(format!("heatmap holds {heatmap_len} values, grid has {n}")));
        }
        if heatmap_len != 0 && heatmap.is_null() {
            return Err(Failure::null("heatmap"));
        }
        if layer >= m.config().n_layers {
            return Err(Failure::arg(format!("layer {layer} out of range")));
        }
        let cfg = ProbeConfig::default();
        let calib = c.unwrap_or(&Calibration::None);
        let report = calib
            .with_registry(|reg| {
                Ok(measure_spb(m, reg, &ProbeInput::Blank(cfg.input), cfg.prompt, &[layer], cfg.hot_quadrant, cfg.seed)?)
            })
            .map_err(|e| Failure(AcStatus::Runtime, e.to_string()))?;
        let l = &report.layers[0];
        *kl = l.kl;
        if heatmap_len != 0 {
            std::slice::from_raw_parts_mut(heatmap, n).copy_from_slice(&l.heatmap);
        }
        Ok(())
    })
}

/// Asks "is there a <class> ?" about a patch image and greedily decodes the
/// answer. `patches` is the row-major `[grid_h * grid_w, patch_dim]` image.
///
/// # Safety
/// Handles must be live; `patches` must hold `patches_len` doubles and
/// `answer` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ac_poll(
    model: *const AcModel,
    calib: *const AcCalibration,
    patches: *const f64,
    patches_len: usize,
    class: usize,
    answer: *mut AcAnswer,
) -> AcStatus {
    guard(|| {
        let m = model_arg(model)?;
        let c = calib_arg(calib, m)?;
        if patches.is_null() {
            return Err(Failure::null("patches"));
        }
        if answer.is_null() {
            return Err(Failure::null("answer"));
        }
        let cfg = m.config();
        let (n, d) = (m.n_vision(), cfg.patch_dim);
        if patches_len != n * d {
            return Err(Failure::arg(format!("expected {} patch values, got {patches_len}", n * d)));
        }
        let v = m.vocab();
        if class >= OBJECTS.len() {
            return Err(Failure::arg(format!("object class {class} out of range")));
        }
        let data = std::slice::from_raw_parts(patches, patches_len).to_vec();
        let image = Tensor::matrix(n, d, data).map_err(|e| Failure::arg(e.to_string()))?;
        let seq = TokenSequence::prompt(image, Query::Existence { class }.prompt(v));
        let calib = c.unwrap_or(&Calibration::None);
        let g = calib
            .with_registry(|reg| Ok(m.generate(&seq, reg, Decoding::Greedy, 1, 0, &RecordSpec::none())?))
            .map_err(|e| Failure(AcStatus::Runtime, e.to_string()))?;
        *answer = match parse_answer(&g.tokens, v) {
            Some(true) => AcAnswer::Yes,
            Some(false) => AcAnswer::No,
            None => AcAnswer::Unparsed,
        };
        Ok(())
    })
}
