//! C interface: lens systems live behind opaque handles, every call returns a
//! status code and the message of the most recent failure on the calling
//! thread is available from `lensopt_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lensopt::coherent_psf::{psf_three_channel, PsfGridSpec, PsfSettings};
use lensopt::optical_losses::{DesignSpec, EvaluatorSettings, OpticalEvaluator};
use lensopt::optimizer::{optimize, OptimizeError, OptimizerConfig};
use lensopt::prescription::{emit_prescription, parse_prescription};
use lensopt::system::LensSystem;
use lensopt::trace::{FieldSpec, TraceContext};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LensoptStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidText = 2,
    Parse = 3,
    Numerical = 4,
    InvalidArgument = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque lens system.
pub struct LensoptSystem {
    system: LensSystem,
}

/// Loss terms of a system against its design targets.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LensoptLosses {
    pub spot: f64,
    pub ttl: f64,
    pub effl: f64,
    pub gap: f64,
    pub dist: f64,
    pub optic: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

struct Failure(LensoptStatus, String);

fn fail<E: std::fmt::Display>(status: LensoptStatus) -> impl FnOnce(E) -> Failure {
    move |e| Failure(status, e.to_string())
}

/// Runs `body`, turning failures and panics into status codes.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> LensoptStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => LensoptStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LensoptStatus::Panic
        }
    }
}

unsafe fn handle<'a>(sys: *const LensoptSystem) -> Result<&'a LensSystem, Failure> {
    sys.as_ref()
        .map(|s| &s.system)
        .ok_or_else(|| Failure(LensoptStatus::NullArgument, "null system handle".into()))
}

unsafe fn output<'a, T>(out: *mut T) -> Result<&'a mut T, Failure> {
    out.as_mut()
        .ok_or_else(|| Failure(LensoptStatus::NullArgument, "null output pointer".into()))
}

fn boxed(system: LensSystem) -> *mut LensoptSystem {
    Box::into_raw(Box::new(LensoptSystem { system }))
}

fn design(system: &LensSystem) -> Result<DesignSpec, Failure> {
    match system.design {
        Some(d) => Ok(d),
        None => DesignSpec::from_system(system).map_err(fail(LensoptStatus::Numerical)),
    }
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lensopt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parses a prescription from nul-terminated UTF-8 text.
///
/// # Safety
/// `text` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lensopt_system_parse(text: *const c_char, out: *mut *mut LensoptSystem) -> LensoptStatus {
    guard(|| {
        let out = output(out)?;
        *out = ptr::null_mut();
        if text.is_null() {
            return Err(Failure(LensoptStatus::NullArgument, "null text".into()));
        }
        let text = CStr::from_ptr(text).to_str().map_err(fail(LensoptStatus::InvalidText))?;
        let system = parse_prescription(text).map_err(fail(LensoptStatus::Parse))?;
        *out = boxed(system);
        Ok(())
    })
}

/// # Safety
/// `sys` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn lensopt_system_free(sys: *mut LensoptSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// # Safety
/// `sys` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lensopt_system_surface_count(sys: *const LensoptSystem, out: *mut usize) -> LensoptStatus {
    guard(|| {
        *output(out)? = handle(sys)?.surfaces.len();
        Ok(())
    })
}

/// # Safety
/// `sys` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lensopt_system_wavelength_count(sys: *const LensoptSystem, out: *mut usize) -> LensoptStatus {
    guard(|| {
        *output(out)? = handle(sys)?.wavelengths.len();
        Ok(())
    })
}

/// Paraxial effective focal length at the reference wavelength, mm.
///
/// # Safety
/// `sys` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lensopt_system_effl(sys: *const LensoptSystem, out: *mut f64) -> LensoptStatus {
    guard(|| {
        *output(out)? = handle(sys)?.effl().map_err(fail(LensoptStatus::Numerical))?;
        Ok(())
    })
}

/// Total track length from the first surface to the image plane, mm.
///
/// # Safety
/// `sys` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lensopt_system_ttl(sys: *const LensoptSystem, out: *mut f64) -> LensoptStatus {
    guard(|| {
        *output(out)? = handle(sys)?.ttl();
        Ok(())
    })
}

/// Writes the prescription text; release it with `lensopt_string_free`.
///
/// # Safety
/// `sys` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lensopt_system_emit(sys: *const LensoptSystem, out: *mut *mut c_char) -> LensoptStatus {
    guard(|| {
        let out = output(out)?;
        let text = emit_prescription(handle(sys)?);
        *out = CString::new(text).map_err(fail(LensoptStatus::InvalidText))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn lensopt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loss terms over the design fields with a `pupil`×`pupil` sampling grid.
///
/// # Safety
/// `sys` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lensopt_system_losses(
    sys: *const LensoptSystem,
    pupil: usize,
    out: *mut LensoptLosses,
) -> LensoptStatus {
    guard(|| {
        let out = output(out)?;
        let system = handle(sys)?;
        let settings = EvaluatorSettings { pupil, ..EvaluatorSettings::default() };
        let ev = OpticalEvaluator::new(system, design(system)?, settings).map_err(fail(LensoptStatus::Numerical))?;
        let (t, _) = ev.evaluate_f64(&system.params()).map_err(fail(LensoptStatus::Numerical))?;
        *out = LensoptLosses { spot: t.spot, ttl: t.ttl, effl: t.effl, gap: t.gap, dist: t.dist, optic: t.optic };
        Ok(())
    })
}

/// Normalized PSF of every wavelength on a `side`×`side` grid centred on the
/// reference chief ray. `buffer` receives the channels one after another,
/// each row-major with rows along y, and must hold `len` ≥ wavelengths·side²
/// values.
///
/// # Safety
/// `sys` must be a live handle and `buffer` writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn lensopt_system_psf(
    sys: *const LensoptSystem,
    field_deg: f64,
    azimuth_deg: f64,
    side: usize,
    pitch_um: f64,
    pupil: usize,
    buffer: *mut f64,
    len: usize,
) -> LensoptStatus {
    guard(|| {
        let system = handle(sys)?;
        if buffer.is_null() {
            return Err(Failure(LensoptStatus::NullArgument, "null buffer".into()));
        }
        if side % 2 == 0 || !(pitch_um > 0.0) || pupil < 2 {
            return Err(Failure(
                LensoptStatus::InvalidArgument,
                "side must be odd, pitch positive and pupil at least 2".into(),
            ));
        }
        let need = system.wavelengths.len() * side * side;
        if len < need {
            return Err(Failure(LensoptStatus::BufferTooSmall, format!("buffer holds {len} values, {need} needed")));
        }
        let ctx = TraceContext::new(system).map_err(fail(LensoptStatus::Numerical))?;
        let settings = PsfSettings { grid: PsfGridSpec { side, pitch: pitch_um * 1e-3 }, pupil };
        let field = FieldSpec { angle: field_deg, azimuth: azimuth_deg };
        let psf = psf_three_channel(&ctx, &system.params(), &field, &settings).map_err(fail(LensoptStatus::Numerical))?;
        let dst = std::slice::from_raw_parts_mut(buffer, need);
        for (chunk, ch) in dst.chunks_mut(side * side).zip(&psf.channels) {
            chunk.copy_from_slice(ch);
        }
        Ok(())
    })
}

/// Runs `steps` optimizer steps at base rate `rate` against the system's
/// design targets and returns the result as a new handle.
///
/// # Safety
/// `sys` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lensopt_system_optimize(
    sys: *const LensoptSystem,
    steps: usize,
    rate: f64,
    out: *mut *mut LensoptSystem,
) -> LensoptStatus {
    guard(|| {
        let out = output(out)?;
        *out = ptr::null_mut();
        let system = handle(sys)?;
        let config = OptimizerConfig { steps, rate, ..OptimizerConfig::default() };
        let result = optimize(system, design(system)?, &config, None).map_err(|e| match e {
            OptimizeError::Config(_) | OptimizeError::NothingToTrain => Failure(LensoptStatus::InvalidArgument, e.to_string()),
            _ => Failure(LensoptStatus::Numerical, e.to_string()),
        })?;
        *out = boxed(result.system);
        Ok(())
    })
}
