//! C ABI over the hegemony library.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `*_new`/`*_load`/`*_keygen` function and released by the matching
//! `*_free`. Every fallible function returns an [`HgStatus`]; on failure,
//! [`hg_last_error`] describes what went wrong on the calling thread.
//! Strings returned to the caller are owned by it and go back through
//! [`hg_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use hegemony::ckks::{CkksBackend, CkksParams, CkksSecretKey};
use hegemony::enc_tensor::Image;
use hegemony::fedsim::{self, FedConfig, FedError, StubProvider};
use hegemony::he::sim::{SimBackend, SimDecryptor};
use hegemony::he::{HeDecryptor, HeError};
use hegemony::model::{self, Architecture, ModelError, ModelSpec};
use hegemony::paillier::{self, PaillierCiphertext, PaillierError, PaillierPublicKey, PaillierSecretKey};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    CryptoFailure = 3,
    BudgetExhausted = 4,
    Io = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Which homomorphic backend a session evaluates with.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HgBackend {
    /// Plaintext simulator with exact arithmetic and level accounting.
    Sim = 0,
    /// RLWE approximate-arithmetic scheme.
    Ckks = 1,
}

pub struct HgPaillierPublicKey(PaillierPublicKey);
pub struct HgPaillierSecretKey(PaillierSecretKey);
pub struct HgPaillierCiphertext(PaillierCiphertext);
pub struct HgModel(ModelSpec);

/// Keys for encrypted inference. Holds the secret key, so it belongs to the
/// data owner.
pub struct HgSession(Session);

enum Session {
    Sim(SimBackend),
    Ckks(Box<CkksBackend>, CkksSecretKey),
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(HgStatus, String);

type FfiResult<T> = Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(HgStatus::InvalidArgument, msg.into())
}

impl From<PaillierError> for Failure {
    fn from(e: PaillierError) -> Self {
        Failure(HgStatus::CryptoFailure, e.to_string())
    }
}

impl From<HeError> for Failure {
    fn from(e: HeError) -> Self {
        let status = match e {
            HeError::BudgetExhausted { .. } => HgStatus::BudgetExhausted,
            HeError::InvalidParameters(_) | HeError::TooManyValues { .. } | HeError::UnsupportedDegree(_) => {
                HgStatus::InvalidArgument
            }
            _ => HgStatus::CryptoFailure,
        };
        Failure(status, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match (&e, e.he_error()) {
            (_, Some(HeError::BudgetExhausted { .. })) => HgStatus::BudgetExhausted,
            (_, Some(_)) => HgStatus::CryptoFailure,
            (ModelError::Io(_), None) => HgStatus::Io,
            _ => HgStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<FedError> for Failure {
    fn from(e: FedError) -> Self {
        let status = match e {
            FedError::Config(_) => HgStatus::InvalidArgument,
            FedError::Io(_) => HgStatus::Io,
            _ => HgStatus::CryptoFailure,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Run `f`, recording any failure or panic for `hg_last_error`.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> HgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HgStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HgStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| Failure(HgStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| Failure(HgStatus::NullPointer, format!("{what} is null")))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure(HgStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn to_c_string(s: String) -> FfiResult<*mut c_char> {
    CString::new(s).map(CString::into_raw).map_err(|_| invalid("string contains NUL"))
}

fn rng(seed: u64, seeded: bool) -> ChaCha20Rng {
    if seeded {
        ChaCha20Rng::seed_from_u64(seed)
    } else {
        ChaCha20Rng::from_entropy()
    }
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Description of the last failure on this thread, or null. Valid until
/// the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn hg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---- Paillier ----

/// Generate a keypair with a `key_bits`-bit modulus. With `seeded`, the
/// key is reproducible from `seed` and therefore not secret.
///
/// # Safety
/// `pk_out` and `sk_out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hg_paillier_keygen(
    key_bits: u32,
    seed: u64,
    seeded: bool,
    pk_out: *mut *mut HgPaillierPublicKey,
    sk_out: *mut *mut HgPaillierSecretKey,
) -> HgStatus {
    guard(|| {
        let pk_out = out_ptr(pk_out, "pk_out")?;
        let sk_out = out_ptr(sk_out, "sk_out")?;
        if key_bits % 2 != 0 {
            return Err(invalid(format!("key size {key_bits} is odd")));
        }
        let (pk, sk) = paillier::keygen(key_bits as u64 / 2, &mut rng(seed, seeded))?;
        *pk_out = boxed(HgPaillierPublicKey(pk));
        *sk_out = boxed(HgPaillierSecretKey(sk));
        Ok(())
    })
}

/// # Safety
/// `pk` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn hg_paillier_public_key_free(pk: *mut HgPaillierPublicKey) {
    free(pk)
}

/// # Safety
/// `sk` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn hg_paillier_secret_key_free(sk: *mut HgPaillierSecretKey) {
    free(sk)
}

/// # Safety
/// `c` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn hg_paillier_ciphertext_free(c: *mut HgPaillierCiphertext) {
    free(c)
}

/// Public key as JSON; free with `hg_string_free`.
///
/// # Safety
/// `pk` must be a live handle; `json_out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hg_paillier_public_key_to_json(
    pk: *const HgPaillierPublicKey,
    json_out: *mut *mut c_char,
) -> HgStatus {
    guard(|| {
        let pk = deref(pk, "pk")?;
        *out_ptr(json_out, "json_out")? = to_c_string(pk.0.to_json())?;
        Ok(())
    })
}

/// # Safety
/// `json` must be a NUL-terminated string; `pk_out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hg_paillier_public_key_from_json(
    json: *const c_char,
    pk_out: *mut *mut HgPaillierPublicKey,
) -> HgStatus {
    guard(|| {
        let pk = PaillierPublicKey::from_json(c_str(json, "json")?)?;
        *out_ptr(pk_out, "pk_out")? = boxed(HgPaillierPublicKey(pk));
        Ok(())
    })
}

/// Encrypt `m` with fresh randomness from the OS.
///
/// # Safety
/// `pk` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hg_paillier_encrypt(
    pk: *const HgPaillierPublicKey,
    m: u64,
    out: *mut *mut HgPaillierCiphertext,
) -> HgStatus {
    guard(|| {
        let pk = deref(pk, "pk")?;
        let c = pk.0.encrypt(&m.into(), &mut ChaCha20Rng::from_entropy())?;
        *out_ptr(out, "out")? = boxed(HgPaillierCiphertext(c));
        Ok(())
    })
}

/// Ciphertext of the sum of the two plaintexts.
///
/// # Safety
/// All handles must be live; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hg_paillier_add(
    pk: *const HgPaillierPublicKey,
    a: *const HgPaillierCiphertext,
    b: *const HgPaillierCiphertext,
    out: *mut *mut HgPaillierCiphertext,
) -> HgStatus {
    guard(|| {
        let c = deref(pk, "pk")?.0.add(&deref(a, "a")?.0, &deref(b, "b")?.0)?;
        *out_ptr(out, "out")? = boxed(HgPaillierCiphertext(c));
        Ok(())
    })
}

/// Ciphertext of `k` times the plaintext.
///
/// # Safety
/// All handles must be live; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hg_paillier_scalar_mul(
    pk: *const HgPaillierPublicKey,
    c: *const HgPaillierCiphertext,
    k: u64,
    out: *mut *mut HgPaillierCiphertext,
) -> HgStatus {
    guard(|| {
        let r = deref(pk, "pk")?.0.scalar_mul(&deref(c, "c")?.0, &k.into())?;
        *out_ptr(out, "out")? = boxed(HgPaillierCiphertext(r));
        Ok(())
    })
}

/// Decrypt into a u64; fails with `INVALID_ARGUMENT` if the plaintext is wider.
///
/// # Safety
/// All handles must be live; `m_out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hg_paillier_decrypt(
    pk: *const HgPaillierPublicKey,
    sk: *const HgPaillierSecretKey,
    c: *const HgPaillierCiphertext,
    m_out: *mut u64,
) -> HgStatus {
    guard(|| {
        let m = deref(sk, "sk")?.0.decrypt(&deref(pk, "pk")?.0, &deref(c, "c")?.0)?;
        let digits = m.to_u64_digits();
        if digits.len() > 1 {
            return Err(invalid("plaintext does not fit in 64 bits"));
        }
        *out_ptr(m_out, "m_out")? = digits.first().copied().unwrap_or(0);
        Ok(())
    })
}

// ---- models and encrypted inference ----

/// Load a model from a weights file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hg_model_load(path: *const c_char, out: *mut *mut HgModel) -> HgStatus {
    guard(|| {
        let spec = model::load_weights(Path::new(c_str(path, "path")?))?;
        spec.validate()?;
        *out_ptr(out, "out")? = boxed(HgModel(spec));
        Ok(())
    })
}

/// Seeded random-weight model with `conv_layers` convolution blocks on
/// `size`x`size` grayscale input.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hg_model_random(conv_layers: usize, size: usize, seed: u64, out: *mut *mut HgModel) -> HgStatus {
    guard(|| {
        if conv_layers == 0 || size == 0 {
            return Err(invalid("need at least one layer and a nonempty image"));
        }
        let spec = Architecture::standard(conv_layers, size).random_spec(seed);
        spec.validate()?;
        *out_ptr(out, "out")? = boxed(HgModel(spec));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn hg_model_free(m: *mut HgModel) {
    free(m)
}

/// Number of input values (height x width x channels), or 0 for null.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hg_model_input_len(m: *const HgModel) -> usize {
    m.as_ref().map_or(0, |m| {
        let (h, w, c) = m.0.input_shape;
        h * w * c
    })
}

/// Number of logits, or 0 for null.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hg_model_classes(m: *const HgModel) -> usize {
    m.as_ref().and_then(|m| m.0.validate().ok()).unwrap_or(0)
}

/// Multiplicative levels one inference consumes, or 0 for null.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hg_model_depth(m: *const HgModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.depth_required())
}

unsafe fn input_image(m: &ModelSpec, pixels: *const f64, len: usize) -> FfiResult<Image> {
    let (h, w, c) = m.input_shape;
    if len != h * w * c {
        return Err(invalid(format!("{len} input values for a {h}x{w}x{c} model")));
    }
    if pixels.is_null() {
        return Err(Failure(HgStatus::NullPointer, "pixels is null".into()));
    }
    Ok(Image::new(h, w, c, std::slice::from_raw_parts(pixels, len).to_vec())?)
}

unsafe fn write_logits(logits: &[f64], out: *mut f64, cap: usize, written: *mut usize) -> FfiResult<()> {
    *out_ptr(written, "written")? = logits.len();
    if cap < logits.len() {
        return Err(Failure(HgStatus::BufferTooSmall, format!("need room for {} logits", logits.len())));
    }
    if out.is_null() {
        return Err(Failure(HgStatus::NullPointer, "logits_out is null".into()));
    }
    std::slice::from_raw_parts_mut(out, logits.len()).copy_from_slice(logits);
    Ok(())
}

/// Plaintext reference inference. Pixels are row-major, channels last.
/// `written` receives the logit count even when the buffer is too small.
///
/// # Safety
/// `pixels` must hold `len` values; `logits_out` must hold `cap`.
#[no_mangle]
pub unsafe extern "C" fn hg_model_infer_plain(
    m: *const HgModel,
    pixels: *const f64,
    len: usize,
    logits_out: *mut f64,
    cap: usize,
    written: *mut usize,
) -> HgStatus {
    guard(|| {
        let m = &deref(m, "model")?.0;
        let logits = m.infer_plain(&input_image(m, pixels, len)?)?;
        write_logits(&logits, logits_out, cap, written)
    })
}

/// Keys sized for `m`: its depth as the level budget and its rotations.
/// `ring_degree` is ignored by the simulator except to set the slot count.
///
/// # Safety
/// `m` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hg_session_new(
    m: *const HgModel,
    backend: HgBackend,
    ring_degree: usize,
    seed: u64,
    seeded: bool,
    out: *mut *mut HgSession,
) -> HgStatus {
    guard(|| {
        let m = &deref(m, "model")?.0;
        let levels = m.depth_required();
        let session = match backend {
            HgBackend::Sim => Session::Sim(SimBackend::new(ring_degree / 2, levels)?),
            HgBackend::Ckks => {
                let steps: Vec<usize> = m.rotation_steps(ring_degree / 2)?.into_iter().collect();
                let params = CkksParams { ring_degree, levels, ..CkksParams::default() };
                let (be, sk) = CkksBackend::setup(params, &steps, &mut rng(seed, seeded))?;
                Session::Ckks(Box::new(be), sk)
            }
        };
        *out_ptr(out, "out")? = boxed(HgSession(session));
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn hg_session_free(s: *mut HgSession) {
    free(s)
}

/// Encrypt the input, evaluate the model homomorphically and decrypt the
/// logits. `written` receives the logit count even when the buffer is too
/// small.
///
/// # Safety
/// Handles must be live; `pixels` must hold `len` values; `logits_out` must hold `cap`.
#[no_mangle]
pub unsafe extern "C" fn hg_session_infer(
    s: *const HgSession,
    m: *const HgModel,
    pixels: *const f64,
    len: usize,
    logits_out: *mut f64,
    cap: usize,
    written: *mut usize,
) -> HgStatus {
    guard(|| {
        let s = deref(s, "session")?;
        let m = &deref(m, "model")?.0;
        let image = input_image(m, pixels, len)?;
        let classes = m.validate()?;
        let values = match &s.0 {
            Session::Sim(be) => {
                let y = m.infer_encrypted(&m.encode_image_rows(&image, be)?, be)?;
                SimDecryptor.decrypt_vec(be, &y)?
            }
            Session::Ckks(be, sk) => {
                let y = m.infer_encrypted(&m.encode_image_rows(&image, &**be)?, &**be)?;
                sk.decrypt_vec(be, &y)?
            }
        };
        write_logits(&model::read_logits(&values, classes), logits_out, cap, written)
    })
}

// ---- federated averaging ----

/// Run an in-process federated-averaging simulation with synthetic client
/// updates. `config_json` holds the simulation settings (any omitted field
/// keeps its default). On success `transcript_out` receives one JSON line
/// per phase per round; free it with `hg_string_free`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `transcript_out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn hg_fedsim_run(config_json: *const c_char, transcript_out: *mut *mut c_char) -> HgStatus {
    guard(|| {
        let config = parse_config(c_str(config_json, "config_json")?)?;
        let t = fedsim::run_simulation(&config, std::sync::Arc::new(StubProvider::new(&config)))?;
        *out_ptr(transcript_out, "transcript_out")? = to_c_string(t.to_json_lines())?;
        Ok(())
    })
}

fn parse_config(text: &str) -> FfiResult<FedConfig> {
    let given: serde_json::Value = serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
    let serde_json::Value::Object(given) = given else {
        return Err(invalid("config must be a JSON object"));
    };
    let mut config = serde_json::to_value(FedConfig::default()).expect("config serializes");
    config.as_object_mut().expect("object").extend(given);
    let config: FedConfig = serde_json::from_value(config).map_err(|e| invalid(format!("config: {e}")))?;
    config.validate()?;
    Ok(config)
}
