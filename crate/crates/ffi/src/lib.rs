//! C ABI over the mvref core: RoPE scores, masks, view matching, identity
//! consistency and trajectory statistics.
//!
//! Every fallible function returns an [`MvrefStatus`]. On failure the message
//! is kept per thread and can be read with [`mvref_last_error`]. Objects are
//! passed as opaque handles that the caller frees with the matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use mvref::masking::{self, PoseAngles, RegionMask};
use mvref::metrics::{self, FaceEmbedding, ReferenceSet};
use mvref::rope::{self, RopeConfig, RopeCoordinate};
use mvref::trajectory;
use mvref::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MvrefStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    InvalidConfig = 4,
    ZeroEmbedding = 5,
    Internal = 99,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MvrefStatus {
    match e {
        Error::Shape { .. } => MvrefStatus::DimensionMismatch,
        Error::Config(_) => MvrefStatus::InvalidConfig,
        Error::ZeroEmbedding => MvrefStatus::ZeroEmbedding,
        Error::InvalidArgument(_) => MvrefStatus::InvalidArgument,
        _ => MvrefStatus::Internal,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), MvrefStatus>) -> MvrefStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MvrefStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            MvrefStatus::Internal
        }
    }
}

fn check<T>(r: mvref::Result<T>) -> Result<T, MvrefStatus> {
    r.map_err(|e| {
        set_error(format!("{}: {e}", e.code()));
        status_of(&e)
    })
}

fn nonnull<T>(p: *const T, what: &str) -> Result<(), MvrefStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        Err(MvrefStatus::NullPointer)
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], MvrefStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    nonnull(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length, 0 when none.
///
/// # Safety
/// `buf` must be null or writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mvref_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mvref_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque RoPE configuration.
pub struct MvrefRopeConfig(RopeConfig);

/// Creates a RoPE configuration. `base <= 0` keeps the default base.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvref_rope_config_new(
    head_dim: usize,
    grid_h: usize,
    grid_w: usize,
    num_refs: usize,
    base: f64,
    temporal_offset: u32,
    out: *mut *mut MvrefRopeConfig,
) -> MvrefStatus {
    guard(|| {
        nonnull(out, "out")?;
        let mut cfg = check(RopeConfig::new(head_dim, grid_h, grid_w, num_refs))?.with_temporal_offset(temporal_offset);
        if base > 0.0 {
            cfg = cfg.with_base(base);
        }
        check(cfg.validate())?;
        *out = Box::into_raw(Box::new(MvrefRopeConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from [`mvref_rope_config_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn mvref_rope_config_free(cfg: *mut MvrefRopeConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// RoPE attention score between `q` at `pos_i` and `k` at `pos_j`, each
/// position given as `(frame, row, col)`.
///
/// # Safety
/// `q` and `k` hold `dim` values, positions hold 3, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mvref_rope_score(
    cfg: *const MvrefRopeConfig,
    q: *const f64,
    k: *const f64,
    dim: usize,
    pos_i: *const u32,
    pos_j: *const u32,
    out: *mut f64,
) -> MvrefStatus {
    guard(|| {
        nonnull(cfg, "cfg")?;
        nonnull(out, "out")?;
        let q = slice(q, dim, "q")?;
        let k = slice(k, dim, "k")?;
        let pi = slice(pos_i, 3, "pos_i")?;
        let pj = slice(pos_j, 3, "pos_j")?;
        let ci = RopeCoordinate::new(pi[0], pi[1], pi[2]);
        let cj = RopeCoordinate::new(pj[0], pj[1], pj[2]);
        *out = check(rope::rope_attention_score(q, k, &ci, &cj, &(*cfg).0))?;
        Ok(())
    })
}

/// Opaque binary region mask.
pub struct MvrefRegionMask(RegionMask);

/// Seeded mask over an `height x width` grid with `round(ratio * N)` zeros.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvref_region_mask_generate(
    height: usize,
    width: usize,
    ratio: f64,
    seed: u64,
    out: *mut *mut MvrefRegionMask,
) -> MvrefStatus {
    guard(|| {
        nonnull(out, "out")?;
        let mask = check(masking::generate_region_mask(height, width, ratio, seed))?;
        *out = Box::into_raw(Box::new(MvrefRegionMask(mask)));
        Ok(())
    })
}

/// # Safety
/// `mask` must be null or a live mask handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn mvref_region_mask_free(mask: *mut MvrefRegionMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Number of masked (zero) cells, or 0 for a null handle.
///
/// # Safety
/// `mask` must be null or a live mask handle.
#[no_mangle]
pub unsafe extern "C" fn mvref_region_mask_zero_count(mask: *const MvrefRegionMask) -> usize {
    mask.as_ref().map_or(0, |m| m.0.zero_count())
}

/// Copies the row-major keep bits (1 keep, 0 masked) into `out`, which
/// holds `len = height * width` bytes.
///
/// # Safety
/// `mask` must be a live handle and `out` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mvref_region_mask_bits(mask: *const MvrefRegionMask, out: *mut u8, len: usize) -> MvrefStatus {
    guard(|| {
        nonnull(mask, "mask")?;
        nonnull(out, "out")?;
        let bits = &(*mask).0.bits;
        if bits.len() != len {
            set_error(format!("mask has {} cells, buffer has {len}", bits.len()));
            return Err(MvrefStatus::DimensionMismatch);
        }
        std::ptr::copy_nonoverlapping(bits.as_ptr(), out, len);
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MvrefPose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl From<MvrefPose> for PoseAngles {
    fn from(p: MvrefPose) -> Self {
        PoseAngles::new(p.yaw, p.pitch, p.roll)
    }
}

/// Index of the reference pose closest to `anchor`.
///
/// # Safety
/// `refs` holds `n` poses and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mvref_match_reference_view(
    anchor: MvrefPose,
    refs: *const MvrefPose,
    n: usize,
    out: *mut usize,
) -> MvrefStatus {
    guard(|| {
        nonnull(out, "out")?;
        let refs: Vec<PoseAngles> = slice(refs, n, "refs")?.iter().map(|&p| p.into()).collect();
        *out = check(masking::match_reference_view(&anchor.into(), &refs))?;
        Ok(())
    })
}

/// Identity consistency of one frame embedding against `k` reference
/// embeddings stored row-major in `refs` (`k * dim` values).
///
/// # Safety
/// `frame` holds `dim` values, `refs` holds `k * dim`, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mvref_mvrc_frame(
    frame: *const f64,
    refs: *const f64,
    k: usize,
    dim: usize,
    out: *mut f64,
) -> MvrefStatus {
    guard(|| {
        nonnull(out, "out")?;
        let f = check(FaceEmbedding::new(slice(frame, dim, "frame")?.to_vec(), "ffi"))?;
        let rows = slice(refs, k * dim, "refs")?;
        let set = check(
            rows.chunks(dim.max(1))
                .map(|r| FaceEmbedding::new(r.to_vec(), "ffi"))
                .collect::<mvref::Result<Vec<_>>>()
                .and_then(ReferenceSet::new),
        )?;
        *out = check(metrics::mvrc_frame(&f, &set))?;
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MvrefTrajectoryStats {
    pub dispersion: f64,
    pub smoothness: f64,
    pub max_jump: f64,
    pub collapse_segments: usize,
}

/// Statistics of the facial-direction trajectory of `n` poses (degrees).
///
/// # Safety
/// `poses` holds `n` poses and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mvref_trajectory_stats(
    poses: *const MvrefPose,
    n: usize,
    cone_deg: f64,
    min_run: usize,
    out: *mut MvrefTrajectoryStats,
) -> MvrefStatus {
    guard(|| {
        nonnull(out, "out")?;
        let poses: Vec<PoseAngles> = slice(poses, n, "poses")?.iter().map(|&p| p.into()).collect();
        let points = check(trajectory::build_trajectory(&poses))?;
        let s = check(trajectory::trajectory_stats(&points, cone_deg, min_run))?;
        *out = MvrefTrajectoryStats {
            dispersion: s.dispersion,
            smoothness: s.smoothness,
            max_jump: s.max_jump,
            collapse_segments: s.collapse_segments.len(),
        };
        Ok(())
    })
}
