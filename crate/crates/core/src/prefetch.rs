//! Cache hints and non-temporal stores. No-ops off x86_64.

const LINE: usize = 64;

#[inline(always)]
pub(crate) fn l1<T>(p: *const T) {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: prefetch never dereferences; any address is allowed.
    unsafe {
        core::arch::x86_64::_mm_prefetch::<{ core::arch::x86_64::_MM_HINT_T0 }>(p as *const i8)
    };
    #[cfg(not(target_arch = "x86_64"))]
    let _ = p;
}

#[inline(always)]
pub(crate) fn l2<T>(p: *const T) {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: as above.
    unsafe {
        core::arch::x86_64::_mm_prefetch::<{ core::arch::x86_64::_MM_HINT_T1 }>(p as *const i8)
    };
    #[cfg(not(target_arch = "x86_64"))]
    let _ = p;
}

/// Issues L2 hints for the first `bytes` of a region, one per cache line, at most `max_lines`.
#[inline]
pub(crate) fn l2_region<T>(p: *const T, bytes: usize, max_lines: usize) {
    let p = p as *const u8;
    for line in 0..bytes.div_ceil(LINE).min(max_lines) {
        l2(p.wrapping_add(line * LINE));
    }
}

#[inline]
pub(crate) fn l1_region<T>(p: *const T, bytes: usize) {
    let p = p as *const u8;
    for line in 0..bytes.div_ceil(LINE) {
        l1(p.wrapping_add(line * LINE));
    }
}

/// Non-temporal store of one 32-bit value.
///
/// # Safety
/// `dst` must be valid for a 4-byte write.
#[inline(always)]
pub(crate) unsafe fn stream_u32(dst: *mut u32, v: u32) {
    #[cfg(target_arch = "x86_64")]
    core::arch::x86_64::_mm_stream_si32(dst as *mut i32, v as i32);
    #[cfg(not(target_arch = "x86_64"))]
    dst.write_unaligned(v);
}

#[inline(always)]
pub(crate) fn store_fence() {
    #[cfg(target_arch = "x86_64")]
    // SAFETY: sfence has no memory operands.
    unsafe {
        core::arch::x86_64::_mm_sfence()
    };
}
