use core::sync::atomic::{AtomicU8, Ordering};

/// Instruction-set level a kernel body is compiled for. Every level performs
/// the same multiplies and adds in the same order, so results are bitwise
/// identical across levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Isa {
    Portable,
    Avx2,
    Avx512,
}

static DETECTED: AtomicU8 = AtomicU8::new(0);

impl Isa {
    /// Best level supported by the running CPU and OS.
    pub fn detect() -> Isa {
        match DETECTED.load(Ordering::Relaxed) {
            1 => Isa::Portable,
            2 => Isa::Avx2,
            3 => Isa::Avx512,
            _ => {
                let isa = probe();
                DETECTED.store(isa as u8 + 1, Ordering::Relaxed);
                isa
            }
        }
    }

    pub fn is_supported(self) -> bool {
        self <= Isa::detect()
    }

    /// All levels usable on this machine, lowest first.
    pub fn available() -> impl Iterator<Item = Isa> {
        [Isa::Portable, Isa::Avx2, Isa::Avx512].into_iter().filter(|isa| isa.is_supported())
    }
}

#[cfg(target_arch = "x86_64")]
#[allow(unused_unsafe)]
fn probe() -> Isa {
    use core::arch::x86_64::{__cpuid, __cpuid_count};

    #[target_feature(enable = "xsave")]
    unsafe fn xcr0() -> u64 {
        core::arch::x86_64::_xgetbv(0)
    }

    // SAFETY: cpuid is available on every x86_64 CPU.
    let leaf1 = unsafe { __cpuid(1) };
    let osxsave = leaf1.ecx & (1 << 27) != 0;
    let avx = leaf1.ecx & (1 << 28) != 0;
    if !(osxsave && avx) || unsafe { __cpuid(0) }.eax < 7 {
        return Isa::Portable;
    }
    // SAFETY: OSXSAVE is set, so xgetbv is enabled.
    let xcr0 = unsafe { xcr0() };
    let leaf7 = unsafe { __cpuid_count(7, 0) };
    let ymm_state = xcr0 & 0x6 == 0x6;
    let zmm_state = xcr0 & 0xe6 == 0xe6;
    let avx2 = leaf7.ebx & (1 << 5) != 0;
    let avx512f = leaf7.ebx & (1 << 16) != 0;
    if avx512f && avx2 && zmm_state {
        Isa::Avx512
    } else if avx2 && ymm_state {
        Isa::Avx2
    } else {
        Isa::Portable
    }
}

#[cfg(not(target_arch = "x86_64"))]
fn probe() -> Isa {
    Isa::Portable
}
