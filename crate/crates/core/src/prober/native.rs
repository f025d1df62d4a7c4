//! Hardware backend: AVX `vmaskmov` with an all-zero mask, timed with
//! `rdtscp` between `lfence` barriers on a pinned core.

use std::arch::x86_64::{
    __cpuid, __m256, __m256i, _mm256_maskload_ps, _mm256_maskstore_ps, _mm256_setzero_ps,
    _mm256_setzero_si256, _mm_lfence, __rdtscp,
};

use super::{Backend, Prober, Vendor};
use crate::addr;
use crate::error::{Error, Result};
use crate::sim::OpKind;
use crate::space::Perm;

const EVICTION_PAGES: usize = 1536 + 1536 / 4;
const PAGE: usize = 4096;

pub(super) fn check_cpu() -> Result<()> {
    if !std::arch::is_x86_feature_detected!("avx") {
        return Err(Error::Capability("CPU lacks AVX masked moves".into()));
    }
    let max_ext = __cpuid(0x8000_0000).eax;
    let invariant_tsc = max_ext >= 0x8000_0007 && __cpuid(0x8000_0007).edx & (1 << 8) != 0;
    if !invariant_tsc {
        return Err(Error::Capability("CPU lacks an invariant TSC".into()));
    }
    Ok(())
}

struct Mapping {
    ptr: *mut libc::c_void,
    len: usize,
}

impl Mapping {
    fn new(len: usize, prot: libc::c_int) -> Result<Mapping> {
        // SAFETY: anonymous private mapping with no address hint.
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                prot,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            return Err(Error::Backend(format!("mmap failed: {}", std::io::Error::last_os_error())));
        }
        Ok(Mapping { ptr, len })
    }
}

impl Drop for Mapping {
    fn drop(&mut self) {
        // SAFETY: unmapping a region this struct created.
        unsafe {
            libc::munmap(self.ptr, self.len);
        }
    }
}

/// [`super::Prober`] over the host CPU.
pub struct NativeProber {
    eviction: Mapping,
    pages: Vec<Mapping>,
    issued: u64,
}

impl NativeProber {
    /// Checks CPU support and the caller's explicit opt-in, then pins to the
    /// current core.
    pub fn new(opt_in: bool) -> Result<NativeProber> {
        if !opt_in {
            return Err(Error::Capability("native probing requires an explicit opt-in".into()));
        }
        check_cpu()?;
        pin_to_current_core()?;
        let eviction = Mapping::new(EVICTION_PAGES * PAGE, libc::PROT_READ | libc::PROT_WRITE)?;
        Ok(NativeProber {
            eviction,
            pages: Vec::new(),
            issued: 0,
        })
    }
}

fn pin_to_current_core() -> Result<()> {
    // SAFETY: plain libc calls on a zeroed cpu_set_t.
    unsafe {
        let cpu = libc::sched_getcpu();
        if cpu < 0 {
            return Err(Error::Backend("sched_getcpu failed".into()));
        }
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu as usize, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(Error::Backend("sched_setaffinity failed".into()));
        }
    }
    Ok(())
}

#[target_feature(enable = "avx")]
unsafe fn timed(addr: u64, kind: OpKind) -> u64 {
    let mask: __m256i = _mm256_setzero_si256();
    let p = addr as *mut f32;
    let mut aux = 0u32;
    _mm_lfence();
    let t0 = __rdtscp(&mut aux);
    _mm_lfence();
    match kind {
        OpKind::MaskedLoad => {
            let v: __m256 = _mm256_maskload_ps(p, mask);
            std::hint::black_box(v);
        }
        OpKind::MaskedStore => _mm256_maskstore_ps(p, mask, _mm256_setzero_ps()),
    }
    _mm_lfence();
    let t1 = __rdtscp(&mut aux);
    _mm_lfence();
    t1.saturating_sub(t0)
}

impl Prober for NativeProber {
    fn backend(&self) -> Backend {
        Backend::NativeHardware
    }

    fn vendor(&self) -> Vendor {
        // "AuthenticAMD" starts with "Auth" in EBX.
        if __cpuid(0).ebx == 0x6874_7541 {
            Vendor::Amd
        } else {
            Vendor::Intel
        }
    }

    fn probe(&mut self, addr: u64, kind: OpKind) -> Result<u64> {
        addr::check_canonical(addr)?;
        self.issued += 1;
        // SAFETY: an all-zero mask suppresses every memory access and fault.
        Ok(unsafe { timed(addr, kind) })
    }

    fn evict_tlb(&mut self) -> Result<()> {
        let base = self.eviction.ptr as *mut u8;
        for i in 0..EVICTION_PAGES {
            // SAFETY: within the eviction mapping.
            unsafe { std::ptr::write_volatile(base.add(i * PAGE), i as u8) };
        }
        Ok(())
    }

    fn alloc_calibration_page(&mut self, perm: Perm, dirty: bool) -> Result<u64> {
        let prot = match perm {
            Perm::None => libc::PROT_NONE,
            Perm::ReadOnly => libc::PROT_READ,
            Perm::ReadExec => libc::PROT_READ | libc::PROT_EXEC,
            Perm::ReadWrite => libc::PROT_READ | libc::PROT_WRITE,
        };
        let m = Mapping::new(PAGE, libc::PROT_READ | libc::PROT_WRITE)?;
        // SAFETY: the page is writable until the mprotect below.
        unsafe {
            std::ptr::write_volatile(m.ptr as *mut u8, 0);
            if perm == Perm::ReadWrite && !dirty {
                libc::madvise(m.ptr, PAGE, libc::MADV_DONTNEED);
                std::ptr::read_volatile(m.ptr as *const u8);
            }
            if libc::mprotect(m.ptr, PAGE, prot) != 0 {
                return Err(Error::Backend("mprotect failed".into()));
            }
        }
        let a = m.ptr as u64;
        self.pages.push(m);
        Ok(a)
    }

    fn probes_issued(&self) -> u64 {
        self.issued
    }
}
