//! x86-64 virtual address constants and helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAGE_4K: u64 = 1 << 12;
pub const PAGE_2M: u64 = 1 << 21;
pub const PAGE_1G: u64 = 1 << 30;
pub const PML4_SPAN: u64 = 1 << 39;

/// Linux kernel text randomization range (512 slots of 2 MiB).
pub const KERNEL_TEXT_START: u64 = 0xffff_ffff_8000_0000;
pub const KERNEL_TEXT_END: u64 = 0xffff_ffff_c000_0000;
pub const KERNEL_TEXT_SLOTS: u64 = (KERNEL_TEXT_END - KERNEL_TEXT_START) / PAGE_2M;
/// Base of a kernel booted with `nokaslr`.
pub const KERNEL_NOKASLR_BASE: u64 = 0xffff_ffff_8100_0000;

/// Linux module area (16384 slots of 4 KiB).
pub const MODULES_START: u64 = 0xffff_ffff_c000_0000;
pub const MODULES_END: u64 = 0xffff_ffff_c400_0000;
pub const MODULE_SLOTS: u64 = (MODULES_END - MODULES_START) / PAGE_4K;

/// Windows kernel/driver range (262144 slots of 2 MiB).
pub const WINDOWS_START: u64 = 0xffff_f800_0000_0000;
pub const WINDOWS_END: u64 = 0xffff_f880_0000_0000;
pub const WINDOWS_SLOTS: u64 = (WINDOWS_END - WINDOWS_START) / PAGE_2M;

/// User-space randomization bases (`0x55XXXXXXX000`, `0x7fXXXXXXX000`).
pub const USER_CODE_BASE: u64 = 0x5500_0000_0000;
pub const USER_LIB_BASE: u64 = 0x7f00_0000_0000;

/// First kernel-half address; everything at or above is supervisor space.
pub const KERNEL_HALF: u64 = 0xffff_8000_0000_0000;

pub fn is_canonical(addr: u64) -> bool {
    let top = addr >> 47;
    top == 0 || top == 0x1_ffff
}

pub fn check_canonical(addr: u64) -> Result<u64> {
    if is_canonical(addr) {
        Ok(addr)
    } else {
        Err(Error::NonCanonical(addr))
    }
}

pub fn is_kernel(addr: u64) -> bool {
    addr >= KERNEL_HALF
}

pub fn align_down(addr: u64, size: u64) -> u64 {
    addr & !(size - 1)
}

/// Paging-structure level at which a walk terminates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Pt,
    Pd,
    Pdpt,
    Pml4,
}

impl Level {
    /// Bytes covered by one entry at this level.
    pub fn span(self) -> u64 {
        match self {
            Level::Pt => PAGE_4K,
            Level::Pd => PAGE_2M,
            Level::Pdpt => PAGE_1G,
            Level::Pml4 => PML4_SPAN,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Pt => "PT",
            Level::Pd => "PD",
            Level::Pdpt => "PDPT",
            Level::Pml4 => "PML4",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_boundaries() {
        assert!(is_canonical(0x0000_7fff_ffff_ffff));
        assert!(is_canonical(0xffff_8000_0000_0000));
        assert!(!is_canonical(0x0000_8000_0000_0000));
        assert!(!is_canonical(0xfff7_ffff_ffff_ffff));
        assert!(check_canonical(0x1234_5678_9abc_def0).is_err());
    }

    #[test]
    fn slot_counts() {
        assert_eq!(KERNEL_TEXT_SLOTS, 512);
        assert_eq!(MODULE_SLOTS, 16384);
        assert_eq!(WINDOWS_SLOTS, 262_144);
    }
}
