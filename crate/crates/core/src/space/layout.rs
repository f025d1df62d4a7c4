use rand::seq::SliceRandom;

use crate::addr::{self, PAGE_2M, PAGE_4K};
use crate::error::{Error, Result};
use crate::rng::{self, SplitMix64};

use super::{
    GroundTruth, LibraryPlacement, Mitigation, ModulePlacement, PageAttributes, PageMap, Perm,
    Region, ScenarioKind, ScenarioSpec, SizeClass,
};

/// Offsets of the 4 KiB pages inside an AMD kernel image. The real offsets
/// are undisclosed; this is a fixed fixture.
pub const AMD_4K_OFFSETS: [u64; 5] = [0x0, 0x4000, 0x20_1000, 0x60_0000, 0xa0_4000];

/// Number of 4 KiB pages in the KPTI trampoline mapping.
pub const TRAMPOLINE_PAGES: u64 = 2;
/// Number of 4 KiB pages in the KVAS shadow mapping.
pub const KVAS_PAGES: u64 = 3;
/// Number of 2 MiB pages in the Windows kernel region.
pub const WINDOWS_KERNEL_SLOTS: u64 = 5;

/// Program image sections (`r-x`, `r--`, `rw-`) in pages.
const APP_SECTIONS: [(Perm, u64); 3] = [(Perm::ReadExec, 5), (Perm::ReadOnly, 2), (Perm::ReadWrite, 1)];
/// Upper bound on the span of the program image plus its trailing pages.
pub const APP_SPAN_PAGES: u64 = 16;
pub const MAX_LIB_GAP_PAGES: u64 = 4;

pub fn build(spec: &ScenarioSpec) -> Result<(PageMap, GroundTruth)> {
    let mut rng = rng::seeded(rng::derive_seed(spec.seed, spec.kind as u64));
    let mut map = PageMap::new();
    let mut truth = GroundTruth::default();
    match spec.kind {
        ScenarioKind::LinuxDefault
        | ScenarioKind::LinuxKpti
        | ScenarioKind::LinuxFlare
        | ScenarioKind::LinuxNokaslr => linux(spec, &mut rng, &mut map, &mut truth)?,
        ScenarioKind::AmdLinux => amd(spec, &mut rng, &mut map, &mut truth)?,
        ScenarioKind::Windows => windows(&mut rng, &mut map, &mut truth)?,
        ScenarioKind::WindowsKvas => windows_kvas(spec, &mut rng, &mut map, &mut truth)?,
        ScenarioKind::Userspace => userspace(spec, &mut rng, &mut map, &mut truth)?,
        ScenarioKind::Custom => {
            for r in &spec.custom_regions {
                map.insert(r.clone())?;
            }
        }
    }
    if spec.has(Mitigation::FlareDummyMap) && spec.kind.is_linux() {
        flare(&mut map)?;
    }
    Ok((map, truth))
}

fn image_slots(spec: &ScenarioSpec) -> Result<u64> {
    let size = spec.kernel_image_size;
    if size == 0 || !size.is_multiple_of(PAGE_2M) || size > addr::KERNEL_TEXT_END - addr::KERNEL_TEXT_START {
        return Err(Error::Config(format!(
            "kernel image size {size:#x} must be a non-zero multiple of 2 MiB within the text range"
        )));
    }
    Ok(size / PAGE_2M)
}

fn linux(
    spec: &ScenarioSpec,
    rng: &mut SplitMix64,
    map: &mut PageMap,
    truth: &mut GroundTruth,
) -> Result<()> {
    let kpti = spec.kpti_enabled();
    if kpti && !spec.trampoline_offset.is_multiple_of(PAGE_4K) {
        return Err(Error::Config("trampoline offset must be 4 KiB aligned".into()));
    }
    let base = if spec.kind == ScenarioKind::LinuxNokaslr {
        addr::KERNEL_NOKASLR_BASE
    } else {
        // Under KPTI the trampoline must still land inside the text range.
        let slots = if kpti {
            let reach = (spec.trampoline_offset + TRAMPOLINE_PAGES * PAGE_4K).div_ceil(PAGE_2M);
            addr::KERNEL_TEXT_SLOTS.saturating_sub(reach) + 1
        } else {
            addr::KERNEL_TEXT_SLOTS
        };
        addr::KERNEL_TEXT_START + rng::below(rng, slots) * PAGE_2M
    };
    truth.kernel_base = Some(base);

    if kpti {
        let tramp = base + spec.trampoline_offset;
        if tramp + TRAMPOLINE_PAGES * PAGE_4K > addr::KERNEL_TEXT_END {
            return Err(Error::Config("KPTI trampoline falls outside the kernel text range".into()));
        }
        map.insert(Region::new(
            tramp,
            TRAMPOLINE_PAGES * PAGE_4K,
            PageAttributes::kernel_text(SizeClass::Page4K),
            "kpti-trampoline",
        ))?;
        truth.trampoline_base = Some(tramp);
        return Ok(());
    }

    // Randomization is uniform over all 512 slots; an image drawn near the top
    // of the range is truncated at its end.
    let len = (image_slots(spec)? * PAGE_2M).min(addr::KERNEL_TEXT_END - base);
    map.insert(Region::new(
        base,
        len,
        PageAttributes::kernel_text(SizeClass::Page2M),
        "kernel",
    ))?;
    truth.kernel_extent = Some((base, len));
    modules(spec, rng, map, truth)
}

fn amd(
    spec: &ScenarioSpec,
    rng: &mut SplitMix64,
    map: &mut PageMap,
    truth: &mut GroundTruth,
) -> Result<()> {
    let slots = image_slots(spec)?;
    let last_fixture = AMD_4K_OFFSETS.iter().max().copied().unwrap_or(0);
    if last_fixture >= slots * PAGE_2M {
        return Err(Error::Config("kernel image too small for the AMD 4 KiB fixture".into()));
    }
    let base = addr::KERNEL_TEXT_START
        + rng::below(rng, addr::KERNEL_TEXT_SLOTS - slots + 1) * PAGE_2M;
    truth.kernel_base = Some(base);
    truth.kernel_extent = Some((base, slots * PAGE_2M));

    let fixture_slot = |s: u64| AMD_4K_OFFSETS.iter().any(|o| o / PAGE_2M == s);
    let mut s = 0;
    while s < slots {
        if fixture_slot(s) {
            s += 1;
            continue;
        }
        let start = s;
        while s < slots && !fixture_slot(s) {
            s += 1;
        }
        map.insert(Region::new(
            base + start * PAGE_2M,
            (s - start) * PAGE_2M,
            PageAttributes::kernel_text(SizeClass::Page2M),
            "kernel",
        ))?;
    }
    for off in AMD_4K_OFFSETS {
        map.insert(Region::new(
            base + off,
            PAGE_4K,
            PageAttributes::kernel_data(SizeClass::Page4K),
            "kernel-4k",
        ))?;
        truth.kernel_4k_pages.push(base + off);
    }
    modules(spec, rng, map, truth)
}

/// Places the module catalog in random order inside the module area. Every
/// module is flanked by at least one unmapped page.
fn modules(
    spec: &ScenarioSpec,
    rng: &mut SplitMix64,
    map: &mut PageMap,
    truth: &mut GroundTruth,
) -> Result<()> {
    let catalog = &spec.module_catalog;
    if catalog.is_empty() {
        return Ok(());
    }
    let n = catalog.len() as u64;
    let pages: u64 = catalog.iter().map(|m| m.pages()).sum();
    // n + 1 mandatory gaps (before, between, after).
    let needed = pages + n + 1;
    if needed > addr::MODULE_SLOTS {
        return Err(Error::Config(format!(
            "module catalog needs {needed} pages, the module area has {}",
            addr::MODULE_SLOTS
        )));
    }
    let slack = addr::MODULE_SLOTS - needed;
    let mut order: Vec<usize> = (0..catalog.len()).collect();
    order.shuffle(rng);
    // Split the slack over the n + 1 gaps; keep most of it at the tail so the
    // module area is packed like a real load order.
    let spread = slack.min(4 * n);
    let mut extra: Vec<u64> = (0..=n).map(|_| 0).collect();
    for _ in 0..spread {
        let g = rng::below(rng, n + 1) as usize;
        extra[g] += 1;
    }
    let lead = rng::below(rng, slack - spread + 1);
    let mut cursor = addr::MODULES_START + (1 + extra[0] + lead) * PAGE_4K;
    for (i, &idx) in order.iter().enumerate() {
        let m = &catalog[idx];
        let len = m.pages() * PAGE_4K;
        map.insert(Region::new(
            cursor,
            len,
            PageAttributes::kernel_text(SizeClass::Page4K),
            m.name.clone(),
        ))?;
        truth.module_placements.push(ModulePlacement {
            name: m.name.clone(),
            base: cursor,
            size: m.size,
        });
        cursor += len + (1 + extra[i + 1]) * PAGE_4K;
    }
    debug_assert!(cursor <= addr::MODULES_END);
    Ok(())
}

fn flare(map: &mut PageMap) -> Result<()> {
    for slot in 0..addr::KERNEL_TEXT_SLOTS {
        let a = addr::KERNEL_TEXT_START + slot * PAGE_2M;
        if !map.overlaps(a, a + PAGE_2M) {
            map.insert(Region::new(
                a,
                PAGE_2M,
                PageAttributes::kernel_data(SizeClass::Page2M),
                "flare-dummy",
            ))?;
        }
    }
    Ok(())
}

fn windows(rng: &mut SplitMix64, map: &mut PageMap, truth: &mut GroundTruth) -> Result<()> {
    let slot = rng::below(rng, addr::WINDOWS_SLOTS - WINDOWS_KERNEL_SLOTS + 1);
    let base = addr::WINDOWS_START + slot * PAGE_2M;
    map.insert(Region::new(
        base,
        WINDOWS_KERNEL_SLOTS * PAGE_2M,
        PageAttributes::kernel_text(SizeClass::Page2M),
        "ntoskrnl",
    ))?;
    truth.kernel_base = Some(base);
    truth.kernel_extent = Some((base, WINDOWS_KERNEL_SLOTS * PAGE_2M));
    // Driver regions: shorter runs that must not be mistaken for the kernel.
    let mut placed = 0;
    while placed < 6 {
        let len = 1 + rng::below(rng, WINDOWS_KERNEL_SLOTS - 1);
        let s = rng::below(rng, addr::WINDOWS_SLOTS - len);
        let a = addr::WINDOWS_START + s * PAGE_2M;
        let lo = a.saturating_sub(PAGE_2M).max(addr::WINDOWS_START);
        if map.overlaps(lo, a + (len + 1) * PAGE_2M) {
            continue;
        }
        map.insert(Region::new(
            a,
            len * PAGE_2M,
            PageAttributes::kernel_data(SizeClass::Page2M),
            "driver",
        ))?;
        placed += 1;
    }
    Ok(())
}

fn windows_kvas(
    spec: &ScenarioSpec,
    rng: &mut SplitMix64,
    map: &mut PageMap,
    truth: &mut GroundTruth,
) -> Result<()> {
    if spec.kvas_window_bits > 18 || !spec.kvas_offset.is_multiple_of(PAGE_4K) {
        return Err(Error::Config("invalid KVAS window or offset".into()));
    }
    let slots = (1u64 << spec.kvas_window_bits).min(addr::WINDOWS_SLOTS - WINDOWS_KERNEL_SLOTS + 1);
    let base = addr::WINDOWS_START + rng::below(rng, slots) * PAGE_2M;
    let shadow = base + spec.kvas_offset;
    map.insert(Region::new(
        shadow,
        KVAS_PAGES * PAGE_4K,
        PageAttributes::kernel_text(SizeClass::Page4K),
        "kvas-shadow",
    ))?;
    truth.kernel_base = Some(base);
    truth.kvas_base = Some(shadow);
    Ok(())
}

fn userspace(
    spec: &ScenarioSpec,
    rng: &mut SplitMix64,
    map: &mut PageMap,
    truth: &mut GroundTruth,
) -> Result<()> {
    if spec.userspace_window_bits > 28 {
        return Err(Error::Config("user-space entropy is at most 28 bits".into()));
    }
    let slots = 1u64 << spec.userspace_window_bits;

    let code = addr::USER_CODE_BASE + rng::below(rng, slots) * PAGE_4K;
    let mut cursor = code;
    for (perm, pages) in APP_SECTIONS {
        let len = pages * PAGE_4K;
        map.insert(Region::new(cursor, len, PageAttributes::user(perm), "app"))?;
        cursor += len;
    }
    truth.code_base = Some(code);
    truth.reported_maps.push((code, cursor - code));
    // A present page missing from the self-reported map.
    let hidden = cursor + 2 * PAGE_4K;
    map.insert(Region::new(hidden, PAGE_4K, PageAttributes::user(Perm::ReadOnly), "unlisted"))?;
    truth.unlisted_pages.push(hidden);

    let mut cursor = addr::USER_LIB_BASE + rng::below(rng, slots) * PAGE_4K;
    let perms = [Perm::ReadExec, Perm::None, Perm::ReadOnly, Perm::ReadWrite];
    for lib in &spec.library_catalog {
        let start = cursor;
        for (perm, pages) in perms.iter().zip(lib.section_pages()) {
            if pages == 0 {
                continue;
            }
            let len = pages * PAGE_4K;
            map.insert(Region::new(cursor, len, PageAttributes::user(*perm), lib.name.clone()))?;
            cursor += len;
        }
        truth.library_placements.push(LibraryPlacement {
            name: lib.name.clone(),
            base: start,
            section_sizes: lib.section_pages().map(|p| p * PAGE_4K),
        });
        truth.reported_maps.push((start, cursor - start));
        cursor += (1 + rng::below(rng, MAX_LIB_GAP_PAGES)) * PAGE_4K;
    }
    let hidden = cursor + PAGE_4K;
    map.insert(Region::new(hidden, PAGE_4K, PageAttributes::user(Perm::ReadWrite), "unlisted"))?;
    truth.unlisted_pages.push(hidden);
    Ok(())
}

/// Window covered by [`random_custom`] layouts.
pub const RANDOM_CUSTOM_WINDOW: std::ops::Range<u64> =
    addr::KERNEL_TEXT_START..addr::KERNEL_TEXT_START + 32 * PAGE_2M;

pub fn random_custom(seed: u64) -> ScenarioSpec {
    let mut rng = rng::seeded(rng::derive_seed(seed, ScenarioKind::Custom as u64));
    let mut map = PageMap::new();
    let slots = (RANDOM_CUSTOM_WINDOW.end - RANDOM_CUSTOM_WINDOW.start) / PAGE_2M;
    let n = 1 + rng::below(&mut rng, 24);
    for i in 0..n {
        let slot = RANDOM_CUSTOM_WINDOW.start + rng::below(&mut rng, slots) * PAGE_2M;
        let kernel_data = rng::below(&mut rng, 3) == 0;
        let region = if rng::below(&mut rng, 3) == 0 {
            let attrs = if kernel_data {
                PageAttributes::kernel_data(SizeClass::Page2M)
            } else {
                PageAttributes::kernel_text(SizeClass::Page2M)
            };
            Region::new(slot, PAGE_2M, attrs, format!("huge{i}"))
        } else {
            let pages = 1 + rng::below(&mut rng, 16);
            let first = rng::below(&mut rng, 512 - pages);
            let attrs = if kernel_data {
                PageAttributes::kernel_data(SizeClass::Page4K)
            } else {
                PageAttributes::kernel_text(SizeClass::Page4K)
            };
            Region::new(slot + first * PAGE_4K, pages * PAGE_4K, attrs, format!("run{i}"))
        };
        // Overlapping draws and 4 KiB runs sharing a 2 MiB slot with a huge
        // page are simply skipped.
        let _ = map.insert(region);
    }
    ScenarioSpec {
        seed,
        ..ScenarioSpec::custom(map.iter().cloned().collect())
    }
}
