use super::layout::{AMD_4K_OFFSETS, KVAS_PAGES, WINDOWS_KERNEL_SLOTS};
use super::*;
use crate::addr::{KERNEL_TEXT_END, KERNEL_TEXT_START, MODULES_END, MODULES_START};

fn build(kind: ScenarioKind, seed: u64) -> AddressSpace {
    AddressSpace::build(ScenarioSpec::new(kind, seed)).unwrap()
}

fn slot_of(base: u64) -> u64 {
    (base - KERNEL_TEXT_START) / PAGE_2M
}

#[test]
fn nokaslr_base_is_fixed() {
    for seed in [0, 1, 99, u64::MAX] {
        let s = build(ScenarioKind::LinuxNokaslr, seed);
        assert_eq!(s.truth().kernel_base, Some(0xffff_ffff_8100_0000));
    }
}

#[test]
fn offset_271_maps_to_documented_base() {
    let seed = (0..10_000)
        .find(|&s| slot_of(build(ScenarioKind::LinuxDefault, s).truth().kernel_base.unwrap()) == 271)
        .expect("some seed draws slot 271");
    let s = build(ScenarioKind::LinuxDefault, seed);
    assert_eq!(s.truth().kernel_base, Some(0xffff_ffff_a1e0_0000));
}

#[test]
fn same_seed_same_layout() {
    let a = build(ScenarioKind::LinuxDefault, 0);
    let b = build(ScenarioKind::LinuxDefault, 0);
    assert!(a.regions().eq(b.regions()));
    assert_eq!(a.truth(), b.truth());
    let c = build(ScenarioKind::LinuxDefault, 1);
    assert!(!a.regions().eq(c.regions()));
}

#[test]
fn modules_match_catalog() {
    for seed in 0..50 {
        let s = build(ScenarioKind::LinuxDefault, seed);
        let cat = &s.spec().module_catalog;
        let placed = &s.truth().module_placements;
        assert_eq!(placed.len(), cat.len());
        let mut regions: Vec<&Region> = s
            .regions()
            .filter(|r| r.base >= MODULES_START && r.base < MODULES_END)
            .collect();
        regions.sort_by_key(|r| r.base);
        assert_eq!(regions.len(), cat.len());
        for p in placed {
            let entry = cat.iter().find(|m| m.name == p.name).unwrap();
            assert_eq!(p.size, entry.size);
            assert_eq!(p.base % PAGE_4K, 0);
            assert!(p.base >= MODULES_START && p.base + p.pages() * PAGE_4K <= MODULES_END);
            let r = s.region_at(p.base).unwrap();
            assert_eq!((r.base, r.length), (p.base, entry.pages() * PAGE_4K));
            // Flanked by unmapped pages.
            assert_eq!(s.lookup(p.base - PAGE_4K).unwrap(), None);
            assert_eq!(s.lookup(r.end()).unwrap(), None);
        }
    }
}

#[test]
fn regions_never_overlap() {
    for kind in [
        ScenarioKind::LinuxDefault,
        ScenarioKind::LinuxFlare,
        ScenarioKind::AmdLinux,
        ScenarioKind::Windows,
        ScenarioKind::Userspace,
    ] {
        for seed in 0..20 {
            let s = build(kind, seed);
            let rs: Vec<&Region> = s.regions().collect();
            for w in rs.windows(2) {
                assert!(w[0].end() <= w[1].base, "{kind:?} seed {seed}");
            }
        }
    }
}

#[test]
fn kernel_base_lookup() {
    let s = build(ScenarioKind::LinuxDefault, 7);
    let base = s.truth().kernel_base.unwrap();
    let a = s.lookup(base).unwrap().unwrap();
    assert!(a.present && !a.user_accessible);
    assert_eq!(a.size_class, SizeClass::Page2M);
    let seed = (0..100)
        .find(|&x| slot_of(build(ScenarioKind::LinuxDefault, x).truth().kernel_base.unwrap()) > 0)
        .unwrap();
    let s = build(ScenarioKind::LinuxDefault, seed);
    let base = s.truth().kernel_base.unwrap();
    assert_eq!(s.lookup(base - PAGE_2M).unwrap(), None);
}

#[test]
fn lookup_rejects_non_canonical() {
    let s = build(ScenarioKind::LinuxDefault, 0);
    assert!(matches!(s.lookup(0x0000_8000_0000_0000), Err(Error::NonCanonical(_))));
}

#[test]
fn flare_maps_every_text_slot() {
    let s = build(ScenarioKind::LinuxFlare, 3);
    for slot in 0..addr::KERNEL_TEXT_SLOTS {
        let a = KERNEL_TEXT_START + slot * PAGE_2M;
        assert!(s.lookup(a).unwrap().unwrap().present, "slot {slot}");
    }
}

#[test]
fn kpti_and_kvas_offsets() {
    for seed in 0..20 {
        let s = build(ScenarioKind::LinuxKpti, seed);
        let t = s.truth();
        assert_eq!(t.trampoline_base, Some(t.kernel_base.unwrap() + 0xc0_0000));
        assert_eq!(s.lookup(t.kernel_base.unwrap()).unwrap(), None);
        assert!(t.module_placements.is_empty());

        let s = build(ScenarioKind::WindowsKvas, seed);
        let t = s.truth();
        assert_eq!(t.kvas_base, Some(t.kernel_base.unwrap() + 0x29_8000));
        for i in 0..KVAS_PAGES {
            assert!(s.lookup(t.kvas_base.unwrap() + i * PAGE_4K).unwrap().is_some());
        }
        assert!(s.spec().kvas_search_window().contains(&t.kvas_base.unwrap()));
    }
    let s = AddressSpace::build(ScenarioSpec::aws_kpti(5)).unwrap();
    let t = s.truth();
    assert_eq!(t.trampoline_base, Some(t.kernel_base.unwrap() + 0xe0_0000));
}

#[test]
fn amd_embeds_five_4k_pages() {
    for seed in 0..20 {
        let s = build(ScenarioKind::AmdLinux, seed);
        let base = s.truth().kernel_base.unwrap();
        let pt: Vec<u64> = s
            .regions()
            .filter(|r| r.attrs.size_class == SizeClass::Page4K && r.base < KERNEL_TEXT_END)
            .map(|r| r.base)
            .collect();
        let want: Vec<u64> = AMD_4K_OFFSETS.iter().map(|o| base + o).collect();
        assert_eq!(pt, want);
    }
}

#[test]
fn windows_kernel_is_five_2m_pages() {
    for seed in 0..20 {
        let s = build(ScenarioKind::Windows, seed);
        let base = s.truth().kernel_base.unwrap();
        assert_eq!(base % PAGE_2M, 0);
        assert!((addr::WINDOWS_START..addr::WINDOWS_END).contains(&base));
        for i in 0..WINDOWS_KERNEL_SLOTS {
            assert!(s.lookup(base + i * PAGE_2M).unwrap().is_some());
        }
        assert_eq!(s.lookup(base + WINDOWS_KERNEL_SLOTS * PAGE_2M).unwrap(), None);
    }
}

#[test]
fn userspace_section_order() {
    for seed in 0..10 {
        let s = build(ScenarioKind::Userspace, seed);
        for lib in &s.truth().library_placements {
            let mut cursor = lib.base;
            let want = [Perm::ReadExec, Perm::None, Perm::ReadOnly, Perm::ReadWrite];
            for (perm, size) in want.iter().zip(lib.section_sizes) {
                let r = s.region_at(cursor).unwrap();
                assert_eq!(r.attrs.perm(), *perm, "{}", lib.name);
                assert_eq!(r.length, size);
                cursor += size;
            }
            let entry = s.spec().library_catalog.iter().find(|l| l.name == lib.name).unwrap();
            assert_eq!(lib.section_sizes, entry.section_pages().map(|p| p * PAGE_4K));
        }
        let windows = s.spec().userspace_windows();
        for p in &s.truth().unlisted_pages {
            assert!(windows.iter().any(|w| w.contains(p)));
            assert!(!s.truth().reported_maps.iter().any(|(b, l)| *p >= *b && *p < b + l));
        }
    }
}

#[test]
fn custom_overlap_is_a_config_error() {
    let attrs = PageAttributes::kernel_text(SizeClass::Page4K);
    let spec = ScenarioSpec::custom(vec![
        Region::new(0xffff_ffff_8000_0000, 0x2000, attrs, "a"),
        Region::new(0xffff_ffff_8000_1000, 0x1000, attrs, "b"),
    ]);
    assert!(matches!(AddressSpace::build(spec), Err(Error::Config(_))));
    let spec = ScenarioSpec::custom(vec![Region::new(0xffff_ffff_8000_1000, PAGE_2M, PageAttributes::kernel_text(SizeClass::Page2M), "c")]);
    assert!(matches!(AddressSpace::build(spec), Err(Error::Config(_))));
}

#[test]
fn oversized_catalog_is_a_config_error() {
    let mut spec = ScenarioSpec::new(ScenarioKind::LinuxDefault, 0);
    spec.module_catalog = vec![ModuleEntry { name: "huge".into(), size: 16384 * PAGE_4K }];
    assert!(matches!(AddressSpace::build(spec), Err(Error::Config(_))));
}

#[test]
fn walk_levels() {
    let mut m = PageMap::new();
    m.insert(Region::new(0xffff_ffff_8000_0000, PAGE_2M, PageAttributes::kernel_text(SizeClass::Page2M), "pd")).unwrap();
    m.insert(Region::new(0xffff_ffff_8040_0000, PAGE_4K, PageAttributes::kernel_text(SizeClass::Page4K), "pt")).unwrap();
    m.insert(Region::new(0xffff_ff80_0000_0000, PAGE_1G, PageAttributes::kernel_text(SizeClass::Page1G), "pdpt")).unwrap();
    let w = |a| walk(&[&m], a);
    assert_eq!(w(0xffff_ffff_8000_1234).level, Level::Pd);
    assert_eq!(w(0xffff_ffff_8040_0000).level, Level::Pt);
    assert!(w(0xffff_ffff_8040_0000).page.is_some());
    assert_eq!(w(0xffff_ffff_8040_1000), Walk { level: Level::Pt, page: None });
    assert_eq!(w(0xffff_ffff_8020_0000), Walk { level: Level::Pd, page: None });
    assert_eq!(w(0xffff_ff80_1000_0000).level, Level::Pdpt);
    assert_eq!(w(0xffff_ff80_4000_0000), Walk { level: Level::Pdpt, page: None });
    assert_eq!(w(0xffff_8000_0000_0000), Walk { level: Level::Pml4, page: None });
}

#[test]
fn kernel_offsets_are_uniform() {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let n = 10_000u64;
    let mut counts = [0u64; 512];
    for seed in 0..n {
        let base = build(ScenarioKind::LinuxDefault, seed).truth().kernel_base.unwrap();
        counts[slot_of(base) as usize] += 1;
    }
    let expected = n as f64 / 512.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(511.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2} p {p}");
}
