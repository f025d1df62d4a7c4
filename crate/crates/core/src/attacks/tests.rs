use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::addr::{self, KERNEL_TEXT_START, PAGE_2M, PAGE_4K};
use crate::prober::{calibrate_threshold, SimProber};
use crate::sim::TimingProfile;
use crate::space::{AddressSpace, Mitigation, ScenarioKind, ScenarioSpec, RANDOM_CUSTOM_WINDOW};

fn space(spec: ScenarioSpec) -> Arc<AddressSpace> {
    Arc::new(AddressSpace::build(spec).unwrap())
}

fn quiet(space: Arc<AddressSpace>, profile: TimingProfile) -> SimProber {
    SimProber::new(space, profile.without_noise(), 0)
}

fn slots() -> Vec<u64> {
    (0..addr::KERNEL_TEXT_SLOTS).map(|i| KERNEL_TEXT_START + i * PAGE_2M).collect()
}

fn mapped(s: &AddressSpace, a: u64) -> bool {
    s.lookup(a).unwrap().is_some_and(|p| p.is_accessible_mapping())
}

#[test]
fn offset_271_slots_are_mapped() {
    let seed = (0..10_000)
        .find(|&s| {
            let sp = AddressSpace::build(ScenarioSpec::new(ScenarioKind::LinuxDefault, s)).unwrap();
            sp.truth().kernel_base == Some(0xffff_ffff_a1e0_0000)
        })
        .unwrap();
    let sp = space(ScenarioSpec::new(ScenarioKind::LinuxDefault, seed));
    let mut p = quiet(sp.clone(), TimingProfile::alderlake());
    let t = calibrate_threshold(&mut p, 100).unwrap();
    let v = page_table_attack(&mut p, &slots(), &t, MeasurePolicy::SecondOfTwo).unwrap();
    let extent = sp.truth().kernel_range().unwrap();
    for (i, r) in v.iter().enumerate() {
        let inside = i >= 271 && extent.contains(&r.addr);
        assert_eq!(r.is_mapped(), inside, "slot {i}");
    }
}

#[test]
fn empty_space_is_all_unmapped() {
    let mut p = quiet(space(ScenarioSpec::custom(vec![])), TimingProfile::icelake());
    let t = calibrate_threshold(&mut p, 100).unwrap();
    let v = page_table_attack(&mut p, &slots(), &t, MeasurePolicy::SecondOfTwo).unwrap();
    assert!(v.iter().all(|r| r.verdict == Mapping::Unmapped));
}

#[test]
fn nop_mitigation_flattens_verdicts() {
    let sp = space(ScenarioSpec::new(ScenarioKind::LinuxDefault, 9).with_mitigation(Mitigation::MaskedOpNop));
    let mut p = quiet(sp, TimingProfile::alderlake());
    let t = calibrate_threshold(&mut p, 100).unwrap();
    let v = page_table_attack(&mut p, &slots(), &t, MeasurePolicy::SecondOfTwo).unwrap();
    assert!(v.iter().all(|r| r.verdict == v[0].verdict && r.latency == v[0].latency));
}

fn amd_reference() -> (Arc<AddressSpace>, Vec<(u64, WalkLevel, Level)>) {
    let sp = space(ScenarioSpec::new(ScenarioKind::AmdLinux, 1));
    let base = sp.truth().kernel_base.unwrap();
    let end = sp.truth().kernel_range().unwrap().end;
    let outside = if base > KERNEL_TEXT_START { base - PAGE_2M } else { end };
    let fixtures = vec![
        (base, WalkLevel::Pt, Level::Pt),
        (base + PAGE_4K, WalkLevel::NonPresent, Level::Pt),
        (base + 2 * PAGE_2M, WalkLevel::Pd, Level::Pd),
        (outside, WalkLevel::NonPresent, Level::Pd),
    ];
    (sp, fixtures)
}

#[test]
fn amd_fixture_pages_classify_pt() {
    let (reference, fixtures) = amd_reference();
    let mut r = quiet(reference, TimingProfile::zen3());
    let bands = LevelBands::calibrate(&mut r, &fixtures, 5).unwrap();
    assert_eq!(bands.bands().len(), 4);

    let target = space(ScenarioSpec::new(ScenarioKind::AmdLinux, 77));
    let mut p = quiet(target.clone(), TimingProfile::zen3());
    let base = target.truth().kernel_base.unwrap();
    let pages: Vec<u64> = (0..16 * 512).map(|i| base + i * PAGE_4K).collect();
    let v = walk_level_attack(&mut p, &pages, &bands, MeasurePolicy::SecondOfTwo, Eviction::OncePerBatch).unwrap();
    let pt: Vec<u64> = v.iter().filter(|w| w.level == WalkLevel::Pt).map(|w| w.addr).collect();
    let want: Vec<u64> = crate::space::AMD_4K_OFFSETS.iter().map(|o| base + o).collect();
    assert_eq!(pt, want);
    for w in &v {
        let truth = target.lookup(w.addr).unwrap();
        match w.level {
            WalkLevel::Pd => assert_eq!(truth.unwrap().size_class, crate::space::SizeClass::Page2M),
            WalkLevel::NonPresent => assert!(truth.is_none()),
            _ => {}
        }
    }
    let outside = if base > KERNEL_TEXT_START { base - PAGE_2M } else { target.truth().kernel_range().unwrap().end };
    let v = walk_level_attack(&mut p, &[outside], &bands, MeasurePolicy::SecondOfTwo, Eviction::BeforeEachProbe).unwrap();
    assert_eq!(v[0].level, WalkLevel::NonPresent);
}

#[test]
fn uncalibrated_bands_are_a_usage_error() {
    let mut p = quiet(space(ScenarioSpec::custom(vec![])), TimingProfile::zen3());
    let bands = LevelBands::default();
    let r = walk_level_attack(&mut p, &[KERNEL_TEXT_START], &bands, MeasurePolicy::SecondOfTwo, Eviction::OncePerBatch);
    assert!(matches!(r, Err(Error::Usage(_))));
    assert!(LevelBands::new(vec![]).is_err());
}

#[test]
fn flare_levels_are_indistinguishable() {
    let sp = space(ScenarioSpec::new(ScenarioKind::LinuxFlare, 5));
    let mut p = quiet(sp.clone(), TimingProfile::icelake());
    let base = sp.truth().kernel_base.unwrap();
    let dummy = slots().into_iter().find(|&a| !sp.truth().kernel_range().unwrap().contains(&a)).unwrap();
    let fixtures = [(base, WalkLevel::Pd, Level::Pd), (KERNEL_TEXT_START - PAGE_2M, WalkLevel::NonPresent, Level::Pd)];
    let bands = LevelBands::calibrate(&mut p, &fixtures, 3).unwrap();
    let v = walk_level_attack(&mut p, &[base, dummy], &bands, MeasurePolicy::SecondOfTwo, Eviction::BeforeEachProbe).unwrap();
    assert_eq!(v[0].level, v[1].level);
    assert_eq!(v[0].latency, v[1].latency);
}

#[test]
fn tlb_verdicts_follow_kernel_activity() {
    let sp = space(ScenarioSpec::new(ScenarioKind::LinuxDefault, 12));
    let mut p = quiet(sp.clone(), TimingProfile::coffeelake());
    let m = &sp.truth().module_placements[0];
    let pages: Vec<u64> = (0..m.pages()).map(|i| m.base + i * PAGE_4K).collect();
    let sep = TlbSeparator::calibrate(&mut p, sp.truth().kernel_base.unwrap(), 10).unwrap();
    assert_eq!((sep.hit_mean, sep.miss_mean), (147.0, 381.0));
    assert!(sep.is_hit(147) && !sep.is_hit(381));

    p.kernel_activity(&pages).unwrap();
    let v = tlb_attack(&mut p, &pages, &sep).unwrap();
    assert!(v.iter().all(|t| t.state == TlbState::Hit));
    p.evict_tlb().unwrap();
    let v = tlb_attack(&mut p, &pages, &sep).unwrap();
    assert!(v.iter().all(|t| t.state == TlbState::Miss));
}

#[test]
fn tlb_attack_chunks_and_keeps_input_order() {
    let sp = space(ScenarioSpec::new(ScenarioKind::LinuxDefault, 12));
    let mut p = quiet(sp.clone(), TimingProfile::coffeelake());
    let sep = TlbSeparator::manual(264.0);
    let mut addrs: Vec<u64> = sp
        .truth()
        .module_placements
        .iter()
        .flat_map(|m| (0..m.pages()).map(move |i| m.base + i * PAGE_4K))
        .take(2 * TLB_CHUNK + 5)
        .collect();
    addrs.reverse();
    p.kernel_activity(&addrs).unwrap();
    let v = tlb_attack(&mut p, &addrs, &sep).unwrap();
    assert!(v.iter().zip(&addrs).all(|(t, &a)| t.addr == a));
    // Chunk boundaries evict, so only the lowest chunk still sees the fills.
    let hits = v.iter().filter(|t| t.state == TlbState::Hit).count();
    assert_eq!(hits, TLB_CHUNK);
}

#[test]
fn tlb_partition_hides_kernel_hits() {
    let sp = space(ScenarioSpec::new(ScenarioKind::LinuxDefault, 3).with_mitigation(Mitigation::TlbPartition));
    let base = sp.truth().kernel_base.unwrap();
    let mut p = quiet(sp, TimingProfile::coffeelake());
    p.kernel_activity(&[base]).unwrap();
    let v = tlb_attack(&mut p, &[base], &TlbSeparator::manual(264.0)).unwrap();
    assert_eq!(v[0].state, TlbState::Miss);
}

fn permission_fixture(seed: u64) -> (Arc<AddressSpace>, SimProber, PermissionThresholds) {
    let sp = space(ScenarioSpec::new(ScenarioKind::Userspace, seed));
    let mut p = quiet(sp.clone(), TimingProfile::alderlake());
    let load = calibrate_threshold(&mut p, 100).unwrap();
    let th = PermissionThresholds::calibrate(&mut p, load, 10).unwrap();
    (sp, p, th)
}

#[test]
fn library_sections_read_back_in_order() {
    let (sp, mut p, th) = permission_fixture(2);
    for lib in &sp.truth().library_placements {
        let starts: Vec<u64> = lib
            .section_sizes
            .iter()
            .scan(lib.base, |c, &s| {
                let a = *c;
                *c += s;
                Some(a)
            })
            .collect();
        let v = permission_attack(&mut p, &starts, &th, MeasurePolicy::SecondOfTwo, true).unwrap();
        let got: Vec<PermissionClass> = v.iter().map(|x| x.perm).collect();
        assert_eq!(
            got,
            [PermissionClass::ReadNoWrite, PermissionClass::NoAccess, PermissionClass::ReadNoWrite, PermissionClass::ReadWrite],
            "{}",
            lib.name
        );
    }
}

#[test]
fn permission_verdicts_match_truth_and_merge_r_and_rx() {
    for seed in 0..3 {
        let (sp, mut p, th) = permission_fixture(seed);
        let lo = sp.truth().library_placements[0].base - 4 * PAGE_4K;
        let hi = sp.truth().library_placements.last().unwrap().base + 64 * PAGE_4K;
        let addrs: Vec<u64> = (lo..hi).step_by(PAGE_4K as usize).collect();
        let v = permission_attack(&mut p, &addrs, &th, MeasurePolicy::SecondOfTwo, true).unwrap();
        for x in &v {
            let perm = sp.lookup(x.addr).unwrap().map(|a| a.perm());
            assert_eq!(x.perm, PermissionClass::expected(perm, true), "{:#x} {perm:?}", x.addr);
        }
        let v = permission_attack(&mut p, &addrs, &th, MeasurePolicy::SecondOfTwo, false).unwrap();
        assert!(v.iter().all(|x| x.perm != PermissionClass::NoAccess));
    }
}

#[test]
fn verdicts_serialize_to_csv() {
    let t = Threshold::manual(100.0).unwrap();
    let v = vec![MappingVerdict::classify(0xffff_ffff_8000_0000, 93, &t), MappingVerdict::classify(0x1000, 107, &t)];
    let mut out = Vec::new();
    write_verdicts_csv(&mut out, &v).unwrap();
    assert_eq!(
        String::from_utf8(out).unwrap(),
        "addr,verdict,latency\n0xffffffff80000000,mapped,93\n0x0000000000001000,unmapped,107\n"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn page_table_attack_equals_enumeration(seed in any::<u64>()) {
        let sp = space(ScenarioSpec::random_custom(seed));
        let mut p = quiet(sp.clone(), TimingProfile::alderlake());
        let t = calibrate_threshold(&mut p, 100).unwrap();
        let addrs: Vec<u64> = RANDOM_CUSTOM_WINDOW.step_by(PAGE_4K as usize).collect();
        let v = page_table_attack(&mut p, &addrs, &t, MeasurePolicy::SecondOfTwo).unwrap();
        for r in &v {
            prop_assert_eq!(r.is_mapped(), mapped(&sp, r.addr));
        }
    }

    #[test]
    fn tlb_verdict_flips(seed in 0u64..500) {
        let sp = space(ScenarioSpec::new(ScenarioKind::LinuxDefault, seed));
        let extent = sp.truth().kernel_range().unwrap();
        let pages: Vec<u64> = (extent.start..extent.end).step_by(PAGE_2M as usize).collect();
        let mut p = quiet(sp, TimingProfile::icelake());
        let sep = TlbSeparator::calibrate(&mut p, pages[0], 3).unwrap();
        p.kernel_activity(&pages).unwrap();
        prop_assert!(tlb_attack(&mut p, &pages, &sep).unwrap().iter().all(|t| t.state == TlbState::Hit));
        p.evict_tlb().unwrap();
        prop_assert!(tlb_attack(&mut p, &pages, &sep).unwrap().iter().all(|t| t.state == TlbState::Miss));
    }
}

#[test]
fn separator_reports_missing_tlb_signal() {
    let sp = space(ScenarioSpec::new(ScenarioKind::LinuxDefault, 3));
    let base = sp.truth().kernel_base.unwrap();
    let mut p = SimProber::new(sp.clone(), TimingProfile::alderlake(), 1);
    assert!(TlbSeparator::calibrate(&mut p, base, 200).unwrap().has_signal());
    let part = space(ScenarioSpec::new(ScenarioKind::LinuxDefault, 3).with_mitigation(Mitigation::TlbPartition));
    let mut p = SimProber::new(part, TimingProfile::alderlake(), 1);
    assert!(!TlbSeparator::calibrate(&mut p, base, 200).unwrap().has_signal());
    assert!(!TlbSeparator::manual(98.0).has_signal());
}
