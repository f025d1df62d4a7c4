use std::sync::Arc;

use super::*;
use crate::addr::{PAGE_2M, PAGE_4K};
use crate::attacks::TlbSeparator;
use crate::prober::{Background, MeasurePolicy, Prober, SimProber};
use crate::sim::{OpKind, TimingProfile};
use crate::space::{AddressSpace, Mitigation, ScenarioKind, ScenarioSpec};

const POLICY: MeasurePolicy = MeasurePolicy::SecondOfTwo;

fn space(spec: ScenarioSpec) -> Arc<AddressSpace> {
    Arc::new(AddressSpace::build(spec).unwrap())
}

fn quiet(space: &Arc<AddressSpace>, profile: TimingProfile) -> SimProber {
    SimProber::new(space.clone(), profile.without_noise(), 0)
}

#[test]
fn base_scan_is_exact_without_noise() {
    for seed in 0..5 {
        let sp = space(ScenarioSpec::new(ScenarioKind::LinuxDefault, seed));
        let r = scan_kernel_base(&mut quiet(&sp, TimingProfile::alderlake()), POLICY).unwrap();
        assert_eq!(r.detected_base, sp.truth().kernel_base);
        assert!(r.is_found());
        assert!(r.slots_probed <= 512);
        assert!(r.remeasurements <= 2 * RETRIES as u64);
        assert_eq!(r.probes_issued, 2 * (r.slots_probed + r.remeasurements));
    }
}

#[test]
fn base_scan_reports_not_found_under_kpti() {
    let sp = space(ScenarioSpec::new(ScenarioKind::LinuxKpti, 4));
    let r = scan_kernel_base(&mut quiet(&sp, TimingProfile::alderlake()), POLICY).unwrap();
    assert_eq!(r.outcome, Outcome::NotFound);
    assert_eq!(r.detected_base, None);
}

#[test]
fn kpti_trampoline_yields_fixed_base() {
    let spec = ScenarioSpec { kpti: true, ..ScenarioSpec::new(ScenarioKind::LinuxNokaslr, 0) };
    let sp = space(spec);
    let r = scan_kpti(&mut quiet(&sp, TimingProfile::alderlake()), POLICY, 0xc0_0000).unwrap();
    assert_eq!(r.detected_base, Some(0xffff_ffff_8100_0000));
    assert_eq!(r.regions[0].base, 0xffff_ffff_81c0_0000);
}

#[test]
fn kpti_cloud_offset() {
    let spec = ScenarioSpec::aws_kpti(9);
    let off = spec.trampoline_offset;
    let sp = space(spec);
    let r = scan_kpti(&mut quiet(&sp, TimingProfile::icelake()), POLICY, off).unwrap();
    assert_eq!(r.detected_base, sp.truth().kernel_base);
    assert_eq!(r.regions[0].base, sp.truth().trampoline_base.unwrap());
}

#[test]
fn amd_scan_finds_five_pages() {
    let profile = TimingProfile::zen3().without_noise();
    let bands = amd_reference_bands(&profile, 5, 1).unwrap();
    for seed in 10..13 {
        let sp = space(ScenarioSpec::new(ScenarioKind::AmdLinux, seed));
        let r = scan_amd_kernel(&mut quiet(&sp, profile.clone()), POLICY, &bands).unwrap();
        assert_eq!(r.outcome, Outcome::Found, "{:?}", r.note);
        assert_eq!(r.detected_base, sp.truth().kernel_base);
        let pt: Vec<u64> = r.regions.iter().filter(|g| g.labels == ["pt-page"]).map(|g| g.base).collect();
        assert_eq!(pt, sp.truth().kernel_4k_pages);
    }
}

#[test]
fn amd_scan_refuses_intel_profiles() {
    let sp = space(ScenarioSpec::new(ScenarioKind::AmdLinux, 1));
    let bands = amd_reference_bands(&TimingProfile::zen3(), 5, 1).unwrap();
    let err = scan_amd_kernel(&mut quiet(&sp, TimingProfile::alderlake()), POLICY, &bands).unwrap_err();
    assert!(matches!(err, Error::Capability(_)));
}

#[test]
fn windows_run_is_five_slots() {
    let sp = space(ScenarioSpec::new(ScenarioKind::Windows, 2));
    let r = scan_windows(&mut quiet(&sp, TimingProfile::alderlake()), POLICY).unwrap();
    assert_eq!(r.detected_base, sp.truth().kernel_base);
    assert_eq!(r.regions[0].size, 5 * PAGE_2M);
}

#[test]
fn windows_refiner_sees_base_and_is_charged() {
    let sp = space(ScenarioSpec::new(ScenarioKind::Windows, 2));
    let mut p = quiet(&sp, TimingProfile::alderlake());
    let plain = scan_windows(&mut quiet(&sp, TimingProfile::alderlake()), POLICY).unwrap();
    let r = scan_windows_refined(&mut p, POLICY, |p, base| {
        p.probe(base, OpKind::MaskedLoad)?;
        Ok(base + PAGE_4K)
    })
    .unwrap();
    assert_eq!(r.detected_base, plain.detected_base.map(|b| b + PAGE_4K));
    assert_eq!(r.probes_issued, plain.probes_issued + 1);
}

#[test]
fn kvas_shadow_gives_base() {
    let spec = ScenarioSpec::new(ScenarioKind::WindowsKvas, 3);
    let (window, off) = (spec.kvas_search_window(), spec.kvas_offset);
    let sp = space(spec);
    let r = scan_kvas(&mut quiet(&sp, TimingProfile::alderlake()), POLICY, window, off).unwrap();
    assert!(r.is_found());
    assert_eq!(r.regions[0].size, 3 * PAGE_4K);
    assert_eq!(r.detected_base, sp.truth().kernel_base);
    assert_eq!(r.detected_base.unwrap() + 0x29_8000, r.regions[0].base);
}

#[test]
fn module_segmentation_matches_truth() {
    let sp = space(ScenarioSpec::new(ScenarioKind::LinuxDefault, 5));
    let catalog = sp.spec().module_catalog.clone();
    let r = scan_modules(&mut quiet(&sp, TimingProfile::alderlake()), POLICY, &catalog).unwrap();
    let truth = &sp.truth().module_placements;
    assert_eq!(r.regions.len(), truth.len());
    assert_eq!(r.slots_probed, 16384);
    assert_eq!(r.probes_issued, 2 * (r.slots_probed + r.remeasurements));
    for (g, m) in r.regions.iter().zip(truth) {
        assert_eq!((g.base, g.size), (m.base, m.pages() * PAGE_4K));
        assert!(g.labels.contains(&m.name));
    }
    let pair = r.regions.iter().find(|g| g.labels.iter().any(|l| l == "autofs4")).unwrap();
    let mut labels = pair.labels.clone();
    labels.sort();
    assert_eq!(labels, ["autofs4", "x_tables"]);
    for name in ["video", "mac_hid", "pinctrl_icelake"] {
        assert!(r.regions.iter().any(|g| g.identified() == Some(name)), "{name}");
    }
}

#[test]
fn empty_module_range_has_no_regions() {
    let sp = space(ScenarioSpec::custom(Vec::new()));
    let r = scan_modules(&mut quiet(&sp, TimingProfile::alderlake()), POLICY, &[]).unwrap();
    assert!(r.regions.is_empty());
}

fn small_userspace(seed: u64) -> Arc<AddressSpace> {
    space(ScenarioSpec { userspace_window_bits: 6, ..ScenarioSpec::new(ScenarioKind::Userspace, seed) })
}

#[test]
fn libraries_are_matched_by_signature() {
    let sp = small_userspace(7);
    let windows = sp.spec().userspace_windows();
    let catalog = sp.spec().library_catalog.clone();
    let r = fingerprint_libraries(&mut quiet(&sp, TimingProfile::alderlake()), POLICY, &catalog, &windows).unwrap();
    for lib in &sp.truth().library_placements {
        let g = r.regions.iter().find(|g| g.base == lib.base).unwrap();
        assert_eq!(g.identified(), Some(lib.name.as_str()));
    }
    for &hidden in &sp.truth().unlisted_pages {
        assert!(r.regions.iter().any(|g| g.base <= hidden && hidden < g.end()));
        assert!(!sp.truth().reported_maps.iter().any(|&(b, l)| b <= hidden && hidden < b + l));
    }
}

#[test]
fn sweep_covers_every_present_page() {
    let sp = small_userspace(8);
    let windows = sp.spec().userspace_windows();
    let r = sweep_userspace(&mut quiet(&sp, TimingProfile::alderlake()), POLICY, &windows).unwrap();
    let detected: u64 = r.regions.iter().map(|g| g.size / PAGE_4K).sum();
    let present: u64 = sp
        .regions()
        .filter(|g| g.attrs.is_accessible_mapping())
        .map(|g| g.length / PAGE_4K)
        .sum();
    assert_eq!(detected, present);
}

#[test]
fn empty_window_gives_empty_report() {
    let sp = small_userspace(1);
    let r = sweep_userspace(&mut quiet(&sp, TimingProfile::alderlake()), POLICY, &[]).unwrap();
    assert!(r.regions.is_empty());
    assert_eq!(r.outcome, Outcome::NotFound);
}

fn behavior_fixture() -> (SimProber, u64, TlbSeparator) {
    let sp = space(ScenarioSpec::new(ScenarioKind::LinuxDefault, 6));
    let base = sp.truth().module_placements.iter().find(|m| m.pages() >= 10).unwrap().base;
    let mut p = quiet(&sp, TimingProfile::coffeelake());
    let sep = TlbSeparator::calibrate(&mut p, base, 20).unwrap();
    (p, base, sep)
}

#[test]
fn behavior_reproduces_square_wave() {
    let (mut p, base, sep) = behavior_fixture();
    let wave = square_wave(20, 100);
    let driver = |t: usize| wave[t];
    let trace = monitor_behavior(&mut p, base, 10, 100, &sep, Some(&driver)).unwrap();
    assert_eq!(trace.verdicts(), wave);
    assert_eq!(trace.f1(&wave), 1.0);
    let mean = |active: bool| {
        let v: Vec<f64> = trace.ticks.iter().filter(|t| t.active == active).map(|t| t.mean_latency).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(true) < mean(false));
}

#[test]
fn idle_trace_has_no_active_ticks() {
    let (mut p, base, sep) = behavior_fixture();
    let trace = monitor_behavior(&mut p, base, 10, 30, &sep, None).unwrap();
    assert!(trace.ticks.iter().all(|t| !t.active));
}

#[test]
fn square_wave_shape() {
    assert_eq!(square_wave(2, 6), [true, true, false, false, true, true]);
}

fn mitigation_accuracy(spec: ScenarioSpec, primitive: Primitive, background: bool) -> f64 {
    let sp = space(spec);
    let kernel = sp.truth().kernel_range();
    let mut p = quiet(&sp, TimingProfile::alderlake());
    if background {
        let k = kernel.clone().unwrap();
        let pages = (k.start..k.end).step_by(PAGE_2M as usize).collect();
        p = p.with_background(Background { pages, every: 64 }).unwrap();
    }
    evaluate_mitigation(&mut p, kernel, primitive, POLICY).unwrap().per_trial_accuracy.unwrap()
}

#[test]
fn flare_defeats_page_table_but_not_tlb() {
    let spec = ScenarioSpec::new(ScenarioKind::LinuxFlare, 2);
    assert!(mitigation_accuracy(spec.clone(), Primitive::PageTable, false) <= 0.55);
    assert!(mitigation_accuracy(spec, Primitive::Tlb, true) >= 0.99);
}

#[test]
fn partition_and_nop_defeat_their_primitives() {
    let base = ScenarioSpec::new(ScenarioKind::LinuxDefault, 2);
    let part = base.clone().with_mitigation(Mitigation::TlbPartition);
    assert!(mitigation_accuracy(part, Primitive::Tlb, true) <= 0.55);
    let nop = base.clone().with_mitigation(Mitigation::MaskedOpNop);
    assert!(mitigation_accuracy(nop, Primitive::PageTable, false) <= 0.55);
    assert_eq!(mitigation_accuracy(base, Primitive::PageTable, false), 1.0);
}

#[test]
fn balanced_accuracy_of_constant_guess_is_half() {
    let mut c = Confusion::default();
    for i in 0..100 {
        c.add(true, i < 10);
    }
    assert_eq!(c.balanced_accuracy(), 0.5);
}

#[test]
fn campaign_names_round_trip() {
    for c in Campaign::ALL {
        assert_eq!(c.name().parse::<Campaign>().unwrap(), c);
        assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{}\"", c.name()));
    }
    assert!(matches!("scan".parse::<Campaign>(), Err(Error::Usage(_))));
}

#[test]
fn report_round_trips_through_json_and_csv() {
    let sp = space(ScenarioSpec::new(ScenarioKind::LinuxDefault, 0));
    let r = scan_kernel_base(&mut quiet(&sp, TimingProfile::alderlake()), POLICY).unwrap();
    let back = ScanReport::from_json(&r.to_json().unwrap()).unwrap();
    assert_eq!(back.detected_base, r.detected_base);
    assert_eq!(back.regions, r.regions);
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("base,size,labels\n"));
    assert!(text.contains(",kernel"));
}

#[test]
fn noisy_reports_are_deterministic() {
    let sp = space(ScenarioSpec::new(ScenarioKind::LinuxDefault, 1));
    let run = || {
        let mut p = SimProber::new(sp.clone(), TimingProfile::alderlake(), 42);
        scan_kernel_base(&mut p, POLICY).unwrap().to_json().unwrap()
    };
    assert_eq!(run(), run());
}
