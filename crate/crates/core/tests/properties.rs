//! Property tests over the public API.

use std::collections::BTreeSet;

use gesta_core::metrics::{bundle_overlap, streamline_volume};
use gesta_core::plausibility::{
    check_direction, check_geometry, check_gm, check_wm, evaluate, evaluate_streamline, prepare_masks, CriteriaConfig,
    Criterion, EvaluationMode, WmMode,
};
use gesta_core::rng;
use gesta_core::sampler::{estimate_ln_k, fit_proposal, rejection_sample, ParzenDensity};
use gesta_core::{GridGeometry, PeakField, Streamline, Tractogram, VolumeGrid, PEAK_SLOTS};
use proptest::prelude::*;
use rand::Rng;

type Vec3 = [f64; 3];

fn point(lo: f64, hi: f64) -> impl Strategy<Value = Vec3> {
    [lo..hi, lo..hi, lo..hi]
}

fn polyline(max: usize) -> impl Strategy<Value = Streamline> {
    prop::collection::vec(point(-30.0, 30.0), 2..max)
        .prop_filter_map("degenerate", |v| Streamline::new(v).ok().filter(|s| s.length() > 1e-3))
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn translate(s: &Streamline, t: Vec3) -> Streamline {
    Streamline::new(
        s.vertices()
            .iter()
            .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resample_keeps_endpoints_and_shortens_at_most(s in polyline(30), n in 2usize..200) {
        let r = s.resample(n).unwrap();
        prop_assert_eq!(r.len(), n);
        prop_assert!(dist(r.first(), s.first()) < 1e-9);
        prop_assert!(dist(r.last(), s.last()) < 1e-9 * (1.0 + s.length()));
        // Chords of a polyline never exceed the path they cut across.
        prop_assert!(r.length() <= s.length() * (1.0 + 1e-12));
    }

    #[test]
    fn resampling_a_straight_line_is_evenly_spaced(a in point(-50.0, 50.0), b in point(-50.0, 50.0), n in 2usize..100) {
        prop_assume!(dist(a, b) > 1e-3);
        let r = Streamline::new(vec![a, b]).unwrap().resample(n).unwrap();
        let step = dist(a, b) / (n - 1) as f64;
        for w in r.vertices().windows(2) {
            prop_assert!((dist(w[0], w[1]) - step).abs() <= 1e-9 * step.max(1.0));
        }
    }

    #[test]
    fn length_and_winding_ignore_direction_and_position(s in polyline(30), t in point(-100.0, 100.0)) {
        let back = s.reversed();
        prop_assert!((back.length() - s.length()).abs() < 1e-9 * s.length().max(1.0));
        prop_assert!((back.winding() - s.winding()).abs() < 1e-7);
        let moved = translate(&s, t);
        prop_assert!((moved.length() - s.length()).abs() < 1e-9 * s.length().max(1.0));
        prop_assert!((moved.winding() - s.winding()).abs() < 1e-6);
        prop_assert!(s.winding() >= 0.0);
    }

    #[test]
    fn winding_of_a_polyline_is_bounded_by_its_turns(s in polyline(30)) {
        let turns = s.len().saturating_sub(2) as f64;
        prop_assert!(s.winding() <= 180.0 * turns + 1e-9);
    }
}

// ----- morphology -----

fn naive_morph(mask: &[bool], n: usize, connectivity: u8, dilate: bool) -> Vec<bool> {
    let idx = |i: i64, j: i64, k: i64| (i + n as i64 * (j + n as i64 * k)) as usize;
    let inside = |x: i64| (0..n as i64).contains(&x);
    let mut out = mask.to_vec();
    for k in 0..n as i64 {
        for j in 0..n as i64 {
            for i in 0..n as i64 {
                let mut values = Vec::new();
                for (di, dj, dk) in (-1..=1).flat_map(|a| (-1..=1).flat_map(move |b| (-1..=1).map(move |c| (a, b, c))))
                {
                    let order = [di, dj, dk].iter().filter(|d| **d != 0).count() as u8;
                    if order == 0 || order > connectivity {
                        continue;
                    }
                    let (a, b, c) = (i + di, j + dj, k + dk);
                    values.push(inside(a) && inside(b) && inside(c) && mask[idx(a, b, c)]);
                }
                let here = mask[idx(i, j, k)];
                out[idx(i, j, k)] = if dilate {
                    here || values.iter().any(|v| *v)
                } else {
                    here && values.iter().all(|v| *v)
                };
            }
        }
    }
    out
}

fn grid_mask(g: &GridGeometry, bits: &[bool]) -> VolumeGrid {
    VolumeGrid::mask_from_indices(g.clone(), bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn morphology_matches_the_neighborhood_definition(
        bits in prop::collection::vec(any::<bool>(), 8 * 8 * 8),
        connectivity in 1u8..=3,
        iterations in 0usize..3,
    ) {
        let g = GridGeometry::axis_aligned([8; 3], [1.0; 3], [0.0; 3]).unwrap();
        let m = grid_mask(&g, &bits);
        let (mut d, mut e) = (bits.clone(), bits.clone());
        for _ in 0..iterations {
            d = naive_morph(&d, 8, connectivity, true);
            e = naive_morph(&e, 8, connectivity, false);
        }
        let dilated = m.dilate(iterations, connectivity).unwrap();
        let eroded = m.erode(iterations, connectivity).unwrap();
        prop_assert_eq!(dilated.mask().unwrap(), d.as_slice());
        prop_assert_eq!(eroded.mask().unwrap(), e.as_slice());
        for i in 0..bits.len() {
            prop_assert!(!e[i] || bits[i]);
            prop_assert!(!bits[i] || d[i]);
        }
    }

    #[test]
    fn traversal_is_invariant_to_resampling_a_straight_segment(
        a in point(-2.0, 22.0),
        b in point(-2.0, 22.0),
        n in 3usize..64,
    ) {
        prop_assume!(dist(a, b) > 1e-3);
        let g = GridGeometry::axis_aligned([10; 3], [2.0; 3], [0.0; 3]).unwrap();
        let s = Streamline::new(vec![a, b]).unwrap();
        prop_assert_eq!(g.voxels_traversed(&s), g.voxels_traversed(&s.resample(n).unwrap()));
    }

    #[test]
    fn traversal_is_symmetric_and_contains_the_endpoint_voxels(s in polyline(12)) {
        let g = GridGeometry::axis_aligned([12; 3], [5.0; 3], [-30.0; 3]).unwrap();
        let forward = g.voxels_traversed(&s);
        prop_assert_eq!(&forward, &g.voxels_traversed(&s.reversed()));
        for p in s.vertices() {
            if let Some(v) = g.voxel_of_point(*p) {
                prop_assert!(forward.contains(&g.linear_index(v)));
            }
        }
    }
}

// ----- metrics -----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn overlap_grows_with_more_streamlines(
        bits in prop::collection::vec(any::<bool>(), 10 * 10 * 10),
        lines in prop::collection::vec(polyline(8), 1..10),
    ) {
        prop_assume!(bits.iter().any(|b| *b));
        let g = GridGeometry::axis_aligned([10; 3], [6.0; 3], [-27.0; 3]).unwrap();
        let gt = grid_mask(&g, &bits);
        let mut previous = 0.0;
        let mut previous_volume = 0.0;
        for k in 1..=lines.len() {
            let ol = bundle_overlap(&lines[..k], &gt).unwrap();
            let volume = streamline_volume(&lines[..k], &g);
            prop_assert!((0.0..=1.0).contains(&ol));
            prop_assert!(ol >= previous);
            prop_assert!(volume >= previous_volume);
            previous = ol;
            previous_volume = volume;
        }
    }
}

// ----- plausibility -----

struct Scene {
    wm: VolumeGrid,
    gm: VolumeGrid,
    brain: VolumeGrid,
    peaks: PeakField,
    candidates: Tractogram,
}

fn scene(seed: u64) -> Scene {
    let mut r = rng::stream(seed, &[]);
    let n = 12;
    let g = GridGeometry::axis_aligned([n; 3], [2.0; 3], [0.0; 3]).unwrap();
    let random_mask = |r: &mut rng::StreamRng, p: f64| {
        let bits: Vec<bool> = (0..n * n * n).map(|_| r.random_bool(p)).collect();
        grid_mask(&g, &bits)
    };
    let wm = random_mask(&mut r, 0.8);
    let gm = random_mask(&mut r, 0.4);
    let brain = random_mask(&mut r, 0.95);
    let peaks = (0..n * n * n)
        .map(|_| {
            let mut slots = [[0.0f32; 3]; PEAK_SLOTS];
            for slot in slots.iter_mut().take(r.random_range(0..=PEAK_SLOTS)) {
                *slot = [
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-0.3..0.3),
                ];
            }
            slots
        })
        .collect();
    let peaks = PeakField::new(g.clone(), peaks).unwrap();
    let candidates = (0..40)
        .map(|_| {
            let mut p = [
                r.random_range(2.0..20.0),
                r.random_range(2.0..20.0),
                r.random_range(2.0..20.0),
            ];
            let mut heading: f64 = r.random_range(0.0..6.3);
            let mut v = vec![p];
            for _ in 0..r.random_range(2..40) {
                heading += r.random_range(-0.6..0.6);
                let step = r.random_range(0.5..2.5);
                p = [
                    p[0] + step * heading.cos(),
                    p[1] + step * heading.sin(),
                    p[2] + r.random_range(-0.3..0.3),
                ];
                v.push(p);
            }
            Streamline::new(v).unwrap()
        })
        .collect();
    Scene {
        wm,
        gm,
        brain,
        peaks,
        candidates: Tractogram::new(candidates),
    }
}

fn config() -> impl Strategy<Value = CriteriaConfig> {
    (
        0.0..20.0f64,
        20.0..80.0f64,
        30.0..400.0f64,
        10.0..60.0f64,
        0.3..1.0f64,
        0.6..1.0f64,
        0usize..6,
        0usize..3,
        any::<bool>(),
    )
        .prop_map(
            |(lmin, lmax, wind, loa, ratio, wm_ratio, skip, dilate, erode)| CriteriaConfig {
                length_min_mm: lmin,
                length_max_mm: lmax,
                winding_max_deg: wind,
                loa_max_angle_deg: loa,
                loa_compliance_ratio: ratio,
                wm_ratio,
                endpoint_skip: skip,
                mask_dilate_iterations: dilate,
                brain_erode_iterations: 1,
                erode_brain: erode,
                ..CriteriaConfig::fiber_cup()
            },
        )
}

/// Verdict rebuilt from the individual checks.
fn recomposed(s: &Streamline, sc: &Scene, cfg: &CriteriaConfig, c: Criterion) -> Option<Streamline> {
    let masks = prepare_masks(&sc.wm, &sc.gm, &sc.brain, cfg).unwrap();
    let cfg = c.apply(cfg);
    let t = s.trim_to_mask(&masks.brain)?;
    let ok = check_geometry(&t, &cfg).passed()
        && check_direction(&t, &sc.peaks, &cfg).outcome.passed
        && check_wm(&t, &masks.wm, &cfg).outcome.passed
        && (!cfg.gm_required || check_gm(&t, &masks.gm).passed);
    ok.then_some(t)
}

fn accepted_indices(sc: &Scene, cfg: &CriteriaConfig, c: Criterion) -> BTreeSet<usize> {
    let masks = prepare_masks(&sc.wm, &sc.gm, &sc.brain, cfg).unwrap();
    let cfg = c.apply(cfg);
    sc.candidates
        .streamlines
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            evaluate_streamline(s, &masks, &sc.peaks, &cfg, EvaluationMode::Fast)
                .0
                .accepted
        })
        .map(|(i, _)| i)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn evaluation_equals_the_recomposed_checks(seed in any::<u64>(), cfg in config(), full in any::<bool>()) {
        let sc = scene(seed);
        let masks = prepare_masks(&sc.wm, &sc.gm, &sc.brain, &cfg).unwrap();
        let mode = if full { EvaluationMode::Full } else { EvaluationMode::Fast };
        for c in Criterion::ALL {
            let (accepted, report) = evaluate(&sc.candidates, &masks, &sc.peaks, &cfg, c, mode).unwrap();
            let expected: Vec<Streamline> =
                sc.candidates.streamlines.iter().filter_map(|s| recomposed(s, &sc, &cfg, c)).collect();
            prop_assert_eq!(&accepted.streamlines, &expected);
            prop_assert_eq!(report.accepted + report.rejected, report.total);
            prop_assert_eq!(report.accepted, expected.len());
        }
    }

    #[test]
    fn connectivity_only_removes_streamlines(seed in any::<u64>(), cfg in config()) {
        let sc = scene(seed);
        for (adg, adgc) in [(Criterion::AdgB, Criterion::AdgcB), (Criterion::AdgR, Criterion::AdgcR)] {
            prop_assert!(accepted_indices(&sc, &cfg, adgc).is_subset(&accepted_indices(&sc, &cfg, adg)));
        }
    }

    #[test]
    fn relaxing_thresholds_never_rejects_more(
        seed in any::<u64>(),
        cfg in config(),
        loosen in [0.0..5.0f64, 0.0..30.0, 0.0..60.0, 0.0..15.0, 0.0..0.3, 0.0..0.2],
        extra_dilation in 0usize..2,
    ) {
        let sc = scene(seed);
        let relaxed = CriteriaConfig {
            length_min_mm: (cfg.length_min_mm - loosen[0]).max(0.0),
            length_max_mm: cfg.length_max_mm + loosen[1],
            winding_max_deg: cfg.winding_max_deg + loosen[2],
            loa_max_angle_deg: cfg.loa_max_angle_deg + loosen[3],
            loa_compliance_ratio: (cfg.loa_compliance_ratio - loosen[4]).max(0.05),
            wm_ratio: (cfg.wm_ratio - loosen[5]).max(0.05),
            mask_dilate_iterations: cfg.mask_dilate_iterations + extra_dilation,
            ..cfg.clone()
        };
        for c in Criterion::ALL {
            prop_assert!(accepted_indices(&sc, &cfg, c).is_subset(&accepted_indices(&sc, &relaxed, c)));
        }
    }

    #[test]
    fn binary_wm_rule_is_at_least_as_strict_as_a_full_ratio(seed in any::<u64>(), cfg in config()) {
        let sc = scene(seed);
        let ratio_one = CriteriaConfig { wm_ratio: 1.0, wm_mode: WmMode::Ratio, ..cfg.clone() };
        prop_assert_eq!(accepted_indices(&sc, &cfg, Criterion::AdgB), accepted_indices(&sc, &ratio_one, Criterion::AdgR));
    }
}

// ----- sampler -----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sampling_depends_only_on_the_seed(
        seeds in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 3), 2..8),
        bandwidth in 0.2..1.5f64,
        seed in any::<u64>(),
    ) {
        let p = ParzenDensity::new(&seeds, bandwidth).unwrap();
        let q = fit_proposal(&seeds, bandwidth, 1.5).unwrap();
        let ln_k = estimate_ln_k(&p, &q, 2000, 1.2, &mut rng::stream(seed, &[1])).unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| rejection_sample(&p, &q, ln_k, 64, 100_000, seed, &[2]).unwrap())
        };
        let (a, stats_a) = run(1);
        let (b, stats_b) = run(3);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(stats_a, stats_b);
        let (c, _) = rejection_sample(&p, &q, ln_k, 64, 100_000, seed.wrapping_add(1), &[2]).unwrap();
        prop_assert_ne!(a, c);
    }
}
