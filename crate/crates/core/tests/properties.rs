use proptest::prelude::*;

use simplace::eval::{aggregate, FrameReport, IouAggregation, IouCounts, MethodScore};
use simplace::fusion::{Coverages, OmegaClamp};
use simplace::io::{read_label_grid, write_label_grid};
use simplace::manifest::ClassSchema;
use simplace::prior::{ClassStats, CoverageVector, TemplatePrior};
use simplace::retrieval::{DescriptorIndex, GeoExclusion, GeoTag};
use simplace::{
    build_template, class_coverage, class_iou, class_std, compute_tempering, cosine_distance, fuse,
    posterior_update, read_descriptor, read_logit_map, retrieve_similar, write_logit_map,
    ClassGrid, Descriptor, FusionConfig, LabelGrid, LogitMap, Method, PosteriorMode, UpdateScope,
};

fn logit_map(h: usize, w: usize, nc: usize) -> impl Strategy<Value = LogitMap<f64>> {
    prop::collection::vec(-8.0f64..8.0, h * w * nc)
        .prop_map(move |v| LogitMap::new(h, w, nc, v).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..7, 1usize..7, 2usize..6)
}

fn coverage(nc: usize) -> impl Strategy<Value = CoverageVector<f64>> {
    prop::collection::vec(0u32..10, nc).prop_map(|c| {
        let total = c.iter().sum::<u32>().max(1) as f64;
        CoverageVector { coverage: c.iter().map(|&x| x as f64 / total).collect() }
    })
}

#[derive(Debug, Clone)]
struct FuseInputs {
    query: LogitMap<f64>,
    template: TemplatePrior<f64>,
    stats_q: ClassStats<f64>,
    stats_s: ClassStats<f64>,
    coverages: Coverages<f64>,
}

fn fuse_inputs() -> impl Strategy<Value = FuseInputs> {
    dims().prop_flat_map(|(h, w, nc)| {
        (
            logit_map(h, w, nc),
            logit_map(h, w, nc),
            prop::collection::vec(0.05f64..3.0, nc),
            prop::collection::vec(0.05f64..3.0, nc),
            coverage(nc),
            coverage(nc),
            coverage(nc),
        )
            .prop_map(|(q, s, sq, ss, cq, ck, cl)| FuseInputs {
                query: q,
                template: TemplatePrior { mean_logits: s, source_ids: vec!["t".into()] },
                stats_q: ClassStats { support: vec![0; sq.len()], sigma: sq },
                stats_s: ClassStats { support: vec![0; ss.len()], sigma: ss },
                coverages: Coverages { query: cq, template: ck, set: cl },
            })
    })
}

fn run(i: &FuseInputs, template: &TemplatePrior<f64>, cfg: &FusionConfig<f64>) -> simplace::FusedResult<f64> {
    fuse(&i.query, template, &i.stats_q, &i.stats_s, &i.coverages, cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn conjugate_mean_lies_between_inputs(
        xq in -20.0f64..20.0, xs in -20.0f64..20.0,
        sq in 1e-3f64..10.0, ss in 1e-3f64..10.0, omega in 1e-3f64..1e3,
    ) {
        let (m, v) = posterior_update(xq, sq, xs, ss, omega, PosteriorMode::Conjugate);
        let slack = 1e-12 * xq.abs().max(xs.abs()).max(1.0);
        prop_assert!(m >= xq.min(xs) - slack && m <= xq.max(xs) + slack);
        prop_assert!(v > 0.0 && v <= sq * sq);
    }

    #[test]
    fn out_of_mask_cells_are_query_bits(inputs in fuse_inputs(), road in 0usize..2) {
        let cfg = FusionConfig { road_class: road, ..FusionConfig::default() };
        let out = run(&inputs, &inputs.template, &cfg);
        let nc = inputs.query.num_classes();
        for (p, &inside) in out.candidate_mask.bits().iter().enumerate() {
            if !inside {
                let got = &out.fused_logits.values()[p * nc..(p + 1) * nc];
                let want = inputs.query.pixel_flat(p);
                prop_assert!(got.iter().zip(want).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
        prop_assert_eq!(out.prediction, out.fused_logits.argmax());
    }

    #[test]
    fn identical_template_is_a_fixed_point(inputs in fuse_inputs(), all in any::<bool>()) {
        let template = TemplatePrior { mean_logits: inputs.query.clone(), source_ids: vec!["q".into()] };
        let cfg = FusionConfig {
            update_scope: if all { UpdateScope::AllPixels } else { UpdateScope::RoadCandidates },
            ..FusionConfig::default()
        };
        let out = run(&inputs, &template, &cfg);
        prop_assert_eq!(out.prediction, inputs.query.argmax());
    }

    #[test]
    fn fusion_is_deterministic(inputs in fuse_inputs()) {
        let cfg = FusionConfig::default();
        let a = run(&inputs, &inputs.template, &cfg);
        let b = run(&inputs, &inputs.template, &cfg);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn widest_prior_returns_the_query(inputs in fuse_inputs()) {
        // Query coverage equal to the set coverage drives every omega to the maximum.
        let mut inputs = inputs;
        inputs.coverages.set = inputs.coverages.query.clone();
        let cfg = FusionConfig { update_scope: UpdateScope::AllPixels, ..FusionConfig::default() };
        let out = run(&inputs, &inputs.template, &cfg);
        prop_assert!(out.omega.iter().all(|&w| w == 1e3));
        // The pull towards the prior is at most the query/prior variance ratio.
        let nc = inputs.query.num_classes();
        let prior = inputs.template.mean_logits.values();
        for (i, (a, b)) in out.fused_logits.values().iter().zip(inputs.query.values()).enumerate() {
            let n = i % nc;
            let ratio = (inputs.stats_q.sigma[n] / (1e3 * inputs.stats_s.sigma[n])).powi(2);
            prop_assert!((a - b).abs() <= (prior[i] - b).abs() * ratio * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn omega_decreases_with_query_inconsistency(
        num in 0.01f64..0.5, d1 in 0.01f64..0.5, extra in 0.01f64..0.5,
    ) {
        let clamp = OmegaClamp { min: 1e-9, max: 1e9 };
        let c_ell = CoverageVector { coverage: vec![0.5, 0.5] };
        let c_k = CoverageVector { coverage: vec![0.5 - num, 0.5] };
        let near = CoverageVector { coverage: vec![0.5 + d1, 0.5] };
        let far = CoverageVector { coverage: vec![0.5 + d1 + extra, 0.5] };
        let w_near = compute_tempering(&near, &c_k, &c_ell, clamp).unwrap()[0];
        let w_far = compute_tempering(&far, &c_k, &c_ell, clamp).unwrap()[0];
        prop_assert!(w_far < w_near);
    }

    #[test]
    fn template_is_linear(
        maps in (1usize..5, 1usize..5, 2usize..4)
            .prop_flat_map(|(h, w, nc)| prop::collection::vec(logit_map(h, w, nc), 1..5)),
        a in -2.0f64..2.0,
    ) {
        let (h, w, nc) = maps[0].dims();
        let scaled: Vec<LogitMap<f64>> = maps
            .iter()
            .map(|m| LogitMap::new(h, w, nc, m.values().iter().map(|v| a * v).collect()).unwrap())
            .collect();
        let ids: Vec<String> = (0..maps.len()).map(|i| format!("r{i}")).collect();
        let src = |ms: &'_ [LogitMap<f64>]| -> Vec<(String, LogitMap<f64>)> {
            ids.iter().cloned().zip(ms.iter().cloned()).collect()
        };
        let plain = src(&maps);
        let times = src(&scaled);
        let refs = |v: &'_ [(String, LogitMap<f64>)]| build_template(&v.iter().map(|(i, m)| (i.as_str(), m)).collect::<Vec<_>>(), h, w).unwrap();
        let t = refs(&plain);
        let ta = refs(&times);
        for (x, y) in t.mean_logits.values().iter().zip(ta.mean_logits.values()) {
            prop_assert!((a * x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn coverage_sums_to_one(map in dims().prop_flat_map(|(h, w, nc)| logit_map(h, w, nc))) {
        let cov = class_coverage(&map);
        prop_assert!((cov.sum() - 1.0).abs() < 1e-12);
        prop_assert!(cov.coverage.iter().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn class_std_ignores_pixel_order(
        (map, perm) in dims().prop_flat_map(|(h, w, nc)| {
            (logit_map(h, w, nc), Just((0..h * w).collect::<Vec<_>>()).prop_shuffle())
        }),
    ) {
        let (h, w, nc) = map.dims();
        let shuffled: Vec<f64> = perm.iter().flat_map(|&p| map.pixel_flat(p).to_vec()).collect();
        let a = class_std(&map);
        let b = class_std(&LogitMap::new(h, w, nc, shuffled).unwrap());
        prop_assert_eq!(&a.support, &b.support);
        for (x, y) in a.sigma.iter().zip(&b.sigma) {
            prop_assert!((x - y).abs() <= 1e-9 * x.max(1.0));
        }
    }

    #[test]
    fn cosine_distance_ignores_scale(
        v in prop::collection::vec(-5.0f64..5.0, 8),
        u in prop::collection::vec(-5.0f64..5.0, 8),
        f in 0.01f64..100.0,
    ) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3) && u.iter().any(|x| x.abs() > 1e-3));
        let a = Descriptor::new(v).unwrap();
        let b = Descriptor::new(u).unwrap();
        let d = cosine_distance(&a, &b).unwrap();
        let ds = cosine_distance(&a.scaled(f), &b).unwrap();
        prop_assert!((d - ds).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&d));
    }

    #[test]
    fn retrieval_never_returns_excluded_references(
        offsets in prop::collection::vec((-200.0f64..200.0, -200.0f64..200.0), 1..30),
        radius in 0.0f64..150.0,
    ) {
        let q = GeoTag::new(47.0, 8.0);
        let items: Vec<(String, Descriptor<f64>, Option<GeoTag>)> = offsets
            .iter()
            .enumerate()
            .map(|(i, &(n, e))| {
                let geo = GeoTag::new(47.0 + n / 111_195.0, 8.0 + e / 75_800.0);
                (format!("r{i:02}"), Descriptor::new(vec![1.0, i as f64]).unwrap(), Some(geo))
            })
            .collect();
        let eligible = items.iter().filter(|(_, _, g)| q.distance_m(g.as_ref().unwrap()) > radius).count();
        let index = DescriptorIndex::from_descriptors(items.clone()).unwrap();
        let query = Descriptor::new(vec![1.0, 0.0]).unwrap();
        match retrieve_similar(&index, "q", &query, items.len(), &GeoExclusion::around(Some(q), radius)) {
            Ok(r) => {
                prop_assert_eq!(r.len(), eligible);
                for n in &r.ranked {
                    let g = items.iter().find(|x| x.0 == n.id).unwrap().2.unwrap();
                    prop_assert!(q.distance_m(&g) > radius);
                }
                prop_assert!(r.ranked.windows(2).all(|w| (w[0].distance, &w[0].id) <= (w[1].distance, &w[1].id)));
            }
            Err(_) => prop_assert_eq!(eligible, 0),
        }
    }

    #[test]
    fn iou_unchanged_by_relabelling_other_classes(
        px in prop::collection::vec((0u8..4, 0u8..5), 1..64),
        perm in Just(vec![1u8, 2, 3]).prop_shuffle(),
    ) {
        let n = px.len();
        let to_gt = |g: u8| if g == 4 { 255 } else { g };
        let relabel = |c: u8| if c == 0 || c == 255 { c } else { perm[c as usize - 1] };
        let pred: Vec<u8> = px.iter().map(|p| p.0).collect();
        let gt: Vec<u8> = px.iter().map(|p| to_gt(p.1)).collect();
        let a = class_iou(&ClassGrid::new(1, n, pred.clone()).unwrap(), &LabelGrid::new(1, n, gt.clone(), 4, 255).unwrap(), 0, 255).unwrap();
        let pred2: Vec<u8> = pred.iter().map(|&c| relabel(c)).collect();
        let gt2: Vec<u8> = gt.iter().map(|&c| relabel(c)).collect();
        let b = class_iou(&ClassGrid::new(1, n, pred2).unwrap(), &LabelGrid::new(1, n, gt2, 4, 255).unwrap(), 0, 255).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn marking_undefined_never_grows_the_union(
        px in prop::collection::vec((0u8..3, 0u8..3), 1..64),
        hide in any::<prop::sample::Index>(),
    ) {
        let n = px.len();
        let pred = ClassGrid::new(1, n, px.iter().map(|p| p.0).collect()).unwrap();
        let gt: Vec<u8> = px.iter().map(|p| p.1).collect();
        let mut hidden = gt.clone();
        hidden[hide.index(n)] = 255;
        let before = simplace::eval::iou_counts(&pred, &LabelGrid::new(1, n, gt, 3, 255).unwrap(), 0, 255).unwrap();
        let after = simplace::eval::iou_counts(&pred, &LabelGrid::new(1, n, hidden, 3, 255).unwrap(), 0, 255).unwrap();
        prop_assert!(after.union <= before.union);
        prop_assert!(after.intersection <= before.intersection);
    }

    #[test]
    fn aggregation_ignores_frame_order(
        frames in prop::collection::vec((0usize..20, 0usize..20, any::<bool>()), 1..12)
            .prop_flat_map(|f| { let n = f.len(); (Just(f), Just((0..n).collect::<Vec<_>>()).prop_shuffle()) }),
        pooled in any::<bool>(),
    ) {
        let (frames, perm) = frames;
        let reports: Vec<FrameReport> = frames
            .iter()
            .enumerate()
            .map(|(i, &(inter, extra, night))| FrameReport {
                id: format!("f{i}"),
                condition: if night { "night".into() } else { "snow".into() },
                scores: [(Method::Query, Some(MethodScore { counts: IouCounts { intersection: inter, union: inter + extra } }))].into(),
                retrieved: Vec::new(),
            })
            .collect();
        let shuffled: Vec<FrameReport> = perm.iter().map(|&i| reports[i].clone()).collect();
        let agg = if pooled { IouAggregation::PixelPooled } else { IouAggregation::PerFrame };
        prop_assert_eq!(aggregate(&reports, agg), aggregate(&shuffled, agg));
    }

    #[test]
    fn logits_round_trip(map in dims().prop_flat_map(|(h, w, nc)| {
        prop::collection::vec(-1e6f32..1e6, h * w * nc).prop_map(move |v| LogitMap::new(h, w, nc, v).unwrap())
    })) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.npy");
        write_logit_map(&map, &path).unwrap();
        let back: LogitMap<f32> = read_logit_map(&path).unwrap();
        prop_assert_eq!(back, map);
    }

    #[test]
    fn labels_and_descriptors_round_trip(
        (h, w, ids) in (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(prop_oneof![0u8..19, Just(255u8)], h * w))
        }),
        desc in prop::collection::vec(-10.0f32..10.0, 1..64),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let schema = ClassSchema {
            classes: (0..19).map(|i| format!("c{i}")).collect(),
            road_class: "c0".into(),
            undefined_id: 255,
        };
        let grid = LabelGrid::new(h, w, ids, 19, 255).unwrap();
        let lp = dir.path().join("l.npy");
        write_label_grid(&grid, &lp).unwrap();
        prop_assert_eq!(read_label_grid(&lp, &schema).unwrap(), grid);
        let d = Descriptor::new(desc).unwrap();
        let dp = dir.path().join("d.npy");
        simplace::io::write_descriptor(&d, &dp).unwrap();
        prop_assert_eq!(read_descriptor::<f32>(&dp).unwrap(), d);
    }
}

#[test]
fn variance_sum_posterior_is_not_a_weighted_average() {
    // Weights 1/(sq^2 (sq^2 + (w ss)^2)) and 1/((w ss)^2 (sq^2 + (w ss)^2))
    // sum to 1/(sq^2 (w ss)^2), so equal inputs are scaled, not preserved.
    let (m, _) = posterior_update(3.0f64, 2.0, 3.0, 2.0, 1.0, PosteriorMode::AsPublished);
    assert!((m - 3.0 / 16.0).abs() < 1e-15);
    let (m, _) = posterior_update(3.0f64, 1.0, 3.0, 1.0, 1.0, PosteriorMode::AsPublished);
    assert!((m - 3.0).abs() < 1e-15);
}
