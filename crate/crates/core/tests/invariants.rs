use std::collections::BTreeSet;

use detailclip::bank::{read_bank_from, write_bank_to, BankKind, FeatureBank, ImageEntry, TextEntry};
use detailclip::cover::{covers, generate_cc, table_per_axis, CoverConfig, ObjectBox, PatchBox};
use detailclip::retrieval::{
    evaluate, filter_by_rmax, recall_at_k, score_images, ClassQuery, Features, HistConfig, ImageRecord, QuerySet,
    SourceTag,
};
use detailclip::synth::{SceneSpec, Split};
use proptest::prelude::*;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-6 {
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        return e;
    }
    v.into_iter().map(|x| x / n).collect()
}

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_map(unit)
}

/// Multi-row images with ids 0..n over dimension `d`.
fn images(d: usize, n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<ImageRecord>> {
    prop::collection::vec(prop::collection::vec(unit_vec(d), 1..5), n).prop_map(|imgs| {
        imgs.into_iter()
            .enumerate()
            .map(|(i, rows)| ImageRecord { image_id: i as u64, features: Features::Multi(rows), source: SourceTag::Cc })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn table_cover_counts_and_bounds(a in 16u32..600, k in 1u32..=15) {
        let set = generate_cc(&CoverConfig::table(a, k)).unwrap();
        let per_axis = table_per_axis(k).unwrap();
        let expected: usize = per_axis.iter().map(|&n| (n * n) as usize).sum();
        prop_assert_eq!(set.len(), expected);
        prop_assert_eq!(set.per_level_counts.len(), per_axis.len());
        for p in &set.patches {
            prop_assert!(p.x0 < p.x1 && p.y0 < p.y1 && p.x1 <= a && p.y1 <= a);
            prop_assert_eq!(p.width(), p.height());
        }
    }

    #[test]
    fn cover_predicate_implies_containment(
        p in (0u32..100, 0u32..100, 1u32..100, 1u32..100),
        o in (0u32..150, 0u32..150, 1u32..100, 1u32..100),
        k in 1u32..12,
    ) {
        let patch = PatchBox::new(p.0, p.1, p.0 + p.2, p.1 + p.3, 1);
        let obj = ObjectBox::new(o.0, o.1, o.0 + o.2, o.1 + o.3, 0);
        if covers(&patch, &obj, k).unwrap() {
            prop_assert!(obj.x0 >= patch.x0 && obj.y0 >= patch.y0 && obj.x1 <= patch.x1 && obj.y1 <= patch.y1);
            prop_assert!(obj.area() * (k as u64).pow(2) > patch.area());
        }
        // a larger k never un-covers
        if covers(&patch, &obj, k).unwrap() {
            prop_assert!(covers(&patch, &obj, k + 1).unwrap());
        }
    }

    #[test]
    fn provable_cover_guarantee_holds_at_stride(a in 24u32..80, k in 2u32..5) {
        let set = generate_cc(&CoverConfig::provable(a, k)).unwrap();
        let m = set.min_covered_side.unwrap();
        let r = detailclip::cover::verify_cover(&set, k, m, 3).unwrap();
        prop_assert!(r.is_complete(), "a={a} k={k} m={m}: {:?}", r.uncovered.first());
    }

    #[test]
    fn recall_monotone_in_k(
        imgs in images(6, 3..30),
        q in unit_vec(6),
        picks in prop::collection::btree_set(0u64..30, 1..6),
    ) {
        let relevant: BTreeSet<u64> = picks.into_iter().filter(|&i| (i as usize) < imgs.len()).collect();
        prop_assume!(!relevant.is_empty());
        let ranked = score_images(&q, &imgs).unwrap();
        let mut prev = 0.0;
        for k in 1..6 {
            let r = recall_at_k(&ranked, &relevant, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(r >= prev);
            prev = r;
        }
        // every relevant image is found once n*k reaches the ranking length
        prop_assert_eq!(recall_at_k(&ranked, &relevant, imgs.len()).unwrap(), 1.0);
    }

    #[test]
    fn single_row_multi_ranks_like_single(vs in prop::collection::vec(unit_vec(5), 1..25), q in unit_vec(5)) {
        let single: Vec<ImageRecord> = vs.iter().enumerate()
            .map(|(i, v)| ImageRecord { image_id: i as u64, features: Features::Single(v.clone()), source: SourceTag::FullImage })
            .collect();
        let multi: Vec<ImageRecord> = vs.iter().enumerate()
            .map(|(i, v)| ImageRecord { image_id: i as u64, features: Features::Multi(vec![v.clone()]), source: SourceTag::Cc })
            .collect();
        prop_assert_eq!(score_images(&q, &single).unwrap(), score_images(&q, &multi).unwrap());
    }

    #[test]
    fn ranking_sorted_with_id_tiebreak(imgs in images(3, 1..20), q in unit_vec(3)) {
        let ranked = score_images(&q, &imgs).unwrap();
        prop_assert_eq!(ranked.len(), imgs.len());
        for w in ranked.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
    }

    #[test]
    fn evaluation_ignores_image_order(
        imgs in images(4, 4..20),
        qs in prop::collection::vec((unit_vec(4), prop::collection::btree_set(0u64..20, 1..4)), 1..5),
        seed in any::<u64>(),
    ) {
        let n = imgs.len() as u64;
        let queries = QuerySet {
            queries: qs.into_iter().enumerate().filter_map(|(c, (f, rel))| {
                let relevant: BTreeSet<u64> = rel.into_iter().filter(|&i| i < n).collect();
                (!relevant.is_empty()).then(|| ClassQuery { class_id: c as u32, name: format!("c{c}"), feature: f, relevant })
            }).collect(),
        };
        prop_assume!(!queries.queries.is_empty());
        let mut shuffled = imgs.clone();
        let len = shuffled.len();
        for i in 0..len {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 1) % len as u64) as usize);
        }
        let a = evaluate("p", &imgs, &queries, &[1, 2, 3], HistConfig::default()).unwrap();
        let b = evaluate("p", &shuffled, &queries, &[1, 2, 3], HistConfig::default()).unwrap();
        prop_assert_eq!(&a.report, &b.report);
        prop_assert_eq!(&a.histogram.positive, &b.histogram.positive);
        prop_assert_eq!(&a.histogram.negative, &b.histogram.negative);
        // one histogram entry per (query, image) pair
        prop_assert_eq!(a.histogram.total(), (queries.queries.len() * imgs.len()) as u64);
    }

    #[test]
    fn histogram_bins_monotone(s in -1.0f64..1.0, t in -1.0f64..1.0, bins in 1usize..64) {
        let h = HistConfig { bins, min_value: 1e-3 };
        let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
        prop_assert!(h.bin(lo) <= h.bin(hi));
        prop_assert!(h.bin(hi) < bins);
    }

    #[test]
    fn rmax_filter_matches_brute_force(
        sides in prop::collection::vec(prop::collection::vec(1u32..100, 1..4), 1..20),
        thr in 0.01f64..=1.0,
    ) {
        let scenes: Vec<SceneSpec> = sides.iter().enumerate().map(|(i, objs)| SceneSpec {
            image_id: i as u64,
            side: 100,
            objects: objs.iter().map(|&s| ObjectBox::square(0, 0, s, 0)).collect(),
            split: Split::Test,
        }).collect();
        let kept: Vec<u64> = filter_by_rmax(&scenes, thr).unwrap().iter().map(|s| s.image_id).collect();
        let brute: Vec<u64> = sides.iter().enumerate()
            .filter(|(_, objs)| objs.iter().all(|&s| (s * s) as f64 / 10_000.0 <= thr))
            .map(|(i, _)| i as u64)
            .collect();
        prop_assert_eq!(kept, brute);
    }

    #[test]
    fn bank_round_trip(
        d in 1usize..8,
        rows in prop::collection::vec(1usize..5, 0..6),
        seed in any::<u32>(),
        kind_single in any::<bool>(),
    ) {
        let kind = if kind_single { BankKind::ImageSingle } else { BankKind::ImagePatches };
        let mut bank = FeatureBank::new_images(d, kind);
        for (i, &r) in rows.iter().enumerate() {
            let r = if kind_single { 1 } else { r };
            let feats: Vec<Vec<f64>> = (0..r)
                .map(|j| unit((0..d).map(|t| ((seed as usize + 7 * i + 3 * j + t) % 11) as f64 - 5.0).collect()))
                .collect();
            let boxes = (0..r).map(|j| [0.0, 0.0, 1.0 / (j + 1) as f64, 1.0]).collect();
            bank.images.push(ImageEntry::from_f64(i as u64 * 3 + seed as u64, boxes, &feats));
        }
        let mut buf = Vec::new();
        write_bank_to(&bank, &mut buf).unwrap();
        prop_assert_eq!(buf.len() as u64, 24 + bank.images.iter().map(|e| detailclip::bank::image_record_bytes(e.num_rows(), d)).sum::<u64>());
        let back = read_bank_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back, bank);
    }

    #[test]
    fn text_bank_round_trip(names in prop::collection::vec("[a-z ]{0,12}", 0..6), d in 1usize..6) {
        let mut bank = FeatureBank::new_texts(d);
        for (i, name) in names.iter().enumerate() {
            let f = unit((0..d).map(|t| (i + t) as f64 + 0.5).collect());
            bank.texts.push(TextEntry { class_id: i as u32, name: name.clone(), feature: f.iter().map(|&x| x as f32).collect() });
        }
        let mut buf = Vec::new();
        write_bank_to(&bank, &mut buf).unwrap();
        prop_assert_eq!(read_bank_from(buf.as_slice()).unwrap(), bank);
    }

    #[test]
    fn truncated_bank_is_rejected(cut in 1usize..60) {
        let mut bank = FeatureBank::new_images(3, BankKind::ImagePatches);
        bank.images.push(ImageEntry::from_f64(1, vec![[0.0; 4]; 2], &[unit(vec![1.0, 2.0, 3.0]), unit(vec![3.0, 2.0, 1.0])]));
        let mut buf = Vec::new();
        write_bank_to(&bank, &mut buf).unwrap();
        let cut = cut.min(buf.len() - 1);
        prop_assert!(read_bank_from(&buf[..buf.len() - cut]).is_err());
    }
}
