mod common;

use common::{random_mat, retrieval_instance, rng, tensor, value, Mat};
use pivl_core::eval::{compute_cmc_map, part_consistency_probe, CellFeatures, EmbeddingGallery};
use pivl_core::losses::{clip_pair_loss, dense_part_contrastive, i2tce, sample_cells, triplet_batch_hard};
use pivl_core::pipeline::{augment, pk_sample, stage2_lr, AugmentConfig};
use pivl_core::rng::rng_for;
use pivl_core::synthgen::{downsample_parsing, generate_dataset, IGNORE};
use pivl_core::SynthConfig;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

fn gallery(rows: &Mat, ids: &[usize], cams: &[usize]) -> EmbeddingGallery {
    EmbeddingGallery::new(rows.concat(), rows[0].len(), ids.to_vec(), cams.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cmc_is_monotone_and_map_is_mean_ap(seed in any::<u64>()) {
        let (q, qid, qcam, g, gid, gcam) = retrieval_instance(seed);
        let rep = compute_cmc_map(&gallery(&q, &qid, &qcam), &gallery(&g, &gid, &gcam)).unwrap();
        for w in rep.cmc.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert!(rep.cmc.iter().all(|&c| (0.0..=1.0).contains(&c)));
        let mean = rep.aps.iter().sum::<f64>() / rep.aps.len() as f64;
        prop_assert!((rep.map - mean).abs() < 1e-15);
    }

    #[test]
    fn cmc_map_matches_enumeration(seed in any::<u64>()) {
        let (q, qid, qcam, g, gid, gcam) = retrieval_instance(seed);
        let rep = compute_cmc_map(&gallery(&q, &qid, &qcam), &gallery(&g, &gid, &gcam)).unwrap();
        let (cmc, map, aps) = common::cmc_map(&q, &qid, &qcam, &g, &gid, &gcam);
        prop_assert_eq!(rep.cmc, cmc);
        prop_assert_eq!(rep.aps, aps);
        prop_assert_eq!(rep.map, map);
    }

    #[test]
    fn same_camera_same_identity_rows_are_invisible(seed in any::<u64>(), extra in 1usize..4) {
        let (q, qid, qcam, mut g, mut gid, mut gcam) = retrieval_instance(seed);
        let qg = gallery(&q, &qid, &qcam);
        let before = compute_cmc_map(&qg, &gallery(&g, &gid, &gcam)).unwrap();
        let mut r = rng(seed ^ 0x5eed);
        let target = r.gen_range(0..q.len());
        for _ in 0..extra {
            // a near-copy of the query would rank first if it were not filtered
            let row: Vec<f64> = q[target].iter().map(|x| x * 1.5).collect();
            let at = r.gen_range(0..=g.len());
            g.insert(at, row);
            gid.insert(at, qid[target]);
            gcam.insert(at, qcam[target]);
        }
        let after = compute_cmc_map(&qg, &gallery(&g, &gid, &gcam)).unwrap();
        for i in 0..q.len() {
            if qid[i] == qid[target] && qcam[i] == qcam[target] {
                prop_assert_eq!(before.aps[i], after.aps[i]);
            }
        }
        let only: Vec<usize> = (0..q.len()).filter(|&i| qid[i] == qid[target]).collect();
        let sub_q: Mat = only.iter().map(|&i| q[i].clone()).collect();
        let sub = gallery(&sub_q, &vec![qid[target]; only.len()], &vec![qcam[target]; only.len()]);
        let g_before: Vec<usize> = (0..g.len()).filter(|&j| !(gid[j] == qid[target] && gcam[j] == qcam[target])).collect();
        let trimmed = gallery(
            &g_before.iter().map(|&j| g[j].clone()).collect::<Mat>(),
            &g_before.iter().map(|&j| gid[j]).collect::<Vec<_>>(),
            &g_before.iter().map(|&j| gcam[j]).collect::<Vec<_>>(),
        );
        let full = compute_cmc_map(&sub, &gallery(&g, &gid, &gcam)).unwrap();
        let pruned = compute_cmc_map(&sub, &trimmed).unwrap();
        prop_assert_eq!(full.map, pruned.map);
        prop_assert_eq!(&full.cmc[..pruned.cmc.len()], &pruned.cmc[..]);
    }

    #[test]
    fn contrastive_losses_are_nonnegative_and_permutation_invariant(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let mut r = rng(seed);
        let ids: Vec<usize> = (0..8).map(|i| i / 2).collect();
        let img = random_mat(8, 5, &mut r);
        let txt = random_mat(8, 5, &mut r);
        let base = value(&clip_pair_loss(&tensor(&img), &tensor(&txt), &ids, 0.1).unwrap());
        prop_assert!(base >= 0.0);

        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut r);
        let p = |m: &Mat| -> Mat { perm.iter().map(|&i| m[i].clone()).collect() };
        let pids: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
        let permuted = value(&clip_pair_loss(&tensor(&p(&img)), &tensor(&p(&txt)), &pids, 0.1).unwrap());
        prop_assert!((base - permuted).abs() < 1e-9);

        let scaled: Mat = img.iter().map(|row| row.iter().map(|x| x * scale).collect()).collect();
        let rescaled = value(&clip_pair_loss(&tensor(&scaled), &tensor(&txt), &ids, 0.1).unwrap());
        prop_assert!((base - rescaled).abs() < 1e-9);

        let tri = value(&triplet_batch_hard(&tensor(&img), &ids, 0.3).unwrap());
        let tri_p = value(&triplet_batch_hard(&tensor(&p(&scaled)), &pids, 0.3).unwrap());
        prop_assert!(tri >= 0.0);
        prop_assert!((tri - tri_p).abs() < 1e-9);

        let keys: Vec<(usize, u8)> = (0..8).map(|i| (i / 4, (i % 2) as u8)).collect();
        let pkeys: Vec<(usize, u8)> = perm.iter().map(|&i| keys[i]).collect();
        let d = value(&dense_part_contrastive(&tensor(&img), &tensor(&txt), &keys, 0.1).unwrap());
        let dp = value(&dense_part_contrastive(&tensor(&p(&scaled)), &tensor(&p(&txt)), &pkeys, 0.1).unwrap());
        prop_assert!(d >= 0.0);
        prop_assert!((d - dp).abs() < 1e-9);

        let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let classes = random_mat(3, 5, &mut r);
        let ce = value(&i2tce(&tensor(&img), &tensor(&classes), &labels, 0.1, 10.0).unwrap());
        let ce_s = value(&i2tce(&tensor(&scaled), &tensor(&classes), &labels, 0.1, 10.0).unwrap());
        prop_assert!(ce >= 0.0);
        prop_assert!((ce - ce_s).abs() < 1e-9);
    }

    #[test]
    fn sampled_cells_are_sorted_valid_and_bounded(
        grid in proptest::collection::vec(prop_oneof![Just(IGNORE), 0u8..5], 1..80),
        budget in 0usize..100,
        seed in any::<u64>(),
    ) {
        let picked = sample_cells(&grid, budget, &mut rng_for(seed, &[1]));
        let valid = grid.iter().filter(|&&p| p != IGNORE).count();
        prop_assert_eq!(picked.len(), budget.min(valid));
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(picked.iter().all(|&i| grid[i] != IGNORE));
    }

    #[test]
    fn stage2_schedule_never_rises_after_warmup(epochs in 1usize..60, frac in 0.0f64..0.5) {
        let warm = (frac * epochs as f64).ceil() as usize;
        let lrs: Vec<f64> = (0..epochs).map(|e| stage2_lr(1.0, e, epochs, frac, &[1.0 / 3.0, 7.0 / 12.0], 0.1)).collect();
        for e in warm + 1..epochs {
            prop_assert!(lrs[e] <= lrs[e - 1] + 1e-15);
        }
        prop_assert!(lrs.iter().all(|&l| l > 0.0 && l <= 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn probe_is_deterministic(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = 60;
        let rows: Vec<f64> = (0..n * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let cells = CellFeatures {
            dim: 3,
            rows,
            parts: (0..n).map(|i| (i % 3) as u8).collect(),
            identities: (0..n).map(|i| i / 20).collect(),
            images: (0..n).map(|i| i / 6).collect(),
        };
        let a = part_consistency_probe(&cells, 5, 1.0, seed).unwrap();
        let b = part_consistency_probe(&cells, 5, 1.0, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pk_batches_and_augmentation_keep_geometry(seed in any::<u64>()) {
        let cfg = SynthConfig { train_identities: 6, test_identities: 3, instances_per_identity: 3, ..SynthConfig::default() };
        let data = generate_dataset(&cfg, seed % 4).unwrap();
        let mut r = rng_for(seed, &[2]);
        let bundle = pk_sample(&data.train, 4, 2, &mut r).unwrap();
        prop_assert_eq!(bundle.indices.len(), 8);
        let mut distinct = bundle.identities.clone();
        distinct.dedup();
        prop_assert_eq!(distinct.len(), 4);
        for (&i, &y) in bundle.indices.iter().zip(&bundle.identities) {
            prop_assert_eq!(data.train[i].identity, y);
        }
        for &i in &bundle.indices {
            let s = &data.train[i];
            let a = augment(s, &AugmentConfig::default(), &mut r);
            prop_assert_eq!((a.height, a.width), (s.height, s.width));
            prop_assert_eq!(a.image.len(), s.image.len());
            prop_assert!(a.parsing.iter().all(|&p| p == IGNORE || (p as usize) < cfg.num_parts));
            let grid = downsample_parsing(&a.parsing, a.height, a.width, 8).unwrap();
            prop_assert_eq!(grid.len(), (a.height / 8) * (a.width / 8));
        }
    }
}
