use mfnet_core::attention::{class_prototype, combine_scales, init_relation, relation_weights, relational_modulate};
use mfnet_core::episodes::{
    build_fold_split, remap_labels, sample_episode, synth_shapes, ClassId, EpisodeMode, LabelMask, SynthConfig,
};
use mfnet_core::features::{masked_global_pool, multiscale_query, FeatureMap, Prototype};
use mfnet_core::losses::{build_pools, focal_seg_loss, focal_seg_loss_grad, triplet_loss, FocalConfig, PixelRef, Triplet};
use mfnet_core::metrics::{ConfusionState, Protocol};
use mfnet_core::network::{decode, QuerySupportEmbedding};
use mfnet_core::params::ParamStore;
use mfnet_core::trainer::train::poly_lr;
use mfnet_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shots(k: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<Prototype> {
    (0..k)
        .map(|i| Prototype {
            data: Tensor::randn(&[c], scale, rng),
            class_index: i,
        })
        .collect()
}

fn random_mask(h: usize, w: usize, labels: u8, rng: &mut ChaCha8Rng) -> LabelMask {
    LabelMask::new(h, w, (0..h * w).map(|_| rng.random_range(0..=labels)).collect())
}

fn random_probs(h: usize, w: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut d: Vec<f64> = (0..h * w * k).map(|_| rng.random_range(0.01..1.0)).collect();
    for px in d.chunks_mut(k) {
        let s: f64 = px.iter().sum();
        px.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::from_vec(&[h, w, k], d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn relation_rows_are_stochastic(seed in any::<u64>(), k in prop::sample::select(vec![2usize, 3, 5]),
                                    groups in 1usize..4, spread in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = groups * 4;
        let params = init_relation(c, groups, &mut rng).unwrap();
        let f = shots(k, c, spread, &mut rng);
        for r in 0..groups {
            let w = relation_weights(&f, &params, r);
            for row in w.data().chunks(k) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn scale_weights_form_a_simplex(seed in any::<u64>(), z in 1usize..5, spread in 0.1f64..30.0) {
        // one-hot transformed maps expose the per-pixel weights as output channels
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [(6, 5), (3, 3), (2, 2), (1, 1)];
        let branches: Vec<(Tensor, Tensor)> = (0..z)
            .map(|i| {
                let (h, w) = sizes[i];
                let logits = Tensor::randn(&[h, w, 1], spread, &mut rng);
                let mut t = Tensor::zeros(&[h, w, z]);
                for y in 0..h {
                    for x in 0..w {
                        t.set3(y, x, i, 1.0);
                    }
                }
                (logits, t)
            })
            .collect();
        let out = combine_scales(&branches, 6, 5);
        for px in out.data().chunks(z) {
            prop_assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(px.iter().all(|a| *a > 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scale_softmax_is_shift_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [(5, 5), (3, 3), (2, 2)];
        let branches: Vec<(Tensor, Tensor)> = sizes
            .iter()
            .map(|&(h, w)| (Tensor::randn(&[h, w, 1], 2.0, &mut rng), Tensor::randn(&[h, w, 4], 1.0, &mut rng)))
            .collect();
        let shifted: Vec<(Tensor, Tensor)> = branches.iter().map(|(a, t)| (a.map(|v| v + shift), t.clone())).collect();
        let d = combine_scales(&branches, 5, 5).max_abs_diff(&combine_scales(&shifted, 5, 5));
        prop_assert!(d < 1e-5, "{d}");
    }

    #[test]
    fn modulation_commutes_with_shot_order(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_relation(8, 2, &mut rng).unwrap();
        let f = shots(k, 8, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<Prototype> = perm.iter().map(|&i| f[i].clone()).collect();
        let a = relational_modulate(&f, &params);
        let b = relational_modulate(&permuted, &params);
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!(a[i].data.max_abs_diff(&b[j].data) < 1e-12);
        }
    }

    #[test]
    fn zero_value_weights_disable_modulation(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_relation(8, 4, &mut rng).unwrap();
        let mut zeroed = ParamStore::new();
        for (name, t) in params.iter() {
            let t = if name.contains(".wv.") { Tensor::zeros(t.shape()) } else { t.clone() };
            zeroed.insert(name.clone(), t);
        }
        params = zeroed;
        let f = shots(k, 8, 1.0, &mut rng);
        let with = class_prototype(&f, &params, true);
        let without = class_prototype(&f, &params, false);
        prop_assert!(with.data.max_abs_diff(&without.data) < 1e-15);
    }

    #[test]
    fn area_pyramid_preserves_the_mean(seed in any::<u64>(), h in 1usize..13, w in 1usize..13, z in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = FeatureMap { data: Tensor::randn(&[h, w, 3], 1.0, &mut rng), scale: 1 };
        let Ok(levels) = multiscale_query(&feat, z) else { return Ok(()) };
        for lvl in &levels {
            let (_, _, c) = lvl.data.dims3();
            prop_assert_eq!(c, 3);
            let spatial = |t: &Tensor, ch: usize| {
                let (lh, lw, _) = t.dims3();
                (0..lh * lw).map(|i| t.data()[i * 3 + ch]).sum::<f64>() / (lh * lw) as f64
            };
            for ch in 0..3 {
                prop_assert!((spatial(&lvl.data, ch) - spatial(&feat.data, ch)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn masked_pool_stays_in_the_foreground_hull(seed in any::<u64>(), h in 2usize..9, w in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = FeatureMap { data: Tensor::randn(&[h, w, 5], 1.0, &mut rng), scale: 1 };
        let mask = random_mask(h, w, 1, &mut rng);
        let pooled = masked_global_pool(&feat, &mask, 1);
        let cells: Vec<usize> = if mask.count(1) == 0 {
            (0..h * w).collect()
        } else {
            (0..h * w).filter(|&i| mask.labels[i] == 1).collect()
        };
        prop_assert_eq!(pooled.prototype.data.len(), 5);
        for ch in 0..5 {
            let vals: Vec<f64> = cells.iter().map(|&i| feat.data.data()[i * 5 + ch]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let v = pooled.prototype.data.data()[ch];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn pools_partition_every_class(seed in any::<u64>(), h in 1usize..10, w in 1usize..10, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = random_mask(h, w, n as u8, &mut rng);
        let gt = random_mask(h, w, n as u8, &mut rng);
        let pools = build_pools(&pred, &gt, n).unwrap();
        for cls in 1..=n {
            let p = &pools.per_class[cls - 1];
            let idx = |v: &[PixelRef]| v.iter().map(|r| r.index).collect::<Vec<_>>();
            let (a, hp, hn) = (idx(&p.anchors), idx(&p.hard_positives), idx(&p.hard_negatives));
            let mut union: Vec<usize> = a.iter().chain(&hp).copied().collect();
            union.sort_unstable();
            let want: Vec<usize> = (0..h * w).filter(|&i| gt.labels[i] as usize == cls).collect();
            prop_assert_eq!(union, want);
            let want_hn: Vec<usize> = (0..h * w)
                .filter(|&i| pred.labels[i] as usize == cls && gt.labels[i] as usize != cls)
                .collect();
            prop_assert_eq!(&hn, &want_hn);
            prop_assert!(a.iter().all(|i| !hp.contains(i) && !hn.contains(i)));
            prop_assert!(hp.iter().all(|i| !hn.contains(i)));
            for r in p.anchors.iter().chain(&p.hard_positives).chain(&p.hard_negatives) {
                prop_assert_eq!(r.index, r.y * w + r.x);
            }
        }
    }

    #[test]
    fn focal_is_nonnegative_and_falls_with_the_true_probability(seed in any::<u64>(), n in 1usize..4,
                                                               gamma in 0.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, k) = (4, 5, n + 1);
        let gt = random_mask(h, w, n as u8, &mut rng);
        let probs = random_probs(h, w, k, &mut rng);
        let cfg = FocalConfig { gamma, ..FocalConfig::default() };
        let (l, grad) = focal_seg_loss_grad(&probs, &gt, &cfg).unwrap();
        prop_assert!(l >= 0.0);
        let i = rng.random_range(0..h * w);
        let idx = i * k + gt.labels[i] as usize;
        let step = 1e-4;
        let mut up = probs.clone();
        up.data_mut()[idx] += step;
        prop_assert!(focal_seg_loss(&up, &gt, &cfg).unwrap() < l);
        prop_assert!(grad.data()[idx] < 0.0);
    }

    #[test]
    fn triplet_loss_ignores_common_translation(seed in any::<u64>(), t in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c) = (4, 4, 6);
        let emb = Tensor::randn(&[h, w, c], 1.0, &mut rng);
        let px = |rng: &mut ChaCha8Rng| {
            let i = rng.random_range(0..h * w);
            PixelRef { x: i % w, y: i / w, index: i }
        };
        let triplets: Vec<Triplet> = (0..t)
            .map(|_| Triplet { class: 1, anchor: px(&mut rng), hard_positive: px(&mut rng), hard_negative: px(&mut rng) })
            .collect();
        let offset: Vec<f64> = (0..c).map(|_| rng.random_range(-100.0..100.0)).collect();
        let mut moved = emb.clone();
        for (i, v) in moved.data_mut().iter_mut().enumerate() {
            *v += offset[i % c];
        }
        let (a, b) = (triplet_loss(&triplets, &emb, 1.0), triplet_loss(&triplets, &moved, 1.0));
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn upsampled_probabilities_stay_a_simplex(seed in any::<u64>(), n in 1usize..4, oh in 5usize..30, ow in 5usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 8;
        let mut params = ParamStore::new();
        let pre = format!("decoder.n{n}");
        for (name, shape) in [
            ("conv_in.weight", vec![1, 1, n * c, c]),
            ("conv_in.bias", vec![c]),
            ("res.a.weight", vec![3, 3, c, c]),
            ("res.a.bias", vec![c]),
            ("res.b.weight", vec![3, 3, c, c]),
            ("res.b.bias", vec![c]),
            ("conv_out.weight", vec![1, 1, c, n + 1]),
            ("conv_out.bias", vec![n + 1]),
        ] {
            params.insert(format!("{pre}.{name}"), Tensor::randn(&shape, 1.0, &mut rng));
        }
        let emb = QuerySupportEmbedding { data: Tensor::randn(&[4, 3, n * c], 3.0, &mut rng), class_order: (1..=n).collect() };
        let pred = decode(&emb, n, &params, (oh, ow)).unwrap();
        prop_assert_eq!(pred.probs.dims3(), (oh, ow, n + 1));
        for px in pred.probs.data().chunks(n + 1) {
            prop_assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

fn episode_stream(seed: u64, len: usize, n: usize) -> Vec<(LabelMask, LabelMask, Vec<ClassId>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
            let mut classes: Vec<ClassId> = (1..=12).collect();
            for i in (1..classes.len()).rev() {
                classes.swap(i, rng.random_range(0..=i));
            }
            classes.truncate(n);
            (random_mask(h, w, n as u8, &mut rng), random_mask(h, w, n as u8, &mut rng), classes)
        })
        .collect()
}

fn accumulate_all(p: Protocol, eps: &[(LabelMask, LabelMask, Vec<ClassId>)]) -> ConfusionState {
    let mut s = ConfusionState::new(p);
    for (pred, gt, cls) in eps {
        s.accumulate(pred, gt, cls).unwrap();
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn merge_is_partition_independent(seed in any::<u64>(), len in 1usize..12, cut in 0usize..12,
                                      proto in prop::sample::select(vec![Protocol::Miou, Protocol::MiouStar])) {
        let eps = episode_stream(seed, len, 2);
        let whole = accumulate_all(proto, &eps);
        let cut = cut.min(len);
        let (head, tail) = eps.split_at(cut);
        let mut ab = accumulate_all(proto, head);
        ab.merge(&accumulate_all(proto, tail)).unwrap();
        let mut ba = accumulate_all(proto, tail);
        ba.merge(&accumulate_all(proto, head)).unwrap();
        prop_assert_eq!(&whole, &ab);
        prop_assert_eq!(&whole, &ba);
        // (x + y) + z == x + (y + z)
        let third = len / 3;
        let (x, rest) = eps.split_at(third);
        let (y, z) = rest.split_at(rest.len() / 2);
        let mut left = accumulate_all(proto, x);
        left.merge(&accumulate_all(proto, y)).unwrap();
        left.merge(&accumulate_all(proto, z)).unwrap();
        let mut yz = accumulate_all(proto, y);
        yz.merge(&accumulate_all(proto, z)).unwrap();
        let mut right = accumulate_all(proto, x);
        right.merge(&yz).unwrap();
        prop_assert_eq!(left, right);
    }

    #[test]
    fn counts_are_conserved(seed in any::<u64>(), n in 1usize..4,
                            proto in prop::sample::select(vec![Protocol::Miou, Protocol::MiouStar])) {
        let eps = episode_stream(seed, 1, n);
        let (pred, gt, cls) = &eps[0];
        let s = accumulate_all(proto, &eps);
        let total: u64 = s.classes.values().map(|k| k.tp + k.fn_).sum();
        prop_assert_eq!(total as usize, gt.labels.len());
        let bg_agree = pred.labels.iter().zip(&gt.labels).filter(|(p, t)| **p == 0 && **t == 0).count();
        prop_assert_eq!(s.counts(0).tp as usize, bg_agree);
        prop_assert_eq!(s.classes.len(), cls.len() + 1);
    }

    #[test]
    fn corrected_protocol_never_scores_higher(seed in any::<u64>(), len in 1usize..10, n in 1usize..4) {
        let eps = episode_stream(seed, len, n);
        let std = accumulate_all(Protocol::Miou, &eps);
        let star = accumulate_all(Protocol::MiouStar, &eps);
        for (c, k) in &star.classes {
            let base = std.counts(*c);
            prop_assert!(k.fp >= base.fp);
            prop_assert_eq!((k.tp, k.fn_), (base.tp, base.fn_));
        }
        if let (Ok(a), Ok(b)) = (std.score(), star.score()) {
            for (c, v) in &b.per_class {
                // a class seen only through false positives is excluded under miou
                match a.per_class.get(c) {
                    Some(base) => prop_assert!(*v <= base + 1e-15),
                    None => prop_assert_eq!(*v, 0.0),
                }
            }
            prop_assert!(b.mean <= a.mean + 1e-15);
        }
    }

    #[test]
    fn one_way_protocols_coincide(seed in any::<u64>(), len in 1usize..10) {
        // a sampled 1-way query always contains its class
        let mut eps = episode_stream(seed, len, 1);
        for (_, gt, _) in &mut eps {
            gt.labels[0] = 1;
        }
        let std = accumulate_all(Protocol::Miou, &eps);
        let star = accumulate_all(Protocol::MiouStar, &eps);
        // background is tracked but never scored
        for (c, k) in star.classes.iter().filter(|(c, _)| **c != 0) {
            prop_assert_eq!(*k, std.counts(*c));
        }
        prop_assert_eq!(std.score().unwrap(), {
            let mut s = star.score().unwrap();
            s.protocol = Protocol::Miou;
            s
        });
    }

    #[test]
    fn remap_is_idempotent_and_onto_present_labels(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = random_mask(5, 6, 9, &mut rng);
        let mut classes: Vec<ClassId> = (1..=9).collect();
        for i in (1..classes.len()).rev() {
            classes.swap(i, rng.random_range(0..=i));
        }
        classes.truncate(n);
        let once = remap_labels(&raw, &classes);
        let local: Vec<ClassId> = (1..=n as ClassId).collect();
        prop_assert_eq!(&remap_labels(&once, &local), &once);
        for (i, &c) in classes.iter().enumerate() {
            prop_assert_eq!(once.count(i as u8 + 1), raw.count(c));
        }
        prop_assert!(once.labels.iter().all(|&l| l as usize <= n));
    }

    #[test]
    fn folds_are_disjoint(num_folds in 1usize..6, per_fold in 1usize..6, fold in 0usize..6) {
        let ids: Vec<ClassId> = (1..=(num_folds * per_fold) as ClassId).collect();
        let Ok(f) = build_fold_split("p", &ids, fold, num_folds) else {
            prop_assert!(fold >= num_folds);
            return Ok(());
        };
        prop_assert!(f.train_classes.iter().all(|c| !f.test_classes.contains(c)));
        prop_assert_eq!(f.train_classes.len() + f.test_classes.len(), ids.len());
        prop_assert_eq!(f.test_classes.len(), per_fold);
    }

    #[test]
    fn poly_schedule_strictly_decreases(lr in 1e-5f64..1.0, max_iter in 2usize..500, power in 0.1f64..3.0) {
        for i in 1..max_iter {
            prop_assert!(poly_lr(lr, i, max_iter, power) < poly_lr(lr, i - 1, max_iter, power));
        }
    }
}

#[test]
fn episodes_are_reproducible_and_never_reuse_the_query() {
    let cfg = SynthConfig {
        num_classes: 8,
        images_per_class: 6,
        height: 16,
        width: 16,
        co_occurrence: 0.8,
        ..SynthConfig::default()
    };
    let ds = synth_shapes(&cfg, 3).unwrap();
    let split: Vec<ClassId> = (1..=8).collect();
    for mode in [EpisodeMode::Any, EpisodeMode::All] {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..200)
                .map(|_| sample_episode(&ds.index, &split, 2, 5, mode, 50, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        let a = draw(11);
        assert_eq!(a, draw(11));
        assert_ne!(a, draw(12));
        for ep in &a {
            assert_eq!((ep.n_way(), ep.k_shot()), (2, 5));
            assert_ne!(ep.classes[0], ep.classes[1]);
            let qc = &ds.index.entries[ep.query].classes;
            match mode {
                EpisodeMode::All => assert!(ep.classes.iter().all(|c| qc.contains(c))),
                EpisodeMode::Any => assert!(ep.classes.iter().any(|c| qc.contains(c))),
            }
            for (c, shots) in ep.classes.iter().zip(&ep.support) {
                let mut uniq = shots.clone();
                uniq.sort_unstable();
                uniq.dedup();
                assert_eq!(uniq.len(), shots.len());
                for &s in shots {
                    assert_ne!(s, ep.query);
                    assert!(ds.index.entries[s].classes.contains(c));
                }
            }
        }
    }
}
