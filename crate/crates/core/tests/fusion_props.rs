mod common;

use common::{is_probability_vector, rng, scale_weights_instance};
use msvad_core::fusion::{fuse, Decomposer, MemoryBank, Phase};
use msvad_core::nn::{ParamStore, Session};
use msvad_core::spatial::{combine_scales, resize_grid, ScaleFeatures};
use msvad_core::temporal::{aggregate_with_logits, frame_difference};
use msvad_core::{Error, Tensor};
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-700.0f64..700.0, 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn learned_scale_weights_are_distributions(seed in any::<u64>()) {
        let (ws, wt) = scale_weights_instance(seed);
        prop_assert_eq!(ws.len(), 3);
        prop_assert_eq!(wt.len(), 3);
        prop_assert!(is_probability_vector(&ws, 1e-6));
        prop_assert!(is_probability_vector(&wt, 1e-6));
    }

    #[test]
    fn explicit_logits_give_distributions(l in logits(), k in 1usize..5, d in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let feats: Vec<ScaleFeatures> = [4usize, 2, 1]
            .iter()
            .enumerate()
            .map(|(i, &n)| ScaleFeatures { g: Tensor::randn(&[k, n * n, d], 1.0, &mut r), scale_index: i, grid: (n, n) })
            .collect();
        let (fused, ws) = combine_scales(&feats, &l).unwrap();
        prop_assert_eq!(fused.shape(), &[k, 16, d][..]);
        prop_assert!(is_probability_vector(&ws, 1e-6));
        let per: Vec<Tensor> = (1..=3).map(|w| Tensor::randn(&[w, 3, d], 1.0, &mut r)).collect();
        let (agg, wt) = aggregate_with_logits(&per, &l, k).unwrap();
        prop_assert_eq!(agg.shape(), &[k, 3, d][..]);
        prop_assert!(is_probability_vector(&wt, 1e-6));
    }

    #[test]
    fn equal_logits_average_scales(k in 1usize..4, d in 1usize..4, c in -5.0f64..5.0) {
        let feats: Vec<ScaleFeatures> = [4usize, 2, 1]
            .iter()
            .enumerate()
            .map(|(i, &n)| ScaleFeatures { g: Tensor::full(&[k, n * n, d], c * (i + 1) as f64), scale_index: i, grid: (n, n) })
            .collect();
        let (fused, ws) = combine_scales(&feats, &[0.3, 0.3, 0.3]).unwrap();
        prop_assert!(ws.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-12));
        prop_assert!(fused.data().iter().all(|v| (v - 2.0 * c).abs() < 1e-9));
    }

    #[test]
    fn resizing_a_constant_grid_keeps_it_constant(
        nh in 1usize..6, nw in 1usize..6, th in 1usize..9, tw in 1usize..9, c in -3.0f64..3.0,
    ) {
        let store = ParamStore::new();
        let mut s = Session::inference(&store);
        let f = s.g.constant(Tensor::full(&[2, nh, nw, 3], c));
        let r = resize_grid(&mut s, f, (th, tw));
        prop_assert_eq!(s.g.shape(r), &[2, th, tw, 3][..]);
        prop_assert!(s.g.value(r).data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn fused_tokens_are_standardised(n in 1usize..6, d in 2usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = Tensor::randn(&[2, n, d], 3.0, &mut r);
        let h = Tensor::randn(&[2, n, d], 3.0, &mut r);
        let f = fuse(&g, &h).unwrap();
        for row in f.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(var <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn decomposition_is_exact_and_gated(n in 1usize..6, d in 1usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let dec = Decomposer::new(&mut store, "decompose", d, &mut r);
        let f = Tensor::randn(&[2, n, d], 2.0, &mut r);
        let mut s = Session::inference(&store);
        let x = s.g.constant(f.clone());
        let p = dec.forward(&mut s, x);
        let gate = s.g.value(p.gate);
        prop_assert!(gate.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let (c, res) = (s.g.value(p.common), s.g.value(p.residual));
        for ((f, c), res) in f.data().iter().zip(c.data()).zip(res.data()) {
            // Floating-point identity: the sum may differ from f by rounding.
            prop_assert!((c + res - f).abs() <= 2.0 * f64::EPSILON * f.abs().max(c.abs()));
        }
        let out = dec.apply(&store, &f).unwrap();
        prop_assert_eq!(out.f_app.shape(), f.shape());
        prop_assert_eq!(out.f_motion.shape(), f.shape());
    }

    #[test]
    fn memory_reads_are_convex(m in 1usize..12, d in 1usize..8, q in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let bank = MemoryBank::new(m, d, &mut r);
        let query = Tensor::randn(&[q, d], 1.0, &mut r);
        let (out, w) = bank.read(&query).unwrap();
        prop_assert_eq!(out.shape(), &[q, d][..]);
        for (i, row) in w.data().chunks(m).enumerate() {
            prop_assert!(is_probability_vector(row, 1e-9));
            for j in 0..d {
                let col: Vec<f64> = (0..m).map(|s| bank.slots().data()[s * d + j]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let v = out.data()[i * d + j];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn memory_writes_keep_unit_slots(m in 1usize..8, d in 1usize..6, n in 0usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut bank = MemoryBank::new(m, d, &mut r);
        bank.write(&Tensor::randn(&[n.max(1), d], 1.0, &mut r), Phase::Training).unwrap();
        for row in bank.slots().data().chunks(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reversed_clip_negates_differences(t in 2usize..7, seed in any::<u64>()) {
        let mut r = rng(seed);
        let clip = Tensor::uniform(&[t, 3, 2, 3], 0.0, 1.0, &mut r);
        let inner = 18;
        let mut rev = Vec::with_capacity(clip.len());
        for f in (0..t).rev() {
            rev.extend_from_slice(&clip.data()[f * inner..(f + 1) * inner]);
        }
        let rev = Tensor::new(clip.shape(), rev).unwrap();
        let w = t - 1;
        let fwd = frame_difference(&clip, w).unwrap().d;
        let bwd = frame_difference(&rev, w).unwrap().d;
        for i in 0..w {
            let a = &fwd.data()[i * inner..(i + 1) * inner];
            let b = &bwd.data()[(w - 1 - i) * inner..(w - i) * inner];
            prop_assert!(a.iter().zip(b).all(|(x, y)| *x == -*y));
        }
    }
}

#[test]
fn inference_memories_are_read_only() {
    let mut bank = MemoryBank::new(4, 3, &mut rng(0));
    let before = bank.clone();
    let items = Tensor::randn(&[2, 3], 1.0, &mut rng(1));
    assert!(matches!(bank.write(&items, Phase::Inference), Err(Error::Mode)));
    assert_eq!(bank, before);
}

#[test]
fn mismatched_fusion_inputs_are_rejected() {
    let g = Tensor::zeros(&[2, 3, 4]);
    assert!(matches!(fuse(&g, &Tensor::zeros(&[2, 4, 4])), Err(Error::Contract(_))));
    assert!(frame_difference(&Tensor::zeros(&[2, 2, 2, 3]), 2).is_err());
}

#[test]
fn scale_weights_hold_on_hundred_inputs() {
    for seed in 0..100 {
        let (ws, wt) = scale_weights_instance(seed);
        assert!(is_probability_vector(&ws, 1e-6), "spatial {ws:?}");
        assert!(is_probability_vector(&wt, 1e-6), "temporal {wt:?}");
    }
}
