use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use warpgrid::features::{FeatureExtractor, FeatureKind};
use warpgrid::gradcheck::PairInstance;
use warpgrid::losses::{
    cycle_images, loss_dense_supervised, loss_matching, loss_reconstruction, loss_smoothness, loss_sparse_keypoints,
    reference_confidence, LossReport, Quantity, SmoothMode,
};
use warpgrid::metrics::synthetic_dense;
use warpgrid::solver::{direct_solve, DirectSolveConfig};
use warpgrid::synth::{generate_texture, make_pair, TextureKind, WarpSpec};
use warpgrid::ConfidenceMap;

fn instance(seed: u64) -> PairInstance {
    PairInstance::random(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn scaled(c: &ConfidenceMap, a: f32) -> ConfidenceMap {
    ConfidenceMap::new(c.height(), c.width(), c.data().iter().map(|v| v * a).collect()).unwrap()
}

fn gated(p: &PairInstance, cs: &ConfidenceMap, ct: &ConfidenceMap) -> [LossReport; 2] {
    let e = FeatureExtractor::new(FeatureKind::RandomConv, 3, 1);
    [
        loss_matching(
            &p.image_s, &p.image_t, &p.grid_st, &p.grid_ts, cs, ct, &p.mask_s, &p.mask_t, &e,
        )
        .unwrap(),
        loss_reconstruction(
            &p.image_s, &p.image_t, &p.grid_st, &p.grid_ts, cs, ct, &p.mask_s, &p.mask_t,
        )
        .unwrap(),
    ]
}

fn affine_spec(rot: f64, scale: f64, tx: f64, ty: f64) -> WarpSpec {
    WarpSpec {
        rotation: rot,
        scale: [scale, scale],
        translation: [tx, ty],
        nonrigid: None,
        seed: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn confidence_gating_is_linear(seed in 0u64..10_000, a in 0.05f32..1.0) {
        let p = instance(seed);
        let base = gated(&p, &p.conf_s, &p.conf_t);
        let scaled = gated(&p, &scaled(&p.conf_s, a), &scaled(&p.conf_t, a));
        for (b, s) in base.iter().zip(&scaled) {
            prop_assert!((s.total - a as f64 * b.total).abs() <= 1e-6 * b.total.abs().max(1e-12));
        }
    }

    #[test]
    fn unmasked_confidences_are_inert(seed in 0u64..10_000) {
        let p = instance(seed);
        let flip = |c: &ConfidenceMap, m: &warpgrid::Mask| {
            let data = c.data().iter().zip(m.data()).map(|(&v, &on)| if on { v } else { 1.0 - v }).collect();
            ConfidenceMap::new(c.height(), c.width(), data).unwrap()
        };
        let base = gated(&p, &p.conf_s, &p.conf_t);
        let moved = gated(&p, &flip(&p.conf_s, &p.mask_s), &flip(&p.conf_t, &p.mask_t));
        for (b, m) in base.iter().zip(&moved) {
            prop_assert_eq!(b.total, m.total);
            for (q, mask) in [(Quantity::ConfS, &p.mask_s), (Quantity::ConfT, &p.mask_t)] {
                let g = b.grad(q).unwrap();
                for (v, &on) in g.data.iter().zip(mask.data()) {
                    prop_assert!(on || *v == 0.0);
                }
            }
        }
    }

    #[test]
    fn supervised_and_photometric_losses_are_nonnegative(seed in 0u64..10_000) {
        let p = instance(seed);
        let mut values: Vec<f64> = gated(&p, &p.conf_s, &p.conf_t).iter().map(|r| r.total).collect();
        values.push(loss_smoothness(&p.grid_st, SmoothMode::Displacement).unwrap().total);
        values.push(loss_smoothness(&p.grid_st, SmoothMode::Literal).unwrap().total);
        values.push(loss_dense_supervised(&p.grid_st, &p.gt_st, &p.vis_t).unwrap().total);
        values.push(loss_sparse_keypoints(&p.grid_st, &p.grid_ts, &p.keypoints).unwrap().total);
        prop_assert!(values.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn reference_confidence_spans_unit_interval(seed in 0u64..10_000) {
        let p = instance(seed);
        let (cycle_s, _) = cycle_images(&p.image_s, &p.image_t, &p.grid_st, &p.grid_ts).unwrap();
        let (err, _, c) = reference_confidence(&p.image_s, &cycle_s, &p.mask_s).unwrap();
        let masked = |m: &[f32]| -> Vec<f32> { m.iter().zip(p.mask_s.data()).filter(|(_, &on)| on).map(|(v, _)| *v).collect() };
        let (e, c) = (masked(err.data()), masked(c.data()));
        let lo = e.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = e.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assume!(hi > lo);
        prop_assert_eq!(c.iter().copied().fold(f32::INFINITY, f32::min), 0.0);
        prop_assert_eq!(c.iter().copied().fold(f32::NEG_INFINITY, f32::max), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ground_truth_grids_reproduce_their_pair(
        rot in -0.5f64..0.5,
        scale in 0.8f64..1.25,
        tx in -0.2f64..0.2,
        ty in -0.2f64..0.2,
        seed in 0u64..1000,
    ) {
        let tex = generate_texture(32, 32, TextureKind::ALL[seed as usize % 3], seed).unwrap();
        let pair = make_pair(&tex, &affine_spec(rot, scale, tx, ty), 0.0, seed).unwrap();
        let again = make_pair(&tex, &affine_spec(rot, scale, tx, ty), 0.0, seed).unwrap();
        prop_assert_eq!(&pair, &again);
        let d = synthetic_dense(
            &pair.grid_st, &pair.grid_ts, &pair.grid_st, &pair.grid_ts,
            &pair.image_s, &pair.image_t, &pair.vis_s, &pair.vis_t,
        ).unwrap();
        prop_assert!(d.is_none_or(|v| v <= 1e-4));
    }
}

#[test]
fn direct_solve_is_deterministic() {
    let tex = generate_texture(24, 24, TextureKind::Blobs, 3).unwrap();
    let pair = make_pair(&tex, &affine_spec(0.1, 1.05, 0.05, -0.03), 0.1, 3).unwrap();
    let cfg = DirectSolveConfig::default().with_iterations(15);
    let run = || direct_solve(&pair.image_s, &pair.image_t, &pair.mask_s, &pair.mask_t, &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.prediction, b.prediction);
    assert_eq!(a.trace.len(), b.trace.len());
    assert!(a
        .trace
        .iter()
        .zip(&b.trace)
        .all(|(x, y)| x.total.to_bits() == y.total.to_bits()));
}
