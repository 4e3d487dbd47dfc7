//! Randomized invariants of the pipeline's building blocks.

use candle_core::{Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uqdepth::datasets::{augment, AugmentationConfig, DepthMap, RgbImage, Sample};
use uqdepth::fusion::{confidence, fuse};
use uqdepth::geometry::{backproject, read_ply, write_ply};
use uqdepth::losses::edge_loss;
use uqdepth::metrics::{compute_metrics_values, median_scale_values};
use uqdepth::trainer::{learning_rate, Adam};
use uqdepth::uncertainty_eval::{default_fractions, oracle_curve, sparsification_curve, sparsification_error};
use uqdepth::{CameraIntrinsics, DepthModel, FusionMode, LossWeights, ModelConfig, Phase};

fn field(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

fn tensor(v: &[f64], h: usize, w: usize) -> Tensor {
    Tensor::from_slice(v, (1, 1, h, w), &Device::Cpu).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmentation_moves_image_and_depth_together(
        h in 2usize..9,
        w in 2usize..9,
        seed in any::<u64>(),
    ) {
        // every channel carries the depth value, so any geometric transform
        // that keeps the pair aligned leaves image == depth pixel-wise
        let depth = DepthMap::from_fn(h, w, 1.0, |y, x| 0.05 + 0.9 * (y * w + x) as f32 / (h * w) as f32).unwrap();
        let image = RgbImage::from_fn(h, w, |_, y, x| depth.get(y, x)).unwrap();
        let s = Sample::new(image, Some(depth), "p").unwrap();
        let cfg = AugmentationConfig { p_vflip: 0.5, p_rotate: 0.9, p_channel_permute: 0.5, ..AugmentationConfig::default() };
        let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let d = out.depth.as_ref().unwrap();
        for c in 0..3 {
            for y in 0..out.height() {
                for x in 0..out.width() {
                    prop_assert_eq!(out.image.get(c, y, x), d.get(y, x));
                }
            }
        }
        let mut before = s.depth.unwrap().data().to_vec();
        let mut after = d.data().to_vec();
        before.sort_by(f32::total_cmp);
        after.sort_by(f32::total_cmp);
        prop_assert_eq!(before, after);
    }

    #[test]
    fn confidence_and_weights_stay_in_range(sg in field(16, 0.0, 12.0), sl in field(16, 0.0, 12.0)) {
        let (cg, cl) = (confidence(&tensor(&sg, 4, 4)).unwrap(), confidence(&tensor(&sl, 4, 4)).unwrap());
        let c_hi = 1.0 / (1.0 + (-1.0f64).exp());
        for c in values(&cg).into_iter().chain(values(&cl)) {
            prop_assert!(c > 0.5 && c <= c_hi + 1e-12);
        }
        let ones = tensor(&[1.0; 16], 4, 4);
        let (_, wg, wl) = fuse(&ones, &ones, &cg, &cl).unwrap();
        for (a, b) in values(&wg).into_iter().zip(values(&wl)) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
            prop_assert!(a > 0.44 && a < 0.56);
        }
    }

    #[test]
    fn fused_depth_lies_between_the_branches(
        dg in field(16, 0.1, 1.0),
        dl in field(16, 0.1, 1.0),
        sg in field(16, 0.0, 5.0),
        sl in field(16, 0.0, 5.0),
    ) {
        let (cg, cl) = (confidence(&tensor(&sg, 4, 4)).unwrap(), confidence(&tensor(&sl, 4, 4)).unwrap());
        let (fused, _, _) = fuse(&tensor(&dg, 4, 4), &tensor(&dl, 4, 4), &cg, &cl).unwrap();
        for (j, f) in values(&fused).into_iter().enumerate() {
            prop_assert!(f >= dg[j].min(dl[j]) - 1e-12 && f <= dg[j].max(dl[j]) + 1e-12);
        }
    }

    #[test]
    fn median_scaling_absorbs_any_factor(
        pairs in prop::collection::vec((0.1f64..1.0, 0.5f64..2.0), 1..64),
        k in 0.01f64..100.0,
    ) {
        let gt: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<f64> = pairs.iter().map(|p| p.0 * p.1).collect();
        let scaled: Vec<f64> = pred.iter().map(|p| p * k).collect();
        let a = compute_metrics_values(&pred, &gt, true).unwrap();
        let b = compute_metrics_values(&scaled, &gt, true).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
        let (_, s) = median_scale_values(&gt, &gt).unwrap();
        prop_assert_eq!(s, 1.0);
    }

    #[test]
    fn deltas_are_ordered_fractions(pairs in prop::collection::vec((0.1f64..1.0, 0.2f64..5.0), 1..64)) {
        let gt: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<f64> = pairs.iter().map(|p| p.0 * p.1).collect();
        let m = compute_metrics_values(&pred, &gt, false).unwrap();
        prop_assert!(0.0 <= m.delta1 && m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 1.0);
        prop_assert!(m.rmse >= 0.0 && m.silog >= 0.0 && m.abs_rel >= 0.0);
    }

    #[test]
    fn oracle_is_monotone_and_perfect_ranking_matches_it(errors in field(100, 0.0, 3.0)) {
        let f = default_fractions();
        let oracle = oracle_curve(&errors, &f).unwrap();
        prop_assert!(oracle.rmse_values.windows(2).all(|w| w[1] <= w[0]));
        let curve = sparsification_curve(&errors, &errors, &f).unwrap();
        prop_assert_eq!(&curve, &oracle);
        let (diff, area) = sparsification_error(&curve, &oracle).unwrap();
        prop_assert!(diff.iter().all(|d| *d == 0.0));
        prop_assert_eq!(area, 0.0);
    }

    #[test]
    fn edge_loss_ignores_constant_offsets(base in field(20, 0.1, 1.0), c in -0.5f64..0.5) {
        let gt = tensor(&base, 4, 5);
        let shifted: Vec<f64> = base.iter().map(|v| v + c).collect();
        let e = edge_loss(&tensor(&shifted, 4, 5), &gt).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(e.abs() < 1e-12);
    }

    #[test]
    fn backprojection_scales_with_depth_and_survives_ply(
        z in field(12, 0.1, 5.0),
        k in 0.1f64..10.0,
        fx in 10.0f64..500.0,
        cx in 0.0f64..4.0,
    ) {
        let intr = CameraIntrinsics::new(fx, fx * 1.1, cx, 1.5).unwrap();
        let depth = DepthMap::from_fn(3, 4, 5.0, |y, x| z[y * 4 + x] as f32).unwrap();
        let image = RgbImage::from_fn(3, 4, |c, y, x| ((c + y + x) % 3) as f32 / 2.0).unwrap();
        let a = backproject(&depth, &image, &intr).unwrap();
        let b = backproject(&DepthMap::from_fn(3, 4, 50.0, |y, x| z[y * 4 + x] as f32 * k as f32).unwrap(), &image, &intr).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            let ratio = q[2] / p[2];
            for i in 0..3 {
                prop_assert!((q[i] - ratio * p[i]).abs() <= 1e-9 * q[i].abs().max(1.0));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        write_ply(&a, &path).unwrap();
        prop_assert_eq!(read_ply(&path).unwrap(), a);
    }

    #[test]
    fn learning_rate_schedule_is_exponential(lr0 in 1e-6f64..1e-1, gamma in 0.1f64..1.0, e in 0usize..40) {
        prop_assert_eq!(learning_rate(lr0, gamma, e), lr0 * gamma.powi(e as i32));
    }
}

fn tiny_config(mode: FusionMode) -> ModelConfig {
    let mut c = ModelConfig::desk(32, 1.0, mode);
    c.local.stage_channels = vec![8, 8, 8, 8, 8];
    c.local.layers_per_stage = vec![1; 5];
    c.local.growth_rate = 4;
    c.global.embed_dims = vec![8, 8, 8, 8];
    c.global.num_heads = vec![1; 4];
    c.global.reduction_ratios = vec![1; 4];
    c.global.decoder_dim = 8;
    c
}

/// One Adam step at a tiny learning rate lowers the loss on the batch it
/// was computed on.
#[test]
fn small_step_decreases_batch_loss() {
    let samples = uqdepth::datasets::generate_toy_colon(4, 32, 5).unwrap();
    let dev = Device::Cpu;
    let x = uqdepth::datasets::images_to_tensor(samples.iter().map(|s| &s.image), &dev).unwrap();
    let y = uqdepth::datasets::depths_to_tensor(samples.iter().map(|s| s.depth.as_ref().unwrap()), &dev).unwrap();
    for mode in [FusionMode::LocalOnly, FusionMode::UncertaintyFusion] {
        let model = DepthModel::new(&tiny_config(mode), 2, &dev).unwrap();
        let w = LossWeights::default();
        // same dropout seed both times so the loss is one deterministic function
        let phase = Phase::Train { seed: 9 };
        let loss = |m: &DepthModel| {
            let out = m.forward(&x, phase).unwrap();
            uqdepth::losses::model_loss(&out, &y, &w).unwrap()
        };
        let (before, _) = loss(&model);
        let grads = before.backward().unwrap();
        let vars = model.store().trainable_with_prefix("");
        Adam::default().step(&vars, &grads, 1e-6).unwrap();
        let (after, _) = loss(&model);
        let (b, a) = (before.to_scalar::<f32>().unwrap(), after.to_scalar::<f32>().unwrap());
        assert!(a < b, "{mode}: {a} >= {b}");
    }
}
