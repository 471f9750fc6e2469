//! Property tests for the contracts the rest of the system leans on:
//! projection budgets, sign/clamp ranges, tape linearity, injection
//! geometry, batch separability, and parser robustness on hostile bytes.

use std::sync::OnceLock;

use booster_core::attack::{self, Objective};
use booster_core::data;
use booster_core::graph::Graph;
use booster_core::model::Model;
use booster_core::ops;
use booster_core::rng;
use booster_core::signal::BoosterSignal;
use booster_core::tensor::Tensor;
use booster_core::train::TrainPlan;
use proptest::prelude::*;

fn probe_model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| Model::build("cnn-small", (1, 8, 8), 10, 77).expect("probe model"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_stays_inside_budget_and_pixel_range(
        pairs in prop::collection::vec((0.0f32..1.0, -0.5f32..0.5), 1..64),
        eps in 1e-3f32..0.2,
    ) {
        let origin: Vec<f32> = pairs.iter().map(|(o, _)| *o).collect();
        let mut adv: Vec<f32> = pairs.iter().map(|(o, n)| o + n).collect();
        attack::project_linf(&mut adv, &origin, eps);
        for (a, o) in adv.iter().zip(&origin) {
            prop_assert!((a - o).abs() <= eps + 1e-6);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn sign_values_are_ternary(xs in prop::collection::vec(-10.0f32..10.0, 1..128)) {
        for s in ops::sign_forward(&xs) {
            prop_assert!(s == -1.0 || s == 0.0 || s == 1.0);
        }
    }

    #[test]
    fn clamp_output_is_bounded(
        xs in prop::collection::vec(-10.0f32..10.0, 1..64),
        lo in -2.0f32..0.0,
        span in 0.0f32..3.0,
    ) {
        let hi = lo + span;
        let mut g = Graph::new();
        let x = g.leaf_from(vec![xs.len()], xs.clone(), false).unwrap();
        let y = g.clamp(x, lo, hi).unwrap();
        for v in g.value(y) {
            prop_assert!(*v >= lo && *v <= hi);
        }
    }

    #[test]
    fn backward_is_linear_over_loss_sum(xs in prop::collection::vec(-1.0f32..1.0, 4..32)) {
        let n = xs.len();
        let build_f = |g: &mut Graph, x| {
            let sq = g.mul(x, x)?;
            g.sum(sq)
        };
        let build_g = |g: &mut Graph, x| {
            let t = g.tanh(x)?;
            g.mean(t)
        };

        let mut ga = Graph::new();
        let xa = ga.leaf_from(vec![n], xs.clone(), true).unwrap();
        let la = build_f(&mut ga, xa).unwrap();
        ga.backward(la).unwrap();
        let grad_f = ga.grad(xa).unwrap().to_vec();

        let mut gb = Graph::new();
        let xb = gb.leaf_from(vec![n], xs.clone(), true).unwrap();
        let lb = build_g(&mut gb, xb).unwrap();
        gb.backward(lb).unwrap();
        let grad_g = gb.grad(xb).unwrap().to_vec();

        let mut gc = Graph::new();
        let xc = gc.leaf_from(vec![n], xs.clone(), true).unwrap();
        let lf = build_f(&mut gc, xc).unwrap();
        let lg = build_g(&mut gc, xc).unwrap();
        let total = gc.add(lf, lg).unwrap();
        gc.backward(total).unwrap();
        let grad_sum = gc.grad(xc).unwrap();

        for i in 0..n {
            let expect = grad_f[i] + grad_g[i];
            prop_assert!(
                (grad_sum[i] - expect).abs() <= 1e-6 * expect.abs().max(1.0),
                "coord {}: {} vs {}", i, grad_sum[i], expect
            );
        }
    }

    #[test]
    fn injection_preserves_content_and_replicates_frame(
        seed in any::<u64>(),
        n in 1usize..4,
        width in 0usize..5,
    ) {
        let (c, h, w) = (1usize, 6usize, 7usize);
        let s = BoosterSignal::random(width, c, (h, w), seed);
        let mut r = rng::stream(seed, &[1]);
        let x = Tensor::from_vec(
            vec![n, c, h, w],
            (0..n * c * h * w).map(|_| rand::Rng::gen_range(&mut r, 0.0..1.0)).collect(),
        ).unwrap();
        let canvas = s.inject_batch(&x).unwrap();
        let (hf, wf) = (h + 2 * width, w + 2 * width);
        prop_assert_eq!(canvas.shape(), &[n, c, hf, wf]);
        let frame = s.frame_data();
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..hf {
                    for xx in 0..wf {
                        let v = canvas.data()[(ni * c + ci) * hf * wf + y * wf + xx];
                        let inside = y >= width && y < h + width && xx >= width && xx < w + width;
                        let expect = if inside {
                            x.data()[(ni * c + ci) * h * w + (y - width) * w + (xx - width)]
                        } else {
                            frame[(ci * hf + y) * wf + xx]
                        };
                        prop_assert_eq!(v.to_bits(), expect.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn signal_updates_never_touch_the_interior(
        seed in any::<u64>(),
        width in 1usize..5,
        lr in 1e-4f32..0.5,
    ) {
        let mut s = BoosterSignal::random(width, 1, (5, 5), seed);
        let mask = s.interior_mask();
        let mut r = rng::stream(seed, &[2]);
        for _ in 0..5 {
            let grad: Vec<f32> = (0..s.frame_data().len())
                .map(|_| rand::Rng::gen_range(&mut r, -1.0..1.0))
                .collect();
            s.apply_step(&grad, lr).unwrap();
        }
        for (v, m) in s.frame_data().iter().zip(&mask) {
            if *m > 0.0 {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn idx_roundtrip_is_bit_exact(
        pixels in prop::collection::vec(any::<u8>(), 1..4),
        labels in prop::collection::vec(0u8..10, 1..16),
    ) {
        // images: one 2x2 image per 4 bytes, padded to a whole image
        let mut px = pixels.clone();
        while px.len() % 4 != 0 {
            px.push(0);
        }
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        data::write_idx_images(&ip, 2, 2, &px).unwrap();
        data::write_idx_labels(&lp, &labels).unwrap();
        let (n, h, w, back) = data::read_idx_images(&ip).unwrap();
        prop_assert_eq!((n, h, w), (px.len() / 4, 2, 2));
        prop_assert_eq!(back, px);
        prop_assert_eq!(data::read_idx_labels(&lp).unwrap(), labels);
    }

    #[test]
    fn hostile_bytes_never_panic_the_parsers(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("garbage");
        std::fs::write(&p, &bytes).unwrap();
        let _ = data::read_idx_images(&p);
        let _ = data::read_idx_labels(&p);
        let _ = data::read_color_batch(&p);
        let _ = booster_core::checkpoint::Container::read(&p);
    }

    #[test]
    fn wrong_idx_magic_is_rejected(bytes in prop::collection::vec(any::<u8>(), 16..64)) {
        let mut b = bytes.clone();
        b[0] = 0xde; // cannot be the leading zero byte of a valid magic
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("badmagic");
        std::fs::write(&p, &b).unwrap();
        prop_assert!(data::read_idx_images(&p).is_err());
        prop_assert!(data::read_idx_labels(&p).is_err());
    }

    #[test]
    fn plan_json_roundtrip_is_stable(
        seed in any::<u64>(),
        epochs in 0usize..50,
        width in 0usize..9,
        lr in 1e-4f32..1.0,
        eps in 0.0f32..0.3,
    ) {
        let plan = TrainPlan {
            seed,
            epochs,
            signal_width: width,
            lr,
            epsilon: eps,
            ..TrainPlan::default()
        };
        let text = serde_json::to_string(&plan).unwrap();
        let back: TrainPlan = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn attacks_respect_budget_and_range(seed in any::<u64>(), eps in 1e-3f32..0.1) {
        let model = probe_model();
        let mut r = rng::stream(seed, &[3]);
        let x = Tensor::from_vec(
            vec![4, 1, 8, 8],
            (0..4 * 64).map(|_| rand::Rng::gen_range(&mut r, 0.0..1.0)).collect(),
        ).unwrap();
        let y: Vec<usize> = (0..4).map(|_| rand::Rng::gen_range(&mut r, 0..10)).collect();
        let spec = attack::profile("pgd7", eps).unwrap();
        for adv in [
            attack::fgsm(model, &x, &y, eps, None).unwrap(),
            attack::pgd(model, &x, &y, &spec, &Objective::CrossEntropy, None, &mut r).unwrap(),
        ] {
            for (a, o) in adv.data().iter().zip(x.data()) {
                prop_assert!((a - o).abs() <= eps + 1e-6);
                prop_assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn input_gradients_are_batch_separable(seed in any::<u64>()) {
        let model = probe_model();
        let mut r = rng::stream(seed, &[4]);
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n).map(|_| rand::Rng::gen_range(&mut r, 0.0..1.0)).collect()
        };
        let x1 = draw(64);
        let x2 = draw(64);
        let x2_alt = draw(64);
        let labels = vec![3usize, 7usize];

        let batch = |second: &[f32]| {
            let mut d = x1.clone();
            d.extend_from_slice(second);
            Tensor::from_vec(vec![2, 1, 8, 8], d).unwrap()
        };
        let (_, g_a) = model.input_gradient(&batch(&x2), &labels).unwrap();
        let (_, g_b) = model.input_gradient(&batch(&x2_alt), &labels).unwrap();
        for i in 0..64 {
            prop_assert_eq!(g_a[i].to_bits(), g_b[i].to_bits(), "coord {} of example 0 moved", i);
        }
    }
}
