use grformer::attention::{es_transform, grl_forward, window_partition, window_reverse, GrlParams, Layout, WindowPlan};
use grformer::complexity::count_params;
use grformer::config::{AttentionVariant, ModelConfig, WindowSpec};
use grformer::imaging::{bicubic_resize, psnr, ssim, Plane};
use grformer::network::{init_parameters, pixel_shuffle};
use grformer::params::{register, scalar_count};
use grformer::training::{dihedral, resize_tensor};
use grformer::{weights, GrformerParams32, GrformerParams64, Rng, Tape, Tensor};
use num_rational::Ratio;
use proptest::prelude::*;

fn plane(w: usize, h: usize, seed: u64) -> Plane<f64> {
    let mut rng = Rng::new(seed);
    Plane::from_fn(w, h, |_, _| rng.uniform())
}

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn window_round_trip_is_exact(
        c in 1usize..5, h in 1usize..20, w in 1usize..20,
        wh in 1usize..6, ww in 1usize..6, shifted in any::<bool>(), hwc in any::<bool>(), seed in any::<u64>(),
    ) {
        let shift = if shifted { (wh / 2, ww / 2) } else { (0, 0) };
        let layout = if hwc { Layout::Hwc } else { Layout::Chw };
        let plan = WindowPlan::new(c, h, w, WindowSpec::new(wh, ww), shift, layout);
        let mut tape = Tape::new();
        let x = tape.constant(tensor(&plan.source_shape(), seed));
        let win = window_partition(&mut tape, x, &plan).unwrap();
        let back = window_reverse(&mut tape, win, &plan).unwrap();
        prop_assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn pixel_shuffle_is_a_permutation(c in 1usize..4, r in 1usize..5, h in 1usize..6, w in 1usize..6) {
        let n = c * r * r * h * w;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![c * r * r, h, w], (0..n).map(|v| v as f64).collect()).unwrap());
        let y = pixel_shuffle(&mut tape, x, r).unwrap();
        prop_assert_eq!(tape.shape(y), &[c, h * r, w * r][..]);
        let mut seen: Vec<usize> = tape.value(y).data().iter().map(|&v| v as usize).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn zero_grl_is_identity(half in 1usize..8, rows in 1usize..10, seed in any::<u64>()) {
        let c = 2 * half;
        let x = tensor(&[rows, c], seed);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = register(&mut tape, &GrlParams::<f64>::zeros(c, true, true));
        let y = grl_forward(&mut tape, xv, &p).unwrap();
        prop_assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn es_transform_is_odd_bounded_and_monotone(d in -40.0f64..40.0, e in 0.0f64..5.0, rate in 0.01f64..4.0) {
        prop_assert_eq!(es_transform(-d, rate), -es_transform(d, rate));
        prop_assert!(es_transform(d, rate).abs() <= 1.0);
        prop_assert!(es_transform(d + e, rate) >= es_transform(d, rate));
    }

    #[test]
    fn psnr_symmetric_and_flip_invariant(w in 4usize..24, h in 4usize..24, s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (plane(w, h, s1), plane(w, h, s2));
        let ab = psnr(&a, &b, 1).unwrap();
        prop_assert_eq!(ab, psnr(&b, &a, 1).unwrap());
        let flipped = psnr(&a.flip_horizontal(), &b.flip_horizontal(), 1).unwrap();
        prop_assert!((ab - flipped).abs() <= 1e-9 * ab.abs().max(1.0));
    }

    #[test]
    fn ssim_of_identical_planes_is_one(w in 11usize..30, h in 11usize..30, seed in any::<u64>()) {
        let a = plane(w, h, seed);
        prop_assert_eq!(ssim(&a, &a, 0).unwrap(), 1.0);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude(seed in any::<u64>(), amp in 0.001f64..0.2, extra in 1.1f64..4.0) {
        let a = plane(16, 16, seed);
        let noise = plane(16, 16, seed ^ 0x5eed);
        let add = |k: f64| Plane::from_fn(16, 16, |x, y| a.at(x, y) + k * (noise.at(x, y) - 0.5));
        prop_assert!(psnr(&a, &add(amp), 0).unwrap() > psnr(&a, &add(amp * extra), 0).unwrap());
    }

    #[test]
    fn resizing_a_constant_gives_the_constant(w in 1usize..20, h in 1usize..20, v in 0.0f64..1.0, num in 1u32..5, den in 1u32..5) {
        let p = Plane::filled(w, h, v);
        let out = bicubic_resize(&p, Ratio::new(num, den)).unwrap();
        prop_assert!(out.data.iter().all(|&o| (o - v).abs() <= 1e-12));
    }

    #[test]
    fn dihedral_commutes_with_downscale(k in 0usize..8, n in 2usize..8, r in 2u32..5, seed in any::<u64>()) {
        let side = n * r as usize;
        let hr = tensor(&[2, side, side], seed);
        let down = Ratio::new(1, r);
        let a = resize_tensor(&dihedral(&hr, k), down).unwrap();
        let b = dihedral(&resize_tensor(&hr, down).unwrap(), k);
        prop_assert_eq!(a.shape(), b.shape());
        let err = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-12, "max error {err}");
    }

    #[test]
    fn config_text_round_trips(
        groups in 1usize..5, blocks in 1usize..7, heads in 1usize..5, per_head in 1usize..8,
        wh in 1usize..17, ww in 1usize..33, scale in 2usize..5, num in 1u32..4, den in 1u32..4,
        shift in any::<bool>(), arm in 1u8..7,
    ) {
        let cfg = ModelConfig {
            num_groups: groups,
            blocks_per_group: blocks,
            channels: 2 * heads * per_head,
            heads,
            window: WindowSpec::new(wh, ww),
            scale,
            ffn_ratio: Ratio::new(num, den),
            shift_windows: shift,
            attention: AttentionVariant::arm(arm).unwrap(),
            ..ModelConfig::default()
        };
        prop_assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn weights_round_trip_bit_exact(seed in any::<u64>(), arm in 1u8..7) {
        let cfg = ModelConfig { attention: AttentionVariant::arm(arm).unwrap(), ..ModelConfig::tiny() };
        let p: GrformerParams32 = init_parameters(&cfg, &mut Rng::new(seed));
        let (back_cfg, back) = weights::decode::<f32>(&weights::encode(&cfg, &p)).unwrap();
        prop_assert_eq!(back_cfg, cfg);
        prop_assert_eq!(back, p);
    }

    #[test]
    fn closed_form_params_match_instantiation(heads in 1usize..4, per_head in 1usize..5, blocks in 1usize..3, arm in 1u8..7, scale in 2usize..5) {
        let v = AttentionVariant::arm(arm).unwrap();
        let cfg = ModelConfig {
            num_groups: 1,
            blocks_per_group: blocks,
            channels: 2 * heads * per_head,
            heads,
            scale,
            attention: v,
            ..ModelConfig::tiny()
        };
        let p: GrformerParams64 = init_parameters(&cfg, &mut Rng::new(1));
        prop_assert_eq!(count_params(&cfg, v).total.params, scalar_count(&p) as u64);
    }
}
