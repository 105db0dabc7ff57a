use grformer::config::ModelConfig;
use grformer::network::init_parameters;
use grformer::training::{augment, dihedral, l1_loss, resize_tensor, synthetic_image, train_toy, training_pair, TrainConfig};
use grformer::verification::{finite_diff_gradcheck, tv_comparison, GRAD_STEP};
use grformer::{GrformerParams32, Rng, Tape, Tensor};
use num_rational::Ratio;

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

#[test]
fn zero_iterations_returns_initialization() {
    let cfg = ModelConfig::tiny();
    let tcfg = TrainConfig { seed: 11, ..TrainConfig::toy(0) };
    let run = train_toy::<f32>(&cfg, &tcfg, &synthetic_image(24, 24, 1)).unwrap();
    assert!(run.losses.is_empty());
    let init: GrformerParams32 = init_parameters(&cfg, &mut Rng::new(11).split("init"));
    assert_eq!(run.params, init);
}

#[test]
fn loss_curve_trends_down_and_is_reproducible() {
    let cfg = ModelConfig::tiny();
    let tcfg = TrainConfig::toy(200);
    let hr = synthetic_image(32, 32, 3);
    let a = train_toy::<f32>(&cfg, &tcfg, &hr).unwrap();
    let b = train_toy::<f32>(&cfg, &tcfg, &hr).unwrap();
    assert_eq!(a.losses.len(), 200);
    assert!(a.losses.iter().all(|l| l.is_finite()));
    assert!(median(&a.losses[180..]) < median(&a.losses[..20]));
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.params, b.params);
}

#[test]
fn l1_gradient_matches_finite_differences() {
    let mut rng = Rng::new(4);
    let p: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
    let t: Vec<f64> = p.iter().map(|v| v + if rng.uniform() < 0.5 { 0.3 } else { -0.3 }).collect();
    let (pred, target) = (Tensor::new(vec![3, 4], p).unwrap(), Tensor::new(vec![3, 4], t).unwrap());
    let r = finite_diff_gradcheck(
        "l1",
        &pred,
        |tape: &mut Tape<f64>, p| {
            let t = tape.constant(target.clone());
            l1_loss(tape, *p, t)
        },
        GRAD_STEP,
        1e-8,
    )
    .unwrap();
    assert!(r.pass, "{r}");
}

#[test]
fn augmentation_keeps_pairs_consistent() {
    let (hr, lr) = training_pair::<f64>(&synthetic_image(24, 36, 2), 3).unwrap();
    for k in 0..8 {
        let down = resize_tensor(&dihedral(&hr, k), Ratio::new(1, 3)).unwrap();
        let err = down.data().iter().zip(dihedral(&lr, k).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "k = {k}: {err}");
    }
    let mut rng = Rng::new(9);
    for _ in 0..8 {
        let (h, l) = augment(&hr, &lr, &mut rng);
        assert_eq!((h.shape()[1] / 3, h.shape()[2] / 3), (l.shape()[1], l.shape()[2]));
    }
}

#[test]
fn schedule_halves_at_milestones() {
    let t = TrainConfig::scaled(600_000);
    assert_eq!(t.lr_at(0), 2e-4);
    assert_eq!(t.lr_at(250_000), 1e-4);
    assert_eq!(t.lr_at(599_999), 2e-4 / 16.0);
}

#[test]
fn exponential_bias_is_smoother_than_table() {
    let cfg = ModelConfig::tiny();
    let tv = tv_comparison(&cfg, &TrainConfig::toy(150), &synthetic_image(32, 32, 0)).unwrap();
    println!("mean TV: es-rpb {:.4}, table {:.4}", tv.es_rpb, tv.table);
    assert!(tv.es_rpb < tv.table);
}
