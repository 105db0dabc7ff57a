use grformer::complexity::{count_macs_with, count_params, MacConvention};
use grformer::config::{AttentionVariant, ModelConfig, WindowSpec};
use grformer::network::init_parameters;
use grformer::params::scalar_count;
use grformer::{GrformerParams32, Rng};

#[test]
fn closed_form_matches_instantiated_parameters() {
    for arm in 1..=6 {
        let variant = AttentionVariant::arm(arm).unwrap();
        for scale in [2, 3, 4] {
            let cfg = ModelConfig { attention: variant, ..ModelConfig::default().with_scale(scale) };
            let p: GrformerParams32 = init_parameters(&cfg, &mut Rng::new(0));
            assert_eq!(count_params(&cfg, variant).total.params, scalar_count(&p) as u64, "arm {arm} x{scale}");
        }
    }
    let cfg = ModelConfig::tiny();
    let p: GrformerParams32 = init_parameters(&cfg, &mut Rng::new(0));
    assert_eq!(count_params(&cfg, cfg.attention).total.params, scalar_count(&p) as u64);
}

#[test]
fn position_bias_growth_with_window() {
    let small = ModelConfig { window: WindowSpec::new(8, 8), ..ModelConfig::default() };
    let large = ModelConfig { window: WindowSpec::new(16, 16), ..ModelConfig::default() };
    let table = AttentionVariant::arm(6).unwrap();
    let row = |cfg: &ModelConfig, v| count_params(cfg, v).row("attn.position_bias").unwrap().params;
    let ratio = row(&large, table) as f64 / row(&small, table) as f64;
    assert!((ratio - 961.0 / 225.0).abs() < 1e-12);
    assert_eq!(row(&large, AttentionVariant::GRSA), row(&small, AttentionVariant::GRSA));
}

#[test]
fn pixel_dependent_macs_scale_with_area() {
    let cfg = ModelConfig::default();
    let a = count_macs_with(&cfg, (1280, 720), AttentionVariant::GRSA, MacConvention::Full);
    let b = count_macs_with(&cfg, (2560, 1440), AttentionVariant::GRSA, MacConvention::Full);
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        if ra.name == "attn.position_bias" {
            assert_eq!(ra.macs, rb.macs);
        } else {
            assert_eq!(4 * ra.macs, rb.macs, "{}", ra.name);
        }
    }
}
