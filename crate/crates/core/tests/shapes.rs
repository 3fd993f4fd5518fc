use eam_core::attention::AttentionVariant;
use eam_core::autodiff::Graph;
use eam_core::multiscale::{effective_dilation, Model, ModelConfig, Strategy};
use eam_core::{ParamStore, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn contracts_hold_over_config_grid() {
    let mut combos = 0;
    for strategy in Strategy::ALL {
        for variant in [AttentionVariant::Icbam, AttentionVariant::Cbam] {
            for conv_features in [true, false] {
                for (extent, c2, c_prime) in [(32, 2, 4), (64, 4, 8)] {
                    let mut cfg = ModelConfig::with_widths(3, extent, c2, c_prime);
                    cfg.strategy = strategy;
                    cfg.eam.variant = variant;
                    cfg.eam.include_conv_features = conv_features;
                    cfg.aspp_out = 5;
                    let mut store = ParamStore::<f32>::new();
                    let model = Model::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(combos)).unwrap();
                    let mut g = Graph::new();
                    let x = g.constant(Tensor4::full([2, 3, extent, extent], 0.5));
                    let out = model.forward(&mut g, &store, x).unwrap();
                    for (i, &t) in out.taps.iter().enumerate() {
                        let side = extent >> (i + 2);
                        assert_eq!(g.shape(t).dims(), [2, c2 << i, side, side]);
                        let enriched = g.shape(out.enriched[i]);
                        if strategy.uses_eam() {
                            let c = if conv_features { 2 * c_prime } else { c_prime };
                            assert_eq!(enriched.dims(), [2, c, side, side]);
                        } else {
                            assert_eq!(enriched, g.shape(t));
                        }
                        assert_eq!(g.shape(out.pooled[i]).dims(), [2, cfg.level_widths()[i], 1, 1]);
                    }
                    let fused = g.shape(out.fused);
                    assert_eq!(fused.c, cfg.fused_width());
                    if strategy.uses_aspp() {
                        assert_eq!(fused.c, 4 * 5);
                    }
                    assert_eq!(g.shape(out.logits).dims(), [2, 3, 1, 1]);
                    combos += 1;
                }
            }
        }
    }
    assert!(combos >= 12);
}

#[test]
fn dilations_clamp_to_small_maps() {
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(ModelConfig::with_widths(2, 64, 2, 4), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    // level extents 16, 8, 4, 2
    let d: Vec<[usize; 4]> = model.levels.iter().map(|l| l.aspp.unwrap().dilations()).collect();
    assert_eq!(d[0], [1, 6, 7, 7]);
    assert_eq!(d[1], [1, 3, 3, 3]);
    assert_eq!(d[3], [1, 1, 1, 1]);
    assert_eq!(effective_dilation(18, 64), 18);
}

#[test]
fn extents_not_divisible_by_32_are_rejected() {
    let mut store = ParamStore::<f32>::new();
    assert!(Model::new(ModelConfig::desk(4, 48), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}
