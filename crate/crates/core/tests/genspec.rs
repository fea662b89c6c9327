use hyperinvert_core::genspec::*;
use proptest::prelude::*;

const VARIANTS: [HeadVariant; 4] = [
    HeadVariant::PerChannelStandard,
    HeadVariant::PerChannelSharedMix,
    HeadVariant::Separable,
    HeadVariant::PerParameterNaive,
];
const POLICIES: [LayerPolicy; 4] = [
    LayerPolicy::MediumFineConv,
    LayerPolicy::AllConv,
    LayerPolicy::AllIncludingTorgb,
    LayerPolicy::None,
];

// Independent count, written out layer by layer from the head tables.
fn hand_count(spec: &GeneratorSpec, cfg: &HyperNetConfig) -> u64 {
    let conv = |k: u64, ci: u64, co: u64, bias: bool| k * k * ci * co + if bias { co } else { 0 };
    let bn = |c: u64| 2 * c;
    let b = &cfg.backbone;
    let w: Vec<u64> = b.widths.iter().map(|&x| x as u64).collect();
    let mut total = conv(b.stem_kernel as u64, b.in_channels as u64, w[0], false) + bn(w[0]);
    let mut c_in = w[0];
    for stage in 0..4 {
        for blk in 0..b.blocks[stage] {
            let width = w[stage];
            total += conv(3, c_in, width, false) + bn(width) + conv(3, width, width, false) + bn(width);
            let downsample = stage > 0 && blk == 0;
            if downsample || c_in != width {
                total += conv(1, c_in, width, false) + bn(width);
            }
            c_in = width;
        }
    }
    let f = b.widths[3] as u64;
    let c = spec.max_conv_channels() as u64;
    let d = cfg.shared_fc_dim as u64;
    let selected: Vec<&LayerSpec> = spec
        .layers
        .iter()
        .filter(|l| match cfg.layer_policy {
            LayerPolicy::MediumFineConv => l.kind == LayerKind::Conv && l.group != LayerGroup::Coarse,
            LayerPolicy::AllConv => l.kind == LayerKind::Conv,
            LayerPolicy::AllIncludingTorgb => true,
            LayerPolicy::None => false,
        })
        .collect();
    let h = (f / 2).max(1);
    let s = (f / 4).max(1);
    let standard_head = |l: &LayerSpec| {
        let (k, ci, co) = (l.kernel as u64, l.c_in as u64, l.c_out as u64);
        let out = match cfg.head_variant {
            HeadVariant::PerChannelStandard | HeadVariant::PerChannelSharedMix => ci * co,
            HeadVariant::PerParameterNaive => k * k * ci * co,
            HeadVariant::Separable => k * k * (ci + co),
        };
        conv(3, f, h, true) + conv(3, h, h, true) + conv(3, h, f, true) + f * out + out
    };
    let slim_head = conv(3, f, s, true) + 3 * conv(3, s, s, true) + conv(3, s, f, true) + f * d + d;
    let pair = d * (c * d) + c * d + d * c + c;
    let square: Vec<&&LayerSpec> = selected
        .iter()
        .filter(|l| {
            cfg.head_variant == HeadVariant::PerChannelSharedMix
                && l.kind == LayerKind::Conv
                && l.c_in as u64 == c
                && l.c_out as u64 == c
        })
        .collect();
    let share = !square.is_empty()
        && square.len() as u64 * slim_head + pair <= square.iter().map(|l| standard_head(l)).sum::<u64>();
    for l in &selected {
        if share && square.iter().any(|q| q.index == l.index) {
            total += slim_head;
        } else {
            total += standard_head(l);
        }
    }
    if share {
        total += pair;
    }
    total
}

#[test]
fn full_spec_final_configuration_is_near_reported_size() {
    let started = std::time::Instant::now();
    let report = count_hypernet_params(&full_stylegan2_spec(), &HyperNetConfig::paper_final()).unwrap();
    assert!(started.elapsed().as_secs_f64() < 1.0);
    let rel = (report.total as f64 - 332e6).abs() / 332e6;
    assert!(rel <= 0.10, "total {} off by {:.1}%", report.total, rel * 100.0);
    assert_eq!(
        report.total,
        report.backbone_params + report.shared_params + report.per_head_params.values().sum::<u64>()
    );
}

#[test]
fn full_spec_hand_count_agrees() {
    let spec = full_stylegan2_spec();
    for v in VARIANTS {
        for p in POLICIES {
            let cfg = HyperNetConfig::paper_final().with_variant(v).with_policy(p);
            assert_eq!(count_hypernet_params(&spec, &cfg).unwrap().total, hand_count(&spec, &cfg), "{v} {p}");
        }
    }
}

#[test]
fn backbone_only_when_nothing_is_refined() {
    let cfg = HyperNetConfig::paper_final().with_policy(LayerPolicy::None);
    let r = count_hypernet_params(&full_stylegan2_spec(), &cfg).unwrap();
    assert!(r.per_head_params.is_empty());
    assert_eq!(r.total, r.backbone_params);
}

#[test]
fn layer_15_per_channel_head_emits_512_by_256() {
    let spec = full_stylegan2_spec();
    let l = spec.layer(15).unwrap();
    let h = head_layout(&spec, l, &HyperNetConfig::paper_final());
    assert_eq!((h.fc_in, h.fc_out), (512, 512 * 256));
}

fn spec_and_config() -> impl Strategy<Value = (GeneratorSpec, HyperNetConfig)> {
    (3u32..6, 2usize..6, 0usize..3).prop_map(|(log_res, base_quarter, bw_extra)| {
        let res = 1usize << log_res;
        let base = base_quarter * 4;
        let spec = toy_spec(res, base).unwrap();
        // keep the backbone at least as wide as the widest generator layer
        let bw = (base / 8).max(1) + bw_extra;
        (spec.clone(), HyperNetConfig::toy(&spec, res, bw))
    })
}

proptest! {
    #[test]
    fn toy_count_matches_hand_sum((spec, cfg) in spec_and_config(), v in 0usize..4, p in 0usize..4) {
        let cfg = cfg.with_variant(VARIANTS[v]).with_policy(POLICIES[p]);
        prop_assert_eq!(count_hypernet_params(&spec, &cfg).unwrap().total, hand_count(&spec, &cfg));
    }

    #[test]
    fn row_ordering_holds((spec, cfg) in spec_and_config(), p in 0usize..3) {
        let cfg = cfg.with_policy(POLICIES[p]);
        let count = |v| count_hypernet_params(&spec, &cfg.clone().with_variant(v)).unwrap().total;
        let naive = count(HeadVariant::PerParameterNaive);
        let standard = count(HeadVariant::PerChannelStandard);
        let shared = count(HeadVariant::PerChannelSharedMix);
        prop_assert!(naive >= standard && standard >= shared, "{naive} {standard} {shared}");
    }

    #[test]
    fn naive_final_fc_is_nine_times_per_channel((spec, cfg) in spec_and_config(), p in 0usize..3) {
        let cfg = cfg.with_policy(POLICIES[p]);
        let pc = count_hypernet_params(&spec, &cfg.clone().with_variant(HeadVariant::PerChannelStandard)).unwrap();
        let naive = count_hypernet_params(&spec, &cfg.with_variant(HeadVariant::PerParameterNaive)).unwrap();
        for (idx, n) in &naive.final_fc_params {
            if spec.layer(*idx).unwrap().kernel == 3 {
                prop_assert_eq!(*n, 9 * pc.final_fc_params[idx]);
            }
        }
    }

    #[test]
    fn medium_fine_never_selects_torgb((spec, _cfg) in spec_and_config()) {
        for i in select_refined_layers(&spec, LayerPolicy::MediumFineConv) {
            prop_assert_eq!(spec.layer(i).unwrap().kind, LayerKind::Conv);
        }
    }

    #[test]
    fn counting_is_pure((spec, cfg) in spec_and_config()) {
        prop_assert_eq!(count_hypernet_params(&spec, &cfg).unwrap(), count_hypernet_params(&spec, &cfg).unwrap());
    }
}

#[test]
fn row_ordering_on_full_spec() {
    let spec = full_stylegan2_spec();
    for p in [LayerPolicy::MediumFineConv, LayerPolicy::AllConv, LayerPolicy::AllIncludingTorgb] {
        let cfg = HyperNetConfig::paper_final().with_policy(p);
        let count = |v| count_hypernet_params(&spec, &cfg.clone().with_variant(v)).unwrap().total;
        assert!(count(HeadVariant::PerParameterNaive) >= count(HeadVariant::PerChannelStandard));
        assert!(count(HeadVariant::PerChannelStandard) >= count(HeadVariant::PerChannelSharedMix));
    }
}

#[test]
fn full_spec_all_conv_has_seventeen_layers_none_torgb() {
    let spec = full_stylegan2_spec();
    let by_filter: Vec<usize> = spec.layers.iter().filter(|l| l.kind == LayerKind::Conv).map(|l| l.index).collect();
    assert_eq!(select_refined_layers(&spec, LayerPolicy::AllConv), by_filter);
    assert_eq!(by_filter.len(), 17);
}

#[test]
fn toy_32_conv_count_matches_enumeration() {
    // 4x4: one conv; 8, 16, 32: an upsampling conv and a plain conv each.
    let mut convs = 0;
    let mut res = 4;
    while res <= 32 {
        convs += if res == 4 { 1 } else { 2 };
        res *= 2;
    }
    assert_eq!(toy_spec(32, 32).unwrap().conv_layers().count(), convs);
}
