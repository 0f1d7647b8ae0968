use regcache_core::encoder::{EncoderConfig, EncoderModel, FeatureModel, ForwardOptions, LayerSite, Pooling, SiteKind};
use regcache_core::evalkit::FidelityMetric;
use regcache_core::fixture::*;
use regcache_core::io::{Dataset, ImageLayout, Sample};
use regcache_core::sensitivity::*;
use regcache_core::{Error, Tensor};

fn probe(n: usize) -> Dataset<f64> {
    planted_images(n, BackgroundPlacement::Random, 21)
}

#[test]
fn pass_through_scan_has_zero_drops() {
    let m: EncoderModel<f64> = planted_model(1);
    let p = probe(4);
    let metric = FidelityMetric::with_reference(&m, &p).unwrap();
    let r = sensitivity_scan(&m, &p, &metric, (32, 32)).unwrap();
    assert_eq!(r.entries.len(), 4 * m.depth());
    assert!(r.entries.iter().all(|e| e.metric_drop == 0.0));
    assert_eq!(r.l_q, LayerSite::new(0, SiteKind::QkvIn));
    assert!(r.to_csv().starts_with("block,site,metric_q,drop\n0,qkv_in,"));
}

#[test]
fn planted_fc2_is_the_sensitive_site() {
    let m: EncoderModel<f64> = planted_model(7);
    let p = probe(16);
    let metric = FidelityMetric::with_reference(&m, &p).unwrap();
    let r = sensitivity_scan(&m, &p, &metric, (8, 8)).unwrap();
    assert_eq!(r.l_q, LayerSite::new(PLANTED_BLOCK, SiteKind::Fc2In));
    for e in &r.entries {
        assert_eq!(e.metric_drop, r.baseline_metric - e.metric_quantized);
    }
}

#[test]
fn empty_probe_is_an_input_error() {
    let m: EncoderModel<f64> = planted_model(1);
    let p = probe(0);
    let metric = FidelityMetric::new(&m);
    assert!(matches!(
        sensitivity_scan(&m, &p, &metric, (8, 8)),
        Err(Error::Input(_))
    ));
    assert!(matches!(norm_profile(&m, &p, SiteKind::Fc2In), Err(Error::Input(_))));
}

#[test]
fn zero_model_profile_is_zero() {
    let m = EncoderModel::<f64>::zeros(fixture_config()).unwrap();
    let prof = norm_profile(&m, &probe(3), SiteKind::BlockOutHidden).unwrap();
    assert!(prof
        .per_block
        .iter()
        .all(|b| b.max_linf == 0.0 && b.mean_other_linf == 0.0));
}

#[test]
fn single_image_profile_matches_taps() {
    let m: EncoderModel<f64> = planted_model(2);
    let p = probe(1);
    let prof = norm_profile(&m, &p, SiteKind::Fc2In).unwrap();
    let sites: Vec<LayerSite> = (0..m.depth()).map(|b| LayerSite::new(b, SiteKind::Fc2In)).collect();
    let out = m
        .forward(&p.samples[0].image, &ForwardOptions::with_taps(sites.clone()))
        .unwrap();
    for (b, s) in sites.iter().enumerate() {
        let norms: Vec<f64> = out.tap(*s).unwrap().row_linf().into_iter().collect();
        let mx = norms.iter().cloned().fold(0.0, f64::max);
        let arg = norms.iter().position(|&v| v == mx).unwrap();
        let other: f64 = norms
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != arg)
            .map(|(_, v)| v)
            .sum::<f64>()
            / (norms.len() - 1) as f64;
        assert_eq!(prof.per_block[b].max_linf, mx);
        assert!((prof.per_block[b].mean_other_linf - other).abs() < 1e-12);
        assert!(prof.per_block[b].max_linf >= prof.per_block[b].mean_other_linf);
    }
    assert!(prof.to_csv().starts_with("block,max_linf,mean_other_linf\n0,"));
}

#[test]
fn profile_ignores_unrelated_taps() {
    let m: EncoderModel<f64> = planted_model(3);
    let p = probe(4);
    let plain = norm_profile(&m, &p, SiteKind::Fc2In).unwrap();
    let extra = ForwardOptions::with_taps([LayerSite::new(1, SiteKind::QkvIn), LayerSite::new(4, SiteKind::BlockIn)]);
    assert_eq!(norm_profile_with(&m, &p, SiteKind::Fc2In, &extra).unwrap(), plain);
    assert!(matches!(norm_profile(&m, &p, SiteKind::QkvIn), Err(Error::Config(_))));
}

#[test]
fn profile_max_equals_selected_outlier_norms() {
    let m: EncoderModel<f64> = planted_model(4);
    let p = probe(6);
    let prof = norm_profile(&m, &p, SiteKind::Fc2In).unwrap();
    for b in 0..m.depth() {
        let stats = outlier_cosine_stats(&m, &p, LayerSite::new(b, SiteKind::Fc2In), None, 0).unwrap();
        let mean: f64 = stats.outlier_tokens.iter().map(|t| t.1).sum::<f64>() / p.len() as f64;
        assert!((mean - prof.per_block[b].max_linf).abs() < 1e-12);
    }
}

#[test]
fn masked_profiles() {
    let m: EncoderModel<f64> = planted_model(5);
    let p = probe(1);
    let img = &p.samples[0].image;
    let ones = Tensor::full(&[8, 8], 1.0);
    let single = norm_profile(&m, &p, SiteKind::BlockOutHidden).unwrap();
    let masked = masked_norm_profile(&m, img, &ones, SiteKind::BlockOutHidden).unwrap();
    assert_eq!(masked.per_block, single.per_block);

    let zero_img = Dataset::new(
        ImageLayout::chw(3, 8, 8),
        vec![Sample {
            id: "z".into(),
            image: Tensor::zeros(&[3, 8, 8]),
            label: None,
        }],
    )
    .unwrap();
    let zeros = masked_norm_profile(&m, img, &Tensor::zeros(&[8, 8]), SiteKind::BlockOutHidden).unwrap();
    assert_eq!(
        zeros.per_block,
        norm_profile(&m, &zero_img, SiteKind::BlockOutHidden).unwrap().per_block
    );

    assert!(masked_norm_profile(&m, img, &Tensor::full(&[4, 8], 1.0), SiteKind::BlockOutHidden).is_err());
    assert!(masked_norm_profile(&m, img, &Tensor::full(&[8, 8], 0.5), SiteKind::BlockOutHidden).is_err());
}

#[test]
fn foreground_only_images_peak_earlier() {
    let m: EncoderModel<f64> = planted_model(5);
    let p = probe(8);
    for s in &p.samples {
        let bg = s.label.unwrap();
        let orig = masked_norm_profile(&m, &s.image, &Tensor::full(&[8, 8], 1.0), SiteKind::BlockOutHidden).unwrap();
        let fg = masked_norm_profile(&m, &s.image, &patch_mask(bg, false), SiteKind::BlockOutHidden).unwrap();
        // the sink appears after block 0 in foreground-only images, after block 2 otherwise
        assert!(fg.per_block[0].max_linf > orig.per_block[0].max_linf);
        assert!(fg.per_block[1].max_linf > orig.per_block[1].max_linf);
    }
}

#[test]
fn sink_frequencies() {
    let m: EncoderModel<f64> = planted_model(1);
    let one = sink_frequency_profile(&m, &probe(1), SiteKind::BlockOutHidden).unwrap();
    for b in &one {
        assert_eq!(b.frequencies.iter().filter(|&&f| f == 1.0).count(), 1);
        assert_eq!(b.top1_frequency, 1.0);
    }
    let many = sink_frequency_profile(&m, &probe(20), SiteKind::Fc2In).unwrap();
    for b in &many {
        assert!((b.frequencies.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let fixed = planted_images::<f64>(16, BackgroundPlacement::Fixed(9), 3);
    let locked = sink_frequency_profile(&m, &fixed, SiteKind::BlockOutHidden).unwrap();
    assert_eq!(locked[PLANTED_BLOCK].top1_position, 10);
    assert_eq!(locked[PLANTED_BLOCK].top1_frequency, 1.0);
}

#[test]
fn cosine_stats_examples() {
    let m: EncoderModel<f64> = planted_model(1);
    let one = probe(1);
    let site = LayerSite::new(PLANTED_BLOCK, SiteKind::Fc2In);
    assert!(matches!(
        outlier_cosine_stats(&m, &one, site, None, 0),
        Err(Error::Input(_))
    ));

    let twin = Dataset::new(
        one.layout,
        vec![
            one.samples[0].clone(),
            Sample {
                id: "b".into(),
                ..one.samples[0].clone()
            },
        ],
    )
    .unwrap();
    let s = outlier_cosine_stats(&m, &twin, site, None, 0).unwrap();
    assert!((s.outlier.mean - 1.0).abs() < 1e-12);
    assert_eq!(s.pairs, 1);

    // two channels copied straight into the first two dims; the outliers point along different axes
    let cfg = EncoderConfig {
        depth: 1,
        width: 4,
        heads: 1,
        mlp_hidden: 4,
        patch_size: 1,
        image_size: 2,
        channels: 2,
        pooling: Pooling::Mean,
        cls_token: None,
        head_dim: None,
        layer_norm_eps: 1e-6,
        pre_norm: false,
    };
    let mut lin = EncoderModel::<f64>::zeros(cfg).unwrap();
    lin.patch_w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]]);
    let img = |a: [f64; 2]| {
        let mut d = vec![0.1; 8];
        d[0] = a[0];
        d[4] = a[1];
        Tensor::new(vec![2, 2, 2], d).unwrap()
    };
    let data = Dataset::new(
        ImageLayout::chw(2, 2, 2),
        vec![
            Sample {
                id: "x".into(),
                image: img([10.0, 0.0]),
                label: None,
            },
            Sample {
                id: "y".into(),
                image: img([0.0, 10.0]),
                label: None,
            },
        ],
    )
    .unwrap();
    let s = outlier_cosine_stats(&lin, &data, LayerSite::new(0, SiteKind::BlockIn), None, 0).unwrap();
    assert_eq!(s.outlier.mean, 0.0);
    assert_eq!(s.outlier_tokens, vec![(0, 10.0), (0, 10.0)]);
}

#[test]
fn sampled_pairs_are_deterministic() {
    let m: EncoderModel<f64> = planted_model(1);
    let p = probe(10);
    let site = LayerSite::new(PLANTED_BLOCK, SiteKind::Fc2In);
    let a = outlier_cosine_stats(&m, &p, site, Some(12), 5).unwrap();
    let b = outlier_cosine_stats(&m, &p, site, Some(12), 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.pairs, 12);
    // fixture sinks share one direction; random tokens do not
    assert!(a.outlier.mean > a.normal.mean);
}
