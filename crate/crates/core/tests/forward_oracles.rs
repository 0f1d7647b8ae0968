mod common;

use common::oracle::*;
use rand::Rng;
use regcache_core::encoder::{EncoderModel, FeatureModel, ForwardOptions, KvPrefix, LayerSite, SiteKind};
use regcache_core::fixture::{random_image, random_model};
use regcache_core::quant::{QuantSpec, QuantizedModelView, TargetSites};
use regcache_core::regcache::{select_deletion, DeletionRule};
use regcache_core::rng::seeded;

#[test]
fn plain_forward_matches_reference() {
    let mut rng = seeded(1);
    for s in 0..20 {
        let cfg = random_tiny_config(&mut rng);
        let m: EncoderModel<f64> = random_model(&cfg, s, 1.0);
        let img = random_image(&cfg, &mut rng);
        let got = m.forward(&img, &ForwardOptions::none()).unwrap().features;
        let want = append_forward(&m, &img, 0, &[], 1);
        assert!(max_abs_diff(got.data(), &want) < 1e-10, "config {cfg:?}");
    }
}

#[test]
fn prefix_matches_appended_phantom_tokens() {
    let mut rng = seeded(2);
    for s in 0..30 {
        let cfg = random_tiny_config(&mut rng);
        let m: EncoderModel<f64> = random_model(&cfg, 100 + s, 1.0);
        let img = random_image(&cfg, &mut rng);
        let src = random_image(&cfg, &mut rng);
        let start = rng.gen_range(0..cfg.depth);
        let tau = rng.gen_range(1..=3);
        let tok = rng.gen_range(0..cfg.num_tokens());
        let kv = m.compute_prefix_kv(&src, tok, start).unwrap();
        assert_eq!(kv.len(), cfg.depth - start);
        let prefix = KvPrefix {
            start_block: start,
            kv: kv.clone(),
            tau,
        };
        let opts = ForwardOptions {
            prefix: Some(&prefix),
            ..ForwardOptions::none()
        };
        let got = m.forward(&img, &opts).unwrap().features;
        let want = append_forward(&m, &img, start, &kv, tau);
        assert!(max_abs_diff(got.data(), &want) < 1e-10);
    }
}

#[test]
fn deletion_matches_subsequence_rerun() {
    let mut rng = seeded(3);
    let mut checked = 0;
    for s in 0..40 {
        let cfg = random_tiny_config(&mut rng);
        let n = cfg.num_tokens();
        let protect = usize::from(cfg.has_cls());
        if n - protect < 2 {
            continue;
        }
        let m: EncoderModel<f64> = random_model(&cfg, 200 + s, 1.0);
        let img = random_image(&cfg, &mut rng);
        let at = rng.gen_range(0..cfg.depth);
        let k = rng.gen_range(1..n - protect);
        let mut opts = ForwardOptions::none();
        opts.deletion = Some(DeletionRule::new(at, k));
        let out = m.forward(&img, &opts).unwrap();
        let x = block_input(&m, &img, at);
        let protected: Vec<usize> = (0..protect).collect();
        let removed = deletion_by_sort(&x, k, &protected);
        let want = rerun_without(&m, &img, at, &removed);
        assert!(max_abs_diff(out.features.data(), &want) < 1e-10);
        let kept: Vec<usize> = (0..n).filter(|i| !removed.contains(i)).collect();
        assert_eq!(out.retained_token_map, kept);
        checked += 1;
    }
    assert!(checked >= 20);
}

#[test]
fn deletion_selection_matches_sort_with_ties() {
    let mut rng = seeded(4);
    for _ in 0..300 {
        let n = rng.gen_range(2..12);
        let rows: Rows = (0..n)
            .map(|_| (0..3).map(|_| rng.gen_range(-3..=3) as f64).collect())
            .collect();
        let t = regcache_core::Tensor::from_rows(&rows);
        let protect: Vec<usize> = if rng.gen_bool(0.5) { vec![0] } else { vec![] };
        let k = rng.gen_range(0..n - protect.len());
        assert_eq!(
            select_deletion(&t, k, &protect).unwrap(),
            deletion_by_sort(&rows, k, &protect)
        );
    }
}

#[test]
fn pass_through_quantization_is_exact() {
    let mut rng = seeded(5);
    let cfg = random_tiny_config(&mut rng);
    let m: EncoderModel<f64> = random_model(&cfg, 9, 1.0);
    let img = random_image(&cfg, &mut rng);
    let q = QuantizedModelView::new(&m, QuantSpec::new(32, 32)).unwrap();
    assert_eq!(
        q.forward(&img, &ForwardOptions::none()).unwrap().features,
        m.forward(&img, &ForwardOptions::none()).unwrap().features
    );
}

#[test]
fn single_site_quantization_is_local() {
    let mut rng = seeded(6);
    let mut cfg = random_tiny_config(&mut rng);
    cfg.depth = 3;
    let m: EncoderModel<f64> = random_model(&cfg, 10, 1.0);
    let img = random_image(&cfg, &mut rng);
    let site = LayerSite::new(1, SiteKind::Fc2In);
    let q = QuantizedModelView::new(&m, QuantSpec::single_site(8, 8, site)).unwrap();
    assert_eq!(q.spec.target_sites, TargetSites::Sites([site].into()));
    let taps: Vec<LayerSite> = (0..3)
        .flat_map(|b| SiteKind::ALL.iter().map(move |&k| LayerSite::new(b, k)))
        .collect();
    let opts = ForwardOptions::with_taps(taps.iter().copied());
    let a = m.forward(&img, &opts).unwrap();
    let b = q.forward(&img, &opts).unwrap();
    for t in taps.iter().filter(|t| **t <= site) {
        assert_eq!(a.tap(*t), b.tap(*t), "{t} changed upstream of the quantized site");
    }
    assert_ne!(
        a.tap(LayerSite::new(1, SiteKind::BlockOutHidden)),
        b.tap(LayerSite::new(1, SiteKind::BlockOutHidden))
    );
}

#[test]
fn concurrent_forwards_agree_with_sequential() {
    use rayon::prelude::*;
    let mut rng = seeded(7);
    let cfg = random_tiny_config(&mut rng);
    let m: EncoderModel<f64> = random_model(&cfg, 11, 1.0);
    let imgs: Vec<_> = (0..16).map(|_| random_image::<f64>(&cfg, &mut rng)).collect();
    let seq: Vec<_> = imgs
        .iter()
        .map(|i| m.forward(i, &ForwardOptions::none()).unwrap().features)
        .collect();
    let par: Vec<_> = imgs
        .par_iter()
        .map(|i| m.forward(i, &ForwardOptions::none()).unwrap().features)
        .collect();
    assert_eq!(seq, par);
}
