mod common;

use common::*;
use histoclass::backbone::*;
use histoclass::descriptor::*;
use histoclass::imaging::FloatImage;
use histoclass::rng::SplitMix64;
use histoclass::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn conv_pool_gap_match_naive_oracles() {
    let mut rng = SplitMix64::new(2024);
    for case in 0..20 {
        let ic = 1 + rng.below(4) as usize;
        let oc = 1 + rng.below(4) as usize;
        let k = 1 + rng.below(4) as usize;
        let stride = 1 + rng.below(3) as usize;
        let pad = rng.below(3) as usize;
        let h = k + rng.below(9) as usize;
        let w = k + rng.below(9) as usize;
        let input = random_map(&mut rng, ic, h, w);
        let weights = random_tensor(&mut rng, vec![oc, ic, k, k]);
        let bias = random_tensor(&mut rng, vec![oc]);

        let fast = conv2d(&input, &weights, &bias, stride, pad).unwrap();
        let slow = naive_conv(&input, &weights, &bias, stride, pad);
        assert_eq!(fast.shape(), slow.shape(), "case {case}");
        assert!(max_abs_diff(&fast.data, &slow.data) <= 1e-12, "case {case}");

        let size = 1 + rng.below(3) as usize;
        let pstride = 1 + rng.below(2) as usize;
        if size <= h && size <= w {
            let fast = maxpool2d(&input, size, pstride).unwrap();
            let slow = naive_maxpool(&input, size, pstride);
            assert_eq!(fast, slow, "case {case}");
        }
        assert!(max_abs_diff(&global_avg_pool(&input), &naive_gap(&input)) <= 1e-12);
    }
}

#[test]
fn zero_image_descriptor_is_bias_driven() {
    let spec = build_reference_backbone(7);
    let d = extract_descriptor(&spec, &FloatImage::zeros(64, 64, 3)).unwrap();

    let mut expected = Vec::new();
    let mut x = FeatureMap::zeros(3, 64, 64);
    for layer in &spec.layers {
        x = match layer {
            LayerSpec::Conv { weights, bias, stride, pad } => naive_conv(&x, weights, bias, *stride, *pad),
            LayerSpec::Relu => naive_relu(&x),
            LayerSpec::MaxPool { size, stride } => {
                let p = naive_maxpool(&x, *size, *stride);
                expected.extend(naive_gap(&p));
                p
            }
        };
    }
    assert!(max_abs_diff(&d.values, &expected) <= 1e-12);

    // first block sees only its bias
    if let LayerSpec::Conv { bias, .. } = &spec.layers[0] {
        let relu_b: Vec<f64> = bias.data().iter().map(|b| b.max(0.0)).collect();
        assert!(max_abs_diff(&d.values[..8], &relu_b) <= 1e-15);
    }
}

#[test]
fn descriptor_is_deterministic_and_size_independent() {
    let spec = build_reference_backbone(3);
    let mut rng = SplitMix64::new(8);
    let mut img = FloatImage::zeros(64, 64, 3);
    img.data.iter_mut().for_each(|v| *v = rng.uniform(-120.0, 120.0));
    let a = extract_descriptor(&spec, &img).unwrap();
    let b = extract_descriptor(&spec, &img).unwrap();
    assert_eq!(a, b);

    let mut big = spec.clone();
    big.input_size = (96, 96);
    let d = extract_descriptor(&big, &FloatImage::zeros(96, 96, 3)).unwrap();
    assert_eq!(d.len(), 56);
}

#[test]
fn spec_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = build_reference_backbone(5);
    spec.save(dir.path()).unwrap();
    let back = BackboneSpec::load(dir.path()).unwrap();
    assert_eq!(back, spec);
    let back = BackboneSpec::load(&dir.path().join("spec.txt")).unwrap();
    assert_eq!(back, spec);

    let vgg = vgg_like_backbone(VggVariant::Vgg16, [4, 4, 4, 4, 4], 32, &[4, 11, 15], 1).unwrap();
    let sub = dir.path().join("vgg");
    vgg.save(&sub).unwrap();
    assert_eq!(BackboneSpec::load(&sub).unwrap(), vgg);
}

#[test]
fn descriptor_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = build_reference_backbone(1);
    let d = extract_descriptor(&spec, &FloatImage::zeros(64, 64, 3)).unwrap();
    let cache = DescriptorCache::new(dir.path(), &spec.name);
    assert!(!cache.contains("normal_0001#3"));
    cache.store("normal_0001#3", &d).unwrap();
    assert!(cache.contains("normal_0001#3"));
    let back = cache.load("normal_0001#3").unwrap();
    assert_eq!(back, d);

    // a bare tensor without sidecar loads as one external segment
    let ext = DescriptorCache::new(dir.path(), "external");
    Tensor::vector(vec![1.0, 2.0, 3.0]).save(&ext.tensor_path("x")).unwrap();
    let e = ext.load("x").unwrap();
    assert_eq!(e.segments, vec![("external".to_string(), 3)]);
}

proptest! {
    #[test]
    fn gap_is_permutation_invariant(seed in any::<u64>(), c in 1usize..4, h in 1usize..7, w in 1usize..7) {
        let mut rng = SplitMix64::new(seed);
        let fm = random_map(&mut rng, c, h, w);
        let mut order: Vec<usize> = (0..h * w).collect();
        rng.shuffle(&mut order);
        let mut data = Vec::with_capacity(fm.data.len());
        for ch in 0..c {
            let plane = fm.plane(ch);
            data.extend(order.iter().map(|&i| plane[i]));
        }
        let permuted = FeatureMap::new(c, h, w, data).unwrap();
        prop_assert!(max_abs_diff(&global_avg_pool(&fm), &global_avg_pool(&permuted)) <= 1e-12);
    }

    #[test]
    fn gap_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = SplitMix64::new(seed);
        let f1 = random_map(&mut rng, 3, 5, 4);
        let f2 = random_map(&mut rng, 3, 5, 4);
        let combo: Vec<f64> = f1.data.iter().zip(&f2.data).map(|(x, y)| a * x + b * y).collect();
        let lhs = global_avg_pool(&FeatureMap::new(3, 5, 4, combo).unwrap());
        let rhs: Vec<f64> = global_avg_pool(&f1)
            .iter()
            .zip(global_avg_pool(&f2))
            .map(|(x, y)| a * x + b * y)
            .collect();
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-12);
    }
}
