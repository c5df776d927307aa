//! Property tests for the invariants of the network engine, data handling,
//! records and evaluation.

use dfkd_core::data::{load_set, per_class_means, save_set, LabeledImageSet};
use dfkd_core::distill::{distill_kd, evaluate, TrainConfig};
use dfkd_core::nn::{sample_dropout, DenseNetwork, DropoutSpec, Nonlinearity};
use dfkd_core::records::{
    from_bytes, jittered_cholesky, record_all_layer_stats, record_spectral, record_top_layer_stats, to_bytes,
    ActivationRecord,
};
use dfkd_core::rng::rng_for;
use dfkd_core::spectral::{network_bases, SpectralMode};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;

fn random_net(seed: u64, top: Nonlinearity) -> DenseNetwork<f64> {
    let mut rng = rng_for(seed, &[]);
    let widths: Vec<usize> = (0..rng.gen_range(2..5)).map(|_| rng.gen_range(1..7)).collect();
    let net = DenseNetwork::<f64>::from_widths(&widths, &mut rng).unwrap();
    let layers = net.layers().len();
    let mut layers_vec = net.layers().to_vec();
    layers_vec[layers - 1].nonlinearity = top;
    DenseNetwork::new(layers_vec).unwrap()
}

fn random_inputs(seed: u64, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let mut rng = rng_for(seed, &[1]);
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-scale..scale))
}

/// Labelled set with values on the 8-bit grid, so it survives IDX quantization.
fn quantized_set(seed: u64, n: usize, side: usize, classes: usize) -> LabeledImageSet {
    let mut rng = rng_for(seed, &[2]);
    let images = Array2::from_shape_simple_fn((n, side * side), || rng.gen_range(0..=255u8) as f32 / 255.0);
    let labels = (0..n).map(|_| rng.gen_range(0..classes) as u8).collect();
    LabeledImageSet::new(images, labels, side, side, classes).unwrap()
}

/// Small separable set: class `c` lights pixel block `c`.
fn blocks_set(seed: u64, n: usize) -> LabeledImageSet {
    let mut rng = rng_for(seed, &[3]);
    let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
    let images = Array2::from_shape_fn((n, 9), |(i, j)| {
        let on = j / 3 == labels[i] as usize;
        (if on { 0.7 } else { 0.05 }) + rng.gen_range(0.0..0.25f32)
    });
    LabeledImageSet::new(images, labels, 3, 3, 3).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_is_a_distribution(seed in any::<u64>(), t in 0.05f64..50.0, scale in 0.1f64..30.0) {
        let net = random_net(seed, Nonlinearity::Softmax);
        let x = random_inputs(seed, 3, net.input_dim(), scale);
        let p = net.predict(x.view(), t).unwrap();
        for row in p.rows() {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_temperature_is_plain_softmax(seed in any::<u64>()) {
        let net = random_net(seed, Nonlinearity::Softmax);
        let x = random_inputs(seed, 2, net.input_dim(), 2.0);
        let p = net.predict(x.view(), 1.0).unwrap();
        let z = net.logits(x.view()).unwrap();
        for (pr, zr) in p.rows().into_iter().zip(z.rows()) {
            let m = zr.fold(f64::MIN, |a, &b| a.max(b));
            let e: Vec<f64> = zr.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for (a, b) in pr.iter().zip(&e) {
                prop_assert!((a - b / s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_outputs_are_nonnegative(seed in any::<u64>()) {
        let net = random_net(seed, Nonlinearity::Relu);
        let x = random_inputs(seed, 4, net.input_dim(), 5.0);
        let trace = net.forward_batch(x.view(), 1.0, &DropoutSpec::off()).unwrap();
        for (layer, post) in net.layers().iter().zip(&trace.post_activations) {
            if layer.nonlinearity == Nonlinearity::Relu {
                prop_assert!(post.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn frozen_dropout_is_bit_exact(seed in any::<u64>(), rate in 0.05f64..0.9) {
        let net = random_net(seed, Nonlinearity::Identity);
        let widths = net.widths();
        let spec = sample_dropout(&DropoutSpec::sampled(rate).unwrap(), &widths[1..], seed).unwrap();
        let again = sample_dropout(&DropoutSpec::sampled(rate).unwrap(), &widths[1..], seed).unwrap();
        prop_assert_eq!(&spec, &again);
        let x = random_inputs(seed, 3, net.input_dim(), 1.0);
        let a = net.forward_batch(x.view(), 1.0, &spec).unwrap();
        let b = net.forward_batch(x.view(), 1.0, &again).unwrap();
        prop_assert_eq!(a.post_activations, b.post_activations);
        prop_assert_eq!(a.pre_activations, b.pre_activations);
    }

    #[test]
    fn softening_never_changes_the_prediction(seed in any::<u64>(), t in 0.1f64..100.0) {
        let net = random_net(seed, Nonlinearity::Softmax);
        let x = random_inputs(seed, 5, net.input_dim(), 3.0);
        let hard = dfkd_core::nn::argmax_rows(&net.logits(x.view()).unwrap());
        let soft = dfkd_core::nn::argmax_rows(&net.predict(x.view(), t).unwrap());
        prop_assert_eq!(hard, soft);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn idx_round_trip_on_quantized_sets(seed in any::<u64>(), n in 1usize..40, side in 1usize..9, classes in 1usize..11) {
        let dir = tempfile::tempdir().unwrap();
        let set = quantized_set(seed, n, side, classes);
        let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
        save_set(&set, &img, &lab).unwrap();
        let back = load_set(&img, &lab, classes).unwrap();
        prop_assert_eq!(&back.images, &set.images);
        prop_assert_eq!(&back.labels, &set.labels);
        prop_assert_eq!((back.width, back.height), (side, side));
    }

    #[test]
    fn byte_order_survives_normalization(bytes in prop::collection::vec(any::<u8>(), 1..200)) {
        // Raw IDX written by hand: one image per byte, 1×1 pixels.
        let dir = tempfile::tempdir().unwrap();
        let n = bytes.len() as u32;
        let mut images = vec![0, 0, 8, 3];
        for d in [n, 1, 1] {
            images.extend_from_slice(&d.to_be_bytes());
        }
        images.extend_from_slice(&bytes);
        let mut labels = vec![0, 0, 8, 1];
        labels.extend_from_slice(&n.to_be_bytes());
        labels.extend(std::iter::repeat_n(0u8, bytes.len()));
        std::fs::write(dir.path().join("i"), images).unwrap();
        std::fs::write(dir.path().join("l"), labels).unwrap();
        let set = load_set(&dir.path().join("i"), &dir.path().join("l"), 1).unwrap();
        let values: Vec<f32> = set.images.iter().copied().collect();
        for i in 0..bytes.len() {
            for j in 0..bytes.len() {
                prop_assert_eq!(bytes[i].cmp(&bytes[j]), values[i].partial_cmp(&values[j]).unwrap());
            }
        }
    }

    #[test]
    fn one_mean_per_present_label(seed in any::<u64>(), n in 1usize..60, classes in 1usize..11) {
        let set = quantized_set(seed, n, 2, classes);
        let mut present = set.labels.clone();
        present.sort_unstable();
        present.dedup();
        let means = per_class_means(&set);
        prop_assert_eq!(means.iter().map(|(c, _)| *c).collect::<Vec<_>>(), present);
    }

    #[test]
    fn jittered_cholesky_reproduces_covariance(seed in any::<u64>(), d in 1usize..12, rank in 1usize..12) {
        // Low-rank covariances exercise the jitter path.
        let mut rng = rng_for(seed, &[4]);
        let b = Array2::from_shape_simple_fn((d, rank), || rng.gen_range(-2.0..2.0));
        let cov = b.dot(&b.t());
        let (l, lambda) = jittered_cholesky(&cov).unwrap();
        let jittered = &cov + &(Array2::<f64>::eye(d) * lambda);
        let frob = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(frob(&(&l.dot(&l.t()) - &jittered)) < 1e-8 * frob(&cov).max(1e-300));
        for i in 0..d {
            prop_assert!(l[[i, i]] > 0.0);
            for j in i + 1..d {
                prop_assert_eq!(l[[i, j]], 0.0);
            }
        }
    }

    #[test]
    fn record_invariants(seed in any::<u64>(), t in 0.5f64..16.0, fraction in 0.01f64..=1.0) {
        let set = blocks_set(seed, 30);
        let net = DenseNetwork::<f32>::from_widths(&[9, 5, 4, 3], &mut rng_for(seed, &[5])).unwrap();
        let hash = dfkd_core::nn::checkpoint::model_hash(&net);

        let unit = record_top_layer_stats(&net, &set, 1.0).unwrap();
        let hot = record_top_layer_stats(&net, &set, t).unwrap();
        for (class, layers) in &hot.per_class {
            let base = &unit.per_class[class][0];
            let s = &layers[0];
            let rel = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
            prop_assert!(s.mean.iter().zip(&base.mean).all(|(&a, &b)| rel(a, b / t)));
            prop_assert!(s.chol.iter().zip(&base.chol).all(|(&a, &b)| rel(a, b / t)));
        }

        let mut records = vec![
            ActivationRecord::Stats(hot),
            ActivationRecord::Stats(record_all_layer_stats(&net, &set, t, Some(0.5)).unwrap()),
        ];
        for mode in [SpectralMode::AllLayers, SpectralMode::LayerPairs] {
            let bases = network_bases(&net, mode, &hash, None).unwrap();
            let rec = record_spectral(&net, &set, mode, &bases, fraction, 3, &mut rng_for(seed, &[6])).unwrap();
            for exemplars in rec.per_class.values() {
                for signals in exemplars {
                    for s in signals {
                        let idx: Vec<u32> = s.coefficients.iter().map(|c| c.0).collect();
                        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]), "unsorted or duplicated: {idx:?}");
                        prop_assert!(idx.iter().all(|&i| i < s.graph_size));
                    }
                }
            }
            records.push(ActivationRecord::Spectral(rec));
        }
        for r in records {
            let bytes = to_bytes(&r, &hash);
            let (h, back) = from_bytes(&bytes).unwrap();
            prop_assert_eq!(h, hash);
            prop_assert_eq!(&back, &r);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn evaluation_is_pure_and_teacher_stays_frozen(seed in any::<u64>()) {
        let set = blocks_set(seed, 24);
        let teacher = DenseNetwork::<f32>::from_widths(&[9, 6, 3], &mut rng_for(seed, &[7])).unwrap();
        let before = teacher.clone();
        let first = evaluate(&teacher, &set).unwrap();
        prop_assert_eq!(first, evaluate(&teacher, &set).unwrap());
        prop_assert_eq!(&teacher, &before);
        let mut student = DenseNetwork::<f32>::from_widths(&[9, 4, 3], &mut rng_for(seed, &[8])).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 5, seed, ..TrainConfig::distillation() };
        distill_kd(&teacher, &mut student, &set, &cfg).unwrap();
        prop_assert_eq!(&teacher, &before);
        prop_assert_eq!(first, evaluate(&teacher, &set).unwrap());
    }
}

#[test]
fn per_class_means_average_members() {
    let images = ndarray::array![[0.0f32, 1.0], [1.0, 1.0], [0.5, 0.0]];
    let set = LabeledImageSet::new(images, vec![2, 2, 0], 2, 1, 3).unwrap();
    let means = per_class_means(&set);
    assert_eq!(means, vec![(0, Array1::from(vec![0.5, 0.0])), (2, Array1::from(vec![0.5, 1.0]))]);
}
