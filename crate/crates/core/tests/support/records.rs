//! Sampler moments and artifact serialization.

use std::collections::BTreeMap;

use dfkd_core::data::PixelStats;
use dfkd_core::nn::{checkpoint, DenseNetwork};
use dfkd_core::records::{
    from_bytes, jittered_cholesky, to_bytes, ActivationRecord, CompressedSignal, LayerStats, SpectralRecord,
    StatsRecord, StatsScope,
};
use dfkd_core::rng::rng_for;
use dfkd_core::spectral::{GraphId, SpectralMode};
use dfkd_core::Error;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// Random SPD covariance `A·Aᵀ + 0.1·I` with per-unit scales spanning two decades.
pub fn random_covariance<R: Rng>(d: usize, rng: &mut R) -> Array2<f64> {
    let scales = Array1::from_shape_simple_fn(d, || 10f64.powf(rng.gen_range(-1.0..1.0)));
    let a = Array2::from_shape_simple_fn((d, d), || rng.gen_range(-1.0..1.0));
    let mut c = a.dot(&a.t()) + Array2::<f64>::eye(d) * 0.1;
    for i in 0..d {
        for j in 0..d {
            c[[i, j]] *= scales[i] * scales[j];
        }
    }
    c
}

/// Draws 10⁵ pre-ReLU samples and compares the empirical moments with the
/// target. Returns (mean error / scale, covariance Frobenius relative error).
pub fn sampler_moments(seed: u64, d: usize, draws: usize) -> (f64, f64) {
    let mut rng = rng_for(seed, &[]);
    let cov = random_covariance(d, &mut rng);
    let mean = Array1::from_shape_simple_fn(d, || rng.gen_range(-5.0..5.0));
    let (chol, _) = jittered_cholesky(&cov).unwrap();
    let stats = LayerStats {
        layer_index: 0,
        temperature_applied: 1.0,
        mean: mean.clone(),
        chol,
    };
    let x = stats.sample_rows_linear(draws, &mut rng);
    let m = x.mean_axis(Axis(0)).unwrap();
    let centered = &x - &m;
    let c = centered.t().dot(&centered) / (draws as f64 - 1.0);
    let scale = cov.diag().iter().fold(0.0f64, |a, &v| a.max(v.sqrt()));
    let mean_err = (&m - &mean).iter().fold(0.0f64, |a, v| a.max(v.abs())) / scale;
    let frob = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cov_err = frob(&(&c - &cov)) / frob(&cov);
    (mean_err, cov_err)
}

pub fn check_sampler_moments() -> (f64, f64) {
    let mut worst = (0.0f64, 0.0f64);
    for (seed, d) in [(1u64, 1usize), (2, 5), (3, 10)] {
        let (m, c) = sampler_moments(seed, d, 100_000);
        assert!(m <= 1e-2, "d={d}: mean error {m:e} × scale");
        assert!(c <= 5e-2, "d={d}: covariance error {c:e}");
        worst = (worst.0.max(m), worst.1.max(c));
    }
    worst
}

pub fn random_stats_record(seed: u64, scope: StatsScope) -> StatsRecord {
    let mut rng = rng_for(seed, &[]);
    let widths = [rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..4)];
    let mut per_class = BTreeMap::new();
    for c in 0..rng.gen_range(1..4u8) {
        let layers = match scope {
            StatsScope::TopLayerOnly => vec![2],
            StatsScope::AllLayers => vec![0, 1, 2],
        };
        let stats = layers
            .into_iter()
            .map(|k| {
                let d = widths[k];
                let (chol, _) = jittered_cholesky(&random_covariance(d, &mut rng)).unwrap();
                LayerStats {
                    layer_index: k,
                    temperature_applied: if k == 2 { 8.0 } else { 1.0 },
                    mean: Array1::from_shape_simple_fn(d, || rng.gen::<f64>() - 0.5),
                    chol,
                }
            })
            .collect();
        per_class.insert(c * 3, stats);
    }
    StatsRecord {
        scope,
        temperature: 8.0,
        dropout_rate: (scope == StatsScope::AllLayers).then_some(0.5),
        per_class,
    }
}

pub fn random_spectral_record(seed: u64, mode: SpectralMode) -> SpectralRecord {
    let mut rng = rng_for(seed, &[]);
    let graphs: Vec<(GraphId, u32)> = match mode {
        SpectralMode::AllLayers => vec![(GraphId::AllLayers, rng.gen_range(1..40))],
        SpectralMode::LayerPairs => (0..3).map(|k| (GraphId::LayerPair(k), rng.gen_range(1..20))).collect(),
    };
    let mut per_class = BTreeMap::new();
    for c in 0..3u8 {
        let mut exemplars = Vec::new();
        for _ in 0..2 {
            let mut signals = Vec::new();
            for &(graph, n) in &graphs {
                let mut coefficients = Vec::new();
                for i in 0..n {
                    if rng.gen_bool(0.3) {
                        coefficients.push((i, rng.gen_range(-2.0..2.0)));
                    }
                }
                signals.push(CompressedSignal {
                    graph,
                    graph_size: n,
                    coefficients,
                });
            }
            exemplars.push(signals);
        }
        per_class.insert(c, exemplars);
    }
    SpectralRecord {
        mode,
        retain_fraction: 0.3,
        exemplars_per_class: 2,
        per_class,
    }
}

fn assert_truncations_fail(bytes: &[u8], what: &str) {
    for cut in [0, 1, 7, 8, 12, bytes.len() / 2, bytes.len() - 1] {
        if cut >= bytes.len() {
            continue;
        }
        match from_bytes(&bytes[..cut]) {
            Err(Error::Format { .. }) => {}
            other => panic!("{what} cut at {cut}/{}: expected a format error, got {other:?}", bytes.len()),
        }
    }
}

/// Every record kind and a checkpoint survive a byte-level round trip, and
/// truncated copies are rejected as format errors. Returns the number of artifacts checked.
pub fn check_serialization(seeds: u64) -> usize {
    let mut checked = 0;
    let hash = [0xAB; 32];
    for seed in 0..seeds {
        let records = [
            ActivationRecord::Stats(random_stats_record(seed, StatsScope::TopLayerOnly)),
            ActivationRecord::Stats(random_stats_record(seed, StatsScope::AllLayers)),
            ActivationRecord::Spectral(random_spectral_record(seed, SpectralMode::AllLayers)),
            ActivationRecord::Spectral(random_spectral_record(seed, SpectralMode::LayerPairs)),
            ActivationRecord::PixelStats(PixelStats { mean: 0.13 + seed as f64, std: 0.3 }),
        ];
        for rec in records {
            let bytes = to_bytes(&rec, &hash);
            let (h, back) = from_bytes(&bytes).unwrap();
            assert_eq!(h, hash);
            assert_eq!(back, rec);
            assert_eq!(to_bytes(&back, &h), bytes, "re-serialization differs");
            assert_truncations_fail(&bytes, "record");
            checked += 1;
        }

        let mut rng = rng_for(seed, &[42]);
        let net = DenseNetwork::<f32>::from_widths(&[rng.gen_range(1..9), rng.gen_range(1..9), 3], &mut rng).unwrap();
        let bytes = checkpoint::to_bytes(&net);
        let back = checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(checkpoint::to_bytes(&back), bytes);
        for cut in [0, 4, 9, bytes.len() - 1] {
            assert!(
                matches!(checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })),
                "checkpoint cut at {cut}"
            );
        }
        checked += 1;
    }
    checked
}
