//! Graph Fourier round trips and truncation optimality on random graphs.

use dfkd_core::rng::rng_for;
use dfkd_core::spectral::{retained_count, truncate, SpectralBasis};
use ndarray::{Array1, Array2};
use rand::Rng;

pub fn random_symmetric<R: Rng>(n: usize, rng: &mut R) -> Array2<f64> {
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..i {
            let v = if rng.gen_bool(0.7) { rng.gen_range(-1.0..1.0) } else { 0.0 };
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
    a
}

/// Inverse of the transform recovers the signal and preserves energy.
pub fn round_trip_trials(trials: u64, max_n: usize) -> (f64, f64) {
    let (mut worst_inf, mut worst_parseval) = (0.0f64, 0.0f64);
    for t in 0..trials {
        let mut rng = rng_for(9000 + t, &[]);
        let n = if t == 0 { max_n } else { rng.gen_range(1..=max_n) };
        let a = random_symmetric(n, &mut rng);
        let s = Array1::from_shape_simple_fn(n, || rng.gen_range(-3.0..3.0));
        let b = SpectralBasis::from_symmetric(&a).unwrap();
        let s_hat = b.transform(s.view()).unwrap();
        let back = b.inverse_dense(s_hat.view()).unwrap();
        let inf = (&back - &s).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let e = s.dot(&s);
        let parseval = (e - s_hat.dot(&s_hat)).abs() / e.max(1.0);
        assert!(inf < 1e-9, "N={n}: round-trip error {inf:e}");
        assert!(parseval < 1e-9, "N={n}: Parseval error {parseval:e}");
        worst_inf = worst_inf.max(inf);
        worst_parseval = worst_parseval.max(parseval);
    }
    (worst_inf, worst_parseval)
}

/// Kept-coefficient reconstruction error never exceeds that of any other
/// subset of the same size.
pub fn exhaustive_truncation_trials(trials: u64, max_n: usize) {
    for t in 0..trials {
        let mut rng = rng_for(7000 + t, &[]);
        let n = rng.gen_range(1..=max_n);
        let a = random_symmetric(n, &mut rng);
        let s = Array1::from_shape_simple_fn(n, || rng.gen_range(-3.0..3.0));
        let fraction = rng.gen_range(0.01..=1.0);
        let b = SpectralBasis::from_symmetric(&a).unwrap();
        let s_hat = b.transform(s.view()).unwrap();
        let k = retained_count(fraction, n).unwrap();
        let kept = truncate(s_hat.view(), fraction).unwrap();
        assert_eq!(kept.len(), k);
        let err = |subset: &[(u32, f64)]| {
            let r = &b.inverse(subset).unwrap() - &s;
            r.dot(&r)
        };
        let ours = err(&kept);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let subset: Vec<(u32, f64)> = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| (i as u32, s_hat[i]))
                .collect();
            let other = err(&subset);
            assert!(ours <= other + 1e-10, "N={n} k={k}: kept {ours} > subset {mask:b} {other}");
        }
    }
}
