//! Analytic gradients against central finite differences of a loss computed by
//! a straight-line reference forward pass (f64 throughout).

use dfkd_core::nn::{
    grad_input, grad_params, sample_dropout, ActivationMatch, DenseNetwork, DropoutSpec, LossSpec, MatchTerm,
    Nonlinearity, Slot,
};
use dfkd_core::rng::rng_for;
use ndarray::{Array1, Array2};
use rand::Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

/// Plain nested-loop forward. Returns (pre, post) per layer.
fn reference_forward(
    net: &DenseNetwork<f64>,
    x: &[f64],
    temperature: f64,
    masks: &[Option<Vec<f64>>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut pres = Vec::new();
    let mut posts: Vec<Vec<f64>> = Vec::new();
    let mut prev = x.to_vec();
    for (k, layer) in net.layers().iter().enumerate() {
        let mut z = vec![0.0; layer.out_dim()];
        for i in 0..layer.out_dim() {
            let mut acc = layer.bias[i];
            for j in 0..layer.in_dim() {
                acc += layer.weight[[i, j]] * prev[j];
            }
            z[i] = acc;
        }
        let mut a: Vec<f64> = match layer.nonlinearity {
            Nonlinearity::Identity => z.clone(),
            Nonlinearity::Relu => z.iter().map(|v| v.max(0.0)).collect(),
            Nonlinearity::Softmax => {
                let m = z.iter().map(|v| v / temperature).fold(f64::MIN, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v / temperature - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            }
        };
        if let Some(Some(mask)) = masks.get(k) {
            for (v, m) in a.iter_mut().zip(mask) {
                *v *= m;
            }
        }
        pres.push(z);
        posts.push(a.clone());
        prev = a;
    }
    (pres, posts)
}

fn near_kink(net: &DenseNetwork<f64>, x: &[f64], masks: &[Option<Vec<f64>>]) -> bool {
    let (pres, _) = reference_forward(net, x, 1.0, masks);
    pres.iter()
        .zip(net.layers())
        .any(|(z, l)| l.nonlinearity == Nonlinearity::Relu && z.iter().any(|v| v.abs() < 1e-3))
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let scale = analytic.abs().max(numeric.abs());
    // Coordinates whose true derivative is ~0 are compared on an absolute floor.
    assert!(
        (analytic - numeric).abs() <= REL_TOL * scale + 1e-8,
        "{what}: analytic {analytic:e} vs numeric {numeric:e}"
    );
}

fn random_net(seed: u64, top: Nonlinearity) -> DenseNetwork<f64> {
    let mut rng = rng_for(seed, &[1]);
    let depth = rng.gen_range(1..=3);
    let mut widths = vec![rng.gen_range(2..6)];
    for _ in 0..depth {
        widths.push(rng.gen_range(2..7));
    }
    let net = DenseNetwork::<f64>::from_widths(&widths, &mut rng).unwrap();
    let mut layers = net.layers().to_vec();
    for l in &mut layers {
        l.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    }
    layers.last_mut().unwrap().nonlinearity = top;
    DenseNetwork::new(layers).unwrap()
}

fn mse_loss(net: &DenseNetwork<f64>, x: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (xr, tr) in x.rows().into_iter().zip(t.rows()) {
        let (_, posts) = reference_forward(net, xr.as_slice().unwrap(), 1.0, &[]);
        total += posts.last().unwrap().iter().zip(tr).map(|(y, t)| (y - t).powi(2)).sum::<f64>();
    }
    total / x.nrows() as f64
}

fn soft_ce_loss(net: &DenseNetwork<f64>, x: &Array2<f64>, t: &Array2<f64>, temperature: f64) -> f64 {
    let mut total = 0.0;
    for (xr, tr) in x.rows().into_iter().zip(t.rows()) {
        let (_, posts) = reference_forward(net, xr.as_slice().unwrap(), temperature, &[]);
        total -= posts.last().unwrap().iter().zip(tr).map(|(p, t)| t * p.ln()).sum::<f64>();
    }
    temperature * temperature * total / x.nrows() as f64
}

fn check_param_grads(net: &DenseNetwork<f64>, loss: LossSpec, x: &Array2<f64>, t: &Array2<f64>, label: &str) {
    let (grads, _) = grad_params(net, x.view(), t.view(), loss, &DropoutSpec::off()).unwrap();
    let eval = |n: &DenseNetwork<f64>| match loss {
        LossSpec::Mse => mse_loss(n, x, t),
        LossSpec::CrossEntropy => soft_ce_loss(n, x, t, 1.0),
        LossSpec::SoftCrossEntropy { temperature } => soft_ce_loss(n, x, t, temperature),
    };
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let shapes = net.parameter_shapes();
    for (b, &len) in shapes.iter().enumerate() {
        for j in 0..len {
            let mut plus = net.clone();
            plus.parameters_mut()[b][j] += H;
            let mut minus = net.clone();
            minus.parameters_mut()[b][j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            assert_close(analytic[b][j], numeric, &format!("{label} buffer {b} coord {j}"));
        }
    }
}

pub fn parameter_gradient_trials(trials: u64) {
    for trial in 0..trials {
        let mut rng = rng_for(100 + trial, &[2]);
        let kind = trial % 3;
        let top = if kind == 0 { Nonlinearity::Identity } else { Nonlinearity::Softmax };
        let net = random_net(100 + trial, top);
        let batch = rng.gen_range(1..4);
        let x = loop {
            let x = Array2::from_shape_simple_fn((batch, net.input_dim()), || rng.gen_range(-1.0..1.0));
            if !x.rows().into_iter().any(|r| near_kink(&net, r.as_slice().unwrap(), &[])) {
                break x;
            }
        };
        let out = net.output_dim();
        let (loss, t) = match kind {
            0 => (
                LossSpec::Mse,
                Array2::from_shape_simple_fn((batch, out), || rng.gen_range(-1.0..1.0)),
            ),
            1 => {
                let mut t = Array2::zeros((batch, out));
                for mut r in t.rows_mut() {
                    r[rng.gen_range(0..out)] = 1.0;
                }
                (LossSpec::CrossEntropy, t)
            }
            _ => {
                let mut t = Array2::from_shape_simple_fn((batch, out), || rng.gen_range(0.05..1.0));
                for mut r in t.rows_mut() {
                    let s = r.sum();
                    r.mapv_inplace(|v| v / s);
                }
                (LossSpec::SoftCrossEntropy { temperature: 8.0 }, t)
            }
        };
        check_param_grads(&net, loss, &x, &t, &format!("trial {trial}"));
    }
}

pub fn softmax_mse_trials(trials: u64) {
    for trial in 0..trials {
        let mut rng = rng_for(500 + trial, &[]);
        let net = random_net(500 + trial, Nonlinearity::Softmax);
        let x = Array2::from_shape_simple_fn((2, net.input_dim()), || rng.gen_range(-1.0..1.0));
        if x.rows().into_iter().any(|r| near_kink(&net, r.as_slice().unwrap(), &[])) {
            continue;
        }
        let t = Array2::from_shape_simple_fn((2, net.output_dim()), || rng.gen_range(0.0..1.0));
        check_param_grads(&net, LossSpec::Mse, &x, &t, &format!("softmax-mse {trial}"));
    }
}

pub fn input_gradient_trials(trials: u64) {
    for trial in 0..trials {
        let mut rng = rng_for(200 + trial, &[3]);
        let top = [Nonlinearity::Relu, Nonlinearity::Identity, Nonlinearity::Softmax][trial as usize % 3];
        let net = random_net(200 + trial, top);
        let widths = net.widths();
        let dropout = if trial % 2 == 0 {
            sample_dropout(&DropoutSpec::sampled(0.3).unwrap(), &widths[1..], trial).unwrap()
        } else {
            DropoutSpec::off()
        };
        let scale = 1.0 / 0.7;
        let ref_masks: Vec<Option<Vec<f64>>> = match &dropout.masks {
            Some(ms) => ms
                .iter()
                .map(|m| m.as_ref().map(|m| m.iter().map(|&k| if k { scale } else { 0.0 }).collect()))
                .collect(),
            None => Vec::new(),
        };
        let x: Vec<f64> = loop {
            let x: Vec<f64> = (0..widths[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if !near_kink(&net, &x, &ref_masks) {
                break x;
            }
        };

        let mut terms = vec![MatchTerm {
            slot: Slot::Input,
            target: Array2::from_shape_simple_fn((1, widths[0]), || rng.gen_range(0.0..1.0)),
            weight: 0.5,
        }];
        for k in 0..net.layer_count() {
            if rng.gen_bool(0.7) || k + 1 == net.layer_count() {
                terms.push(MatchTerm {
                    slot: Slot::Layer(k),
                    target: Array2::from_shape_simple_fn((1, widths[k + 1]), || rng.gen_range(0.0..1.0)),
                    weight: 1.0 / widths[k + 1] as f64,
                });
            }
        }
        let objective = ActivationMatch { terms };

        let loss_at = |x: &[f64]| -> f64 {
            let (_, posts) = reference_forward(&net, x, 1.0, &ref_masks);
            objective
                .terms
                .iter()
                .map(|t| {
                    let a: &[f64] = match t.slot {
                        Slot::Input => x,
                        Slot::Layer(k) => &posts[k],
                    };
                    t.weight * a.iter().zip(t.target.row(0)).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .sum()
        };

        let (g, loss) = grad_input(&net, Array1::from(x.clone()).view(), &objective, &dropout).unwrap();
        assert!((loss - loss_at(&x)).abs() < 1e-10);
        for j in 0..x.len() {
            let mut p = x.clone();
            p[j] += H;
            let mut m = x.clone();
            m[j] -= H;
            let numeric = (loss_at(&p) - loss_at(&m)) / (2.0 * H);
            assert_close(g[j], numeric, &format!("trial {trial} input {j}"));
        }
    }
}
