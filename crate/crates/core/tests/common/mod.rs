//! Helpers shared by the integration tests.

#![allow(dead_code)]

use ditherprop::model::{BackpropMode, DitherKey, ModelSpec, Network};
use ditherprop::tensor::{Matrix, Rng};

pub const H: f64 = 1e-6;

fn loss(net: &mut Network, x: &Matrix, y: &[usize]) -> f64 {
    net.loss_and_grad(x, y, &BackpropMode::Exact, DitherKey::new(0, 0, 0)).unwrap().0
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error over every weight and bias.
pub fn max_rel_error(spec: &ModelSpec, batch: usize, classes: usize, seed: u64) -> f64 {
    let mut net = Network::new(spec, seed).unwrap();
    let mut rng = Rng::new(seed + 100);
    let features = net.input_features();
    let x = Matrix::from_fn(features, batch, |_, _| rng.normal());
    let y: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let (_, g) = net.loss_and_grad(&x, &y, &BackpropMode::Exact, DitherKey::new(0, 0, 0)).unwrap();

    let mut worst = 0.0f64;
    for l in 0..g.params.len() {
        let nw = g.params[l].w.len();
        let nb = g.params[l].b.len();
        for i in 0..nw + nb {
            let poke = |net: &mut Network, d: f64| {
                let layer = net.weighted_mut().nth(l).unwrap();
                if i < nw {
                    layer.weights.data_mut()[i] += d;
                } else {
                    layer.bias[i - nw] += d;
                }
            };
            poke(&mut net, H);
            let up = loss(&mut net, &x, &y);
            poke(&mut net, -2.0 * H);
            let down = loss(&mut net, &x, &y);
            poke(&mut net, H);
            let numeric = (up - down) / (2.0 * H);
            let analytic = if i < nw { g.params[l].w.data()[i] } else { g.params[l].b[i - nw] };
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}
