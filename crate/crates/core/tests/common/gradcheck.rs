//! Central finite-difference oracle for layer and network gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmdl_core::nn::{loss_ce, Layer, LayerOps, Mode, Network};
use rmdl_core::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Gradients smaller than this are compared on an absolute scale.
const FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Report {
    pub max_rel: f64,
    pub checked: usize,
}

impl Report {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel = self.max_rel.max(rel_err(analytic, numeric));
        self.checked += 1;
    }

    pub fn merge(&mut self, other: Report) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.checked += other.checked;
    }
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_values(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn eval_forward(layer: &Layer, x: &Tensor) -> Tensor {
    layer.forward(x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().0
}

fn projected(layer: &Layer, x: &Tensor, r: &Tensor) -> f64 {
    eval_forward(layer, x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Compares the analytic gradients of `L = sum(layer(x) * R)` for a random
/// fixed `R` against central differences, over every parameter and, when
/// `check_input` is set, every input element.
pub fn check_layer(layer: &mut Layer, x: &Tensor, seed: u64, check_input: bool) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (y, state) = layer.forward(x, Mode::Eval, &mut rng).unwrap();
    let r = uniform(y.shape(), -1.0, 1.0, &mut rng);
    let dx = layer.backward(&r, state, check_input).unwrap();
    let analytic: Vec<Vec<f64>> = layer
        .params_and_grads()
        .into_iter()
        .map(|(_, g)| g.data().to_vec())
        .collect();

    let mut report = Report::default();
    for (p, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = layer.params_mut()[p].data()[i];
            layer.params_mut()[p].data_mut()[i] = orig + STEP;
            let up = projected(layer, x, &r);
            layer.params_mut()[p].data_mut()[i] = orig - STEP;
            let down = projected(layer, x, &r);
            layer.params_mut()[p].data_mut()[i] = orig;
            report.record(a, (up - down) / (2.0 * STEP));
        }
    }
    if let Some(dx) = dx.filter(|_| check_input) {
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = x.data()[i];
            xp.data_mut()[i] = orig + STEP;
            let up = projected(layer, &xp, &r);
            xp.data_mut()[i] = orig - STEP;
            let down = projected(layer, &xp, &r);
            xp.data_mut()[i] = orig;
            report.record(dx.data()[i], (up - down) / (2.0 * STEP));
        }
    }
    report
}

fn network_loss(net: &Network, x: &Tensor, labels: &[usize]) -> f64 {
    loss_ce(&net.logits(x).unwrap(), labels).unwrap().0
}

/// Checks mean cross-entropy gradients of a whole network, every parameter
/// and every input element.
pub fn check_network(net: &mut Network, x: &Tensor, labels: &[usize]) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (logits, states) = net.forward(x, Mode::Eval, &mut rng).unwrap();
    let (_, grad) = loss_ce(&logits, labels).unwrap();
    let dx = net.backward(&grad, states, true).unwrap().unwrap();
    let analytic: Vec<Vec<f64>> = net
        .params_and_grads()
        .into_iter()
        .map(|(_, g)| g.data().to_vec())
        .collect();

    let mut report = Report::default();
    for (p, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = net.params_mut()[p].data()[i];
            net.params_mut()[p].data_mut()[i] = orig + STEP;
            let up = network_loss(net, x, labels);
            net.params_mut()[p].data_mut()[i] = orig - STEP;
            let down = network_loss(net, x, labels);
            net.params_mut()[p].data_mut()[i] = orig;
            report.record(a, (up - down) / (2.0 * STEP));
        }
    }
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        xp.data_mut()[i] = orig + STEP;
        let up = network_loss(net, &xp, labels);
        xp.data_mut()[i] = orig - STEP;
        let down = network_loss(net, &xp, labels);
        xp.data_mut()[i] = orig;
        report.record(dx.data()[i], (up - down) / (2.0 * STEP));
    }
    report
}

pub const INSTANCES: u64 = 20;

/// Distinct values at least 0.1 apart in random order, so a max-pool window
/// never changes its winner under a finite-difference step.
fn spaced(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    values.shuffle(rng);
    Tensor::from_values(shape, values).unwrap()
}

fn instance(kind: &str, seed: u64) -> Report {
    use rmdl_core::nn::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 13);
    let batch = rng.gen_range(1..=3);
    match kind {
        "dense" => {
            let (i, o) = (rng.gen_range(1..=6), rng.gen_range(1..=5));
            let mut layer: Layer = Dense::new(i, o, &mut rng).unwrap().into();
            let x = if seed % 4 == 0 {
                // mostly-zero rows like TF-IDF vectors
                let mut x = Tensor::zeros(&[batch, 40]).unwrap();
                for b in 0..batch {
                    x.data_mut()[b * 40 + rng.gen_range(0..40)] = rng.gen_range(0.1..1.0);
                }
                layer = Dense::new(40, o, &mut rng).unwrap().into();
                x
            } else {
                uniform(&[batch, i], -1.0, 1.0, &mut rng)
            };
            check_layer(&mut layer, &x, seed, true)
        }
        "conv2d" => {
            let (h, w, c, f, k, s) = if seed == 0 {
                (5, 5, 2, 2, 3, 1)
            } else {
                let k = rng.gen_range(1..=3);
                (
                    rng.gen_range(k..=6),
                    rng.gen_range(k..=6),
                    rng.gen_range(1..=3),
                    rng.gen_range(1..=3),
                    k,
                    rng.gen_range(1..=2),
                )
            };
            let b = if seed == 0 { 1 } else { batch };
            let mut layer: Layer = Conv2d::new(c, f, k, s, &mut rng).unwrap().into();
            let x = uniform(&[b, h, w, c], -1.0, 1.0, &mut rng);
            check_layer(&mut layer, &x, seed, true)
        }
        "conv1d" => {
            let k = rng.gen_range(1..=3);
            let (l, c, f, s) = (rng.gen_range(k..=8), rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=2));
            let mut layer: Layer = Conv1d::new(c, f, k, s, &mut rng).unwrap().into();
            let x = uniform(&[batch, l, c], -1.0, 1.0, &mut rng);
            check_layer(&mut layer, &x, seed, true)
        }
        "maxpool" => {
            let (win, s) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let c = rng.gen_range(1..=2);
            let shape = if seed % 2 == 0 {
                vec![batch, rng.gen_range(win..=6), rng.gen_range(win..=6), c]
            } else {
                vec![batch, rng.gen_range(win..=9), c]
            };
            let mut layer: Layer = MaxPool::new(win, s).unwrap().into();
            check_layer(&mut layer, &spaced(&shape, &mut rng), seed, true)
        }
        "dropout-eval" => {
            let mut layer: Layer = Dropout::new(rng.gen_range(0.0..0.9)).unwrap().into();
            let x = uniform(&[batch, rng.gen_range(1..=6)], -1.0, 1.0, &mut rng);
            check_layer(&mut layer, &x, seed, true)
        }
        "embedding" => {
            let (vocab, dim, len) = (rng.gen_range(3..=8), rng.gen_range(1..=4), rng.gen_range(1..=5));
            let mut layer: Layer = Embedding::new(vocab, dim, &mut rng).unwrap().into();
            // the padding row is frozen by design, so it is left out here
            let idx = (0..batch * len).map(|_| rng.gen_range(1..vocab) as f64).collect();
            let x = Tensor::from_values(&[batch, len], idx).unwrap();
            check_layer(&mut layer, &x, seed, false)
        }
        "lstm" | "gru" => {
            let (i, h) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let seq = seed % 2 == 0;
            let mut layer: Layer = if kind == "lstm" {
                Lstm::new(i, h, seq, &mut rng).unwrap().into()
            } else {
                Gru::new(i, h, seq, &mut rng).unwrap().into()
            };
            let x = uniform(&[batch, 4, i], -1.0, 1.0, &mut rng);
            check_layer(&mut layer, &x, seed, true)
        }
        "activations" => {
            let mut layer: Layer = match seed % 4 {
                0 => Activation::sigmoid().into(),
                1 => Activation::tanh().into(),
                2 => Softmax.into(),
                _ => Activation::relu().into(),
            };
            // keep ReLU inputs clear of the kink
            let x = uniform(&[batch, rng.gen_range(1..=6)], 0.05, 1.0, &mut rng)
                .map(|v| if rng_sign(seed, v) { v } else { -v });
            check_layer(&mut layer, &x, seed, true)
        }
        "network" => {
            let (f, h, k) = (rng.gen_range(2..=6), rng.gen_range(2..=8), rng.gen_range(2..=5));
            let mut net = Network::new(vec![
                Dense::new(f, h, &mut rng).unwrap().into(),
                Activation::relu().into(),
                Dense::new(h, k, &mut rng).unwrap().into(),
            ]);
            let x = uniform(&[8, f], -1.0, 1.0, &mut rng);
            let labels: Vec<usize> = (0..8).map(|_| rng.gen_range(0..k)).collect();
            check_network(&mut net, &x, &labels)
        }
        other => panic!("unknown layer kind {other}"),
    }
}

fn rng_sign(seed: u64, v: f64) -> bool {
    (v.to_bits() ^ seed).count_ones() % 2 == 0
}

pub const KINDS: [&str; 10] = [
    "dense",
    "conv1d",
    "conv2d",
    "maxpool",
    "dropout-eval",
    "embedding",
    "lstm",
    "gru",
    "activations",
    "network",
];

/// Runs `INSTANCES` random instances of one layer kind.
pub fn run_kind(kind: &str) -> Report {
    let mut total = Report::default();
    for seed in 0..INSTANCES {
        total.merge(instance(kind, seed));
    }
    total
}
