#![allow(dead_code)]

use slotmil::data::Bag;
use slotmil::{RngStream, Tape, Tensor, Var};

pub fn random_tensor(rng: &mut RngStream, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * (2.0 * rng.next_f64() - 1.0)).collect()).unwrap()
}

pub fn random_bag(rng: &mut RngStream, m: usize, d: usize, label: usize) -> Bag {
    let data = (0..m * d).map(|_| rng.normal() as f32).collect();
    Bag::new("rand", Tensor::new(vec![m, d], data).unwrap(), label).unwrap()
}

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `build` with respect to each input tensor.
///
/// `build` records a scalar loss on the tape from leaves of the given values.
pub fn fd_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let h = 1e-5;
    let eval = |vals: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let l = build(&mut tape, &vars);
        tape.value(l).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let l = build(&mut tape, &vars);
    let grads = tape.grad(l, &vars).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(grads[k].data()[j], fd));
        }
    }
    worst
}
