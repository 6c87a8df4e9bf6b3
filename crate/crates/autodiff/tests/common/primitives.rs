//! Gradient checks of every tape primitive against central differences
//! (h = 1e-5, f64). Shared by the autodiff tests and the acceptance suite.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxgraph_autodiff::check::{check_gradients, GradCheck};
use voxgraph_autodiff::{Result, Tape, Tensor, Var};

pub const H: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-6;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Contract the output with fixed random weights so no primitive hides
/// behind a constant-sum output (softmax, layer norm).
pub fn contract<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, &y.shape(), -1.0, 1.0));
    y.mul(w)?.sum()
}

#[derive(Default)]
pub struct Checks(pub Vec<(&'static str, GradCheck)>);

impl Checks {
    fn add<F>(&mut self, name: &'static str, inputs: Vec<Tensor>, f: F)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let report = check_gradients(&inputs, H, FLOOR, |_, _| None, |tape, v| {
            let y = f(tape, v)?;
            contract(tape, y, 99)
        })
        .unwrap();
        self.0.push((name, report));
    }
}

pub fn primitive_checks() -> Checks {
    let mut c = Checks::default();
    let mut r = ChaCha8Rng::seed_from_u64(7);

    c.add("matmul", vec![random(&mut r, &[3, 4], -1., 1.), random(&mut r, &[4, 2], -1., 1.)], |_, v| {
        v[0].matmul(v[1])
    });
    c.add(
        "matmul_broadcast",
        vec![random(&mut r, &[2, 3, 4], -1., 1.), random(&mut r, &[4, 5], -1., 1.)],
        |_, v| v[0].matmul(v[1]),
    );
    c.add(
        "batch_matmul",
        vec![random(&mut r, &[2, 3, 4], -1., 1.), random(&mut r, &[2, 4, 3], -1., 1.)],
        |_, v| v[0].matmul(v[1]),
    );

    let a = random(&mut r, &[3, 4], -1., 1.);
    let b = random(&mut r, &[3, 4], 0.5, 2.0);
    let row = random(&mut r, &[4], -1., 1.);
    let col = random(&mut r, &[3, 1], 0.5, 2.0);
    c.add("add", vec![a.clone(), row.clone()], |_, v| v[0].add(v[1]));
    c.add("sub", vec![a.clone(), col.clone()], |_, v| v[0].sub(v[1]));
    c.add("mul", vec![a.clone(), b.clone()], |_, v| v[0].mul(v[1]));
    c.add("mul_broadcast", vec![a.clone(), col.clone()], |_, v| v[0].mul(v[1]));
    c.add("div", vec![a.clone(), b], |_, v| v[0].div(v[1]));
    c.add("div_broadcast", vec![a.clone(), col], |_, v| v[0].div(v[1]));
    c.add("square", vec![a], |_, v| v[0].square());

    let x = random(&mut r, &[3, 4], -2.0, 2.0);
    let pos = random(&mut r, &[3, 4], 0.2, 3.0);
    c.add("scale", vec![x.clone()], |_, v| v[0].scale(-1.7));
    c.add("add_scalar", vec![x.clone()], |_, v| v[0].add_scalar(0.3));
    c.add("exp", vec![x.clone()], |_, v| v[0].exp());
    c.add("ln", vec![pos.clone()], |_, v| v[0].ln());
    c.add("sigmoid", vec![x.clone()], |_, v| v[0].sigmoid());
    c.add("tanh", vec![x.clone()], |_, v| v[0].tanh());
    c.add("gelu", vec![x.clone()], |_, v| v[0].gelu());
    c.add("leaky_relu", vec![x.clone()], |_, v| v[0].leaky_relu(0.2));
    c.add("softplus", vec![x.clone()], |_, v| v[0].softplus());
    c.add("powf", vec![pos], |_, v| v[0].powf(-0.5));

    let x = random(&mut r, &[3, 4], -2.0, 2.0);
    let x3 = random(&mut r, &[2, 3, 4], -2.0, 2.0);
    c.add("sum", vec![x.clone()], |_, v| v[0].sum());
    c.add("mean", vec![x.clone()], |_, v| v[0].mean());
    c.add("sum_axis0", vec![x3.clone()], |_, v| v[0].sum_axis(0));
    c.add("sum_axis1", vec![x3.clone()], |_, v| v[0].sum_axis(1));
    c.add("mean_axis2", vec![x3.clone()], |_, v| v[0].mean_axis(2));
    c.add("softmax", vec![x.clone()], |_, v| v[0].softmax());
    c.add("layer_norm", vec![x], |_, v| v[0].layer_norm(1e-5));

    let x = random(&mut r, &[3, 4], -1.0, 1.0);
    let y = random(&mut r, &[3, 2], -1.0, 1.0);
    let x3 = random(&mut r, &[2, 3, 4], -1.0, 1.0);
    c.add("reshape", vec![x.clone()], |_, v| v[0].reshape(&[2, 6]));
    c.add("permute", vec![x3.clone()], |_, v| v[0].permute(&[2, 0, 1]));
    c.add("transpose", vec![x.clone()], |_, v| v[0].transpose());
    c.add("concat", vec![x.clone(), y], |_, v| Var::concat(&[v[0], v[1]], 1));
    c.add("concat_axis0", vec![x.clone(), x.clone()], |_, v| Var::concat(&[v[0], v[1]], 0));
    c.add("slice", vec![x3], |_, v| v[0].slice(1, 1, 3));
    let row = random(&mut r, &[4], -1.0, 1.0);
    c.add("broadcast_to", vec![row], |_, v| v[0].broadcast_to(&[3, 4]));

    let table = random(&mut r, &[3, 4], -1.0, 1.0);
    let idx: Arc<[usize]> = vec![2, 0, 2, 1, 2].into();
    let seg: Arc<[usize]> = vec![0, 1, 0, 2, 1].into();
    let rows = random(&mut r, &[5, 4], -1.0, 1.0);
    c.add("index_select", vec![table], move |_, v| v[0].index_select(idx.clone()));
    let s1 = seg.clone();
    c.add("segment_sum", vec![rows.clone()], move |_, v| v[0].segment_sum(s1.clone(), 3));
    c.add("segment_softmax", vec![rows], move |_, v| v[0].segment_softmax(seg.clone()));

    let x = random(&mut r, &[3, 4], -1.0, 1.0);
    let keep: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    c.add("dropout", vec![x], move |_, v| v[0].dropout(&keep, 0.1));
    c
}
