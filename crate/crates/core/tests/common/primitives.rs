//! Every differentiable primitive as a gradient-check case.

use mome::tensor::grad_check;
use mome::{Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;
pub const TOL: f64 = 1e-4;

pub type CaseFn = Box<dyn Fn(&mut Tape, Var, u64) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub f: CaseFn,
}

pub fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Contract an arbitrary-shape output with fixed random weights so every
/// output entry contributes to the scalar.
fn contract(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = t.constant(rand_t(t.shape(y), seed ^ 0xabcdef));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn add(
    cases: &mut Vec<Case>,
    name: &'static str,
    shape: &[usize],
    f: impl Fn(&mut Tape, Var, u64) -> Result<Var> + 'static,
) {
    cases.push(Case {
        name,
        shape: shape.to_vec(),
        f: Box::new(f),
    });
}

impl Case {
    /// Worst relative error over the seeded instances.
    pub fn worst_error(&self) -> f64 {
        (0..INSTANCES)
            .map(|seed| {
                let x = rand_t(&self.shape, seed);
                grad_check(
                    |t, v| {
                        let y = (self.f)(t, v, seed)?;
                        contract(t, y, seed)
                    },
                    &x,
                    1e-5,
                )
                .unwrap()
            })
            .fold(0.0, f64::max)
    }
}

pub fn cases() -> Vec<Case> {
    let mut cases = Vec::new();
    add(&mut cases, "matmul lhs", &[3, 4], |t, x, s| {
        let b = t.constant(rand_t(&[4, 2], s + 100));
        t.matmul(x, b)
    });
    add(&mut cases, "matmul rhs", &[4, 2], |t, x, s| {
        let a = t.constant(rand_t(&[3, 4], s + 100));
        t.matmul(a, x)
    });

    add(&mut cases, "add", &[2, 3], |t, x, s| {
        let c = t.constant(rand_t(&[2, 3], s + 1));
        t.add(x, c)
    });
    add(&mut cases, "sub", &[2, 3], |t, x, s| {
        let c = t.constant(rand_t(&[2, 3], s + 1));
        t.sub(c, x)
    });
    add(&mut cases, "mul", &[2, 3], |t, x, s| {
        let c = t.constant(rand_t(&[2, 3], s + 1));
        t.mul(x, c)
    });
    add(&mut cases, "mul self", &[5], |t, x, _| t.mul(x, x));
    add(&mut cases, "scale", &[4], |t, x, _| Ok(t.scale(x, -1.7)));

    add(&mut cases, "add_row_bias x", &[3, 4], |t, x, s| {
        let b = t.constant(rand_t(&[4], s + 2));
        t.add_row_bias(x, b)
    });
    add(&mut cases, "add_row_bias b", &[4], |t, b, s| {
        let x = t.constant(rand_t(&[3, 4], s + 2));
        t.add_row_bias(x, b)
    });
    add(&mut cases, "sum", &[3, 2], |t, x, _| Ok(t.sum(x)));
    add(&mut cases, "index", &[6], |t, x, s| t.index(x, (s % 6) as usize));
    add(&mut cases, "reshape", &[2, 6], |t, x, _| t.reshape(x, &[3, 4]));
    add(&mut cases, "transpose", &[2, 5], |t, x, _| t.transpose(x));
    add(&mut cases, "slice_rows", &[5, 3], |t, x, _| t.slice_rows(x, 1, 3));
    add(&mut cases, "concat_rows", &[2, 3], |t, x, s| {
        let c = t.constant(rand_t(&[4, 3], s + 3));
        t.concat_rows(&[c, x, x])
    });

    add(&mut cases, "softmax axis 0", &[4, 3], |t, x, _| t.softmax(x, 0));
    add(&mut cases, "softmax axis 1", &[4, 3], |t, x, _| t.softmax(x, 1));
    add(&mut cases, "layer_norm x", &[3, 5], |t, x, s| {
        let g = t.constant(rand_t(&[5], s + 4));
        let b = t.constant(rand_t(&[5], s + 5));
        t.layer_norm(x, g, b, 1e-6)
    });
    add(&mut cases, "layer_norm gamma", &[5], |t, g, s| {
        let x = t.constant(rand_t(&[3, 5], s + 4));
        let b = t.constant(rand_t(&[5], s + 5));
        t.layer_norm(x, g, b, 1e-6)
    });
    add(&mut cases, "layer_norm beta", &[5], |t, b, s| {
        let x = t.constant(rand_t(&[3, 5], s + 4));
        let g = t.constant(rand_t(&[5], s + 5));
        t.layer_norm(x, g, b, 1e-6)
    });
    add(&mut cases, "instance_norm", &[3, 2, 2, 3], |t, x, _| {
        t.instance_norm(x, 1e-5)
    });

    add(&mut cases, "gelu", &[3, 4], |t, x, _| Ok(t.gelu(x)));
    add(&mut cases, "relu", &[3, 4], |t, x, _| Ok(t.relu(x)));

    add(&mut cases, "conv3d x", &[5, 4, 3, 2], |t, x, s| {
        let k = t.constant(rand_t(&[3, 3, 3, 2, 3], s + 6));
        let b = t.constant(rand_t(&[3], s + 7));
        t.conv3d(x, k, b, 2)
    });
    add(&mut cases, "conv3d kernel", &[3, 3, 3, 2, 3], |t, k, s| {
        let x = t.constant(rand_t(&[4, 4, 3, 2], s + 6));
        let b = t.constant(rand_t(&[3], s + 7));
        t.conv3d(x, k, b, 2)
    });
    add(&mut cases, "conv3d bias", &[3], |t, b, s| {
        let x = t.constant(rand_t(&[4, 3, 3, 2], s + 6));
        let k = t.constant(rand_t(&[3, 3, 3, 2, 3], s + 7));
        t.conv3d(x, k, b, 1)
    });
    add(&mut cases, "maxpool3d", &[5, 4, 4, 2], |t, x, _| t.maxpool3d(x, 2, 2));

    for which in 0..3 {
        add(&mut cases, "attention", &[5, 8], move |t, x, s| {
            let others: Vec<Var> = (0..3).map(|i| t.constant(rand_t(&[5, 8], s + 10 + i))).collect();
            let mut qkv = others;
            qkv[which] = x;
            t.attention(qkv[0], qkv[1], qkv[2], 2)
        });
    }
    add(&mut cases, "grouped_linear x", &[6, 3], |t, x, s| {
        let w = t.constant(rand_t(&[3, 3, 4], s + 20));
        let b = t.constant(rand_t(&[3, 4], s + 21));
        t.grouped_linear(x, w, b, 2)
    });
    add(&mut cases, "grouped_linear w", &[3, 3, 4], |t, w, s| {
        let x = t.constant(rand_t(&[6, 3], s + 20));
        let b = t.constant(rand_t(&[3, 4], s + 21));
        t.grouped_linear(x, w, b, 2)
    });
    add(&mut cases, "grouped_linear b", &[3, 4], |t, b, s| {
        let x = t.constant(rand_t(&[6, 3], s + 20));
        let w = t.constant(rand_t(&[3, 3, 4], s + 21));
        t.grouped_linear(x, w, b, 2)
    });
    add(&mut cases, "softmax_nll", &[3], |t, x, s| {
        t.softmax_nll(x, (s % 3) as usize, 1.5)
    });

    cases
}
