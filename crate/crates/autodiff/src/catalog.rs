//! Catalogue of differentiable primitives, each paired with a probe that
//! gradient-checks it at a random point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_train, DEFAULT_STEP};
use crate::graph::{concat, Var};
use crate::tensor::Tensor;

pub struct Primitive {
    pub name: &'static str,
    /// Runs a gradient check at a point drawn from `seed`, returning the
    /// largest relative error.
    pub check: fn(u64) -> Result<f64>,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Contracts `v` against a fixed random tensor so every output element gets
/// a distinct upstream gradient.
fn project<'g>(v: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = v.graph().constant(random(&v.shape(), &mut rng));
    Ok(v.mul(&w)?.sum())
}

macro_rules! probe {
    ($name:literal, |$g:ident, $x:ident, $rng:ident, $seed:ident| shape = $shape:expr, $body:expr) => {
        Primitive {
            name: $name,
            check: |$seed| {
                let mut $rng = ChaCha8Rng::seed_from_u64($seed);
                let point = random(&$shape, &mut $rng);
                grad_check(
                    |$g, $x| {
                        let mut $rng = ChaCha8Rng::seed_from_u64($seed.wrapping_add(1));
                        let _ = (&mut $rng, $g);
                        let out: Result<Var<'_, f64>> = $body;
                        project(out?, $seed)
                    },
                    &point,
                    DEFAULT_STEP,
                )
            },
        }
    };
}

/// All primitives with forward and backward implementations.
pub fn primitive_set() -> Vec<Primitive> {
    vec![
        probe!("matmul_lhs", |g, x, rng, seed| shape = [3, 4], {
            let b = g.constant(random(&[4, 5], &mut rng));
            x.matmul(&b)
        }),
        probe!("matmul_rhs", |g, x, rng, seed| shape = [4, 5], {
            let a = g.constant(random(&[3, 4], &mut rng));
            a.matmul(&x)
        }),
        probe!("add", |g, x, rng, seed| shape = [3, 4], {
            let b = g.constant(random(&[3, 4], &mut rng));
            x.add(&b)
        }),
        probe!("add_broadcast", |g, x, rng, seed| shape = [4], {
            let a = g.constant(random(&[2, 3, 4], &mut rng));
            a.add(&x)
        }),
        probe!("sub", |g, x, rng, seed| shape = [3, 4], {
            let b = g.constant(random(&[4], &mut rng));
            x.sub(&b)
        }),
        probe!("sub_broadcast", |g, x, rng, seed| shape = [4], {
            let a = g.constant(random(&[3, 4], &mut rng));
            a.sub(&x)
        }),
        probe!("mul", |g, x, rng, seed| shape = [3, 4], {
            let b = g.constant(random(&[3, 4], &mut rng));
            x.mul(&b)
        }),
        probe!("mul_broadcast", |g, x, rng, seed| shape = [4], {
            let a = g.constant(random(&[3, 4], &mut rng));
            a.mul(&x)
        }),
        probe!("mul_self", |g, x, rng, seed| shape = [3, 4], { x.mul(&x) }),
        probe!("scale", |g, x, rng, seed| shape = [5], { Ok(x.scale(-1.7)) }),
        probe!("transpose", |g, x, rng, seed| shape = [3, 5], { x.transpose() }),
        probe!("reshape", |g, x, rng, seed| shape = [3, 4], { x.reshape(&[2, 6]) }),
        probe!("softmax", |g, x, rng, seed| shape = [3, 5], { Ok(x.scale(3.0).softmax()) }),
        probe!("log_softmax", |g, x, rng, seed| shape = [3, 5], {
            Ok(x.scale(3.0).log_softmax())
        }),
        probe!("layer_norm", |g, x, rng, seed| shape = [3, 6], { Ok(x.layer_norm(1e-5)) }),
        probe!("relu", |g, x, rng, seed| shape = [4, 4], { Ok(x.relu()) }),
        probe!("sigmoid", |g, x, rng, seed| shape = [4, 4], { Ok(x.scale(2.0).sigmoid()) }),
        probe!("tanh", |g, x, rng, seed| shape = [4, 4], { Ok(x.scale(2.0).tanh()) }),
        Primitive {
            name: "dropout",
            check: |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let point = random(&[4, 6], &mut rng);
                grad_check_train(|_, x| project(x.dropout(0.3), seed), &point, DEFAULT_STEP, seed)
            },
        },
        probe!("embedding", |g, x, rng, seed| shape = [6, 3], { x.embedding(&[0, 5, 2, 2, 1]) }),
        probe!("concat_axis0", |g, x, rng, seed| shape = [2, 3], {
            let b = g.constant(random(&[4, 3], &mut rng));
            concat(&[x, b, x], 0)
        }),
        probe!("concat_axis1", |g, x, rng, seed| shape = [2, 3], {
            let b = g.constant(random(&[2, 2], &mut rng));
            concat(&[b, x], 1)
        }),
        probe!("slice_rows", |g, x, rng, seed| shape = [5, 3], { x.slice(0, 1, 3) }),
        probe!("slice_cols", |g, x, rng, seed| shape = [3, 6], { x.slice(1, 2, 3) }),
        probe!("sum", |g, x, rng, seed| shape = [3, 4], { Ok(x.mul(&x)?.sum()) }),
        probe!("mean", |g, x, rng, seed| shape = [3, 4], { Ok(x.mul(&x)?.mean()) }),
        probe!("mse", |g, x, rng, seed| shape = [3, 4], {
            let t = random(&[3, 4], &mut rng);
            x.mse(&t)
        }),
        probe!("cross_entropy", |g, x, rng, seed| shape = [4, 3], {
            x.scale(2.0).cross_entropy(&[0, 2, 1, 2])
        }),
        probe!("mul_rows_values", |g, x, rng, seed| shape = [3, 4], {
            let w = g.constant(random(&[3, 1], &mut rng));
            x.mul_rows(&w)
        }),
        probe!("mul_rows_weights", |g, x, rng, seed| shape = [3, 1], {
            let a = g.constant(random(&[3, 4], &mut rng));
            a.mul_rows(&x)
        }),
    ]
}
