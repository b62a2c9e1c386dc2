#![allow(dead_code)]

use dbat::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Scalar probe `Σ out ⊙ r` with fixed random `r`, so no output entry
/// cancels by symmetry.
pub fn probe_loss<'g>(g: &'g Graph, out: &Var<'g>, seed: u64) -> dbat::tensor::Result<Var<'g>> {
    let mut r = rng(seed);
    let weights = g.constant(randn(&mut r, &out.shape()));
    Ok(out.mul(&weights)?.sum_all())
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}
