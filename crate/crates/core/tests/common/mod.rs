//! Shared helpers for the acceptance suite: a central finite-difference
//! gradient checker and deterministic random tensors.

use minimt::{Tape, Tensor, Var};
use rand::Rng;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Deterministic dense tensor with entries in (lo, hi).
pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = minimt::rng::seeded_rng(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Like [`random_tensor`] but bounded away from zero, for ops with a kink
/// at the origin (finite differences straddle the kink otherwise).
pub fn random_tensor_off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = minimt::rng::seeded_rng(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.2..1.2);
            if rng.gen_range(0.0..1.0) < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Scalar objective for a graph builder: the op output is contracted with
/// a deterministic probe tensor so every output element influences the
/// scalar with a distinct weight.
fn probed_loss<'t, F>(tape: &'t Tape, inputs: &[Tensor], seed: u64, build: &F) -> (Var<'t>, Vec<Var<'t>>)
where
    F: for<'a> Fn(&'a Tape, &[Var<'a>]) -> Var<'a>,
{
    let leaves: Vec<Var<'t>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(tape, &leaves);
    let probe = random_tensor(&out.shape(), seed ^ 0x9e3779b97f4a7c15, -1.0, 1.0);
    let loss = out.mul(tape.constant(probe)).sum_all();
    (loss, leaves)
}

/// Relative error with an absolute guard: small gradients are compared
/// absolutely, large ones relatively.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check one op's gradients against central finite differences on every
/// element of every input. Returns the worst relative error observed.
pub fn gradcheck<F>(inputs: &[Tensor], seed: u64, build: F) -> f64
where
    F: for<'a> Fn(&'a Tape, &[Var<'a>]) -> Var<'a>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let (loss, leaves) = probed_loss(&tape, inputs, seed, &build);
        loss.backward();
        leaves.iter().map(|l| l.grad().expect("input leaf must be differentiable")).collect()
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let (loss, _) = probed_loss(&tape, xs, seed, &build);
        loss.scalar_value()
    };
    let mut worst = 0.0f64;
    for which in 0..inputs.len() {
        for idx in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[idx] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[idx] -= FD_EPS;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
            let ad = analytic[which].data()[idx];
            worst = worst.max(rel_err(ad, fd));
        }
    }
    worst
}
