//! Central finite differences, the oracle for every backward rule.

use super::{Real, Tape, Tensor, Var};
use crate::error::Result;

/// Step used by all gradient checks (64-bit).
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for [`max_relative_error`] per unit of loss magnitude.
/// Rounding noise of a central difference grows like `eps * |f| / h`, so
/// components smaller than `noise_floor(f)` are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-5;

pub fn noise_floor(loss: f64) -> f64 {
    RELATIVE_FLOOR * loss.abs().max(1.0)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element of `x`.
pub fn finite_diff_grad<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: f64,
) -> Tensor<T> {
    let mut probe = Tensor::new(x.shape(), x.data().to_vec()).expect("same shape");
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::lit(h);
        let up = f(&probe);
        probe.data_mut()[i] = orig - T::lit(h);
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / T::lit(2.0 * h));
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "compared gradients differ in length");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares tape gradients of the scalar `f(inputs)` against central finite
/// differences for every input that requires a gradient. Returns the worst
/// relative error per input (0 for inputs without gradients).
pub fn check_tape_fn(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<Vec<f64>> {
    check_tape_fn_sampled(inputs, usize::MAX, f)
}

/// Evenly spaced element indices, at most `max_elems` of `n`.
pub fn sample_indices(n: usize, max_elems: usize) -> Vec<usize> {
    if n <= max_elems {
        (0..n).collect()
    } else {
        (0..max_elems)
            .map(|i| i * n / max_elems + (n / max_elems) / 2)
            .collect()
    }
}

/// [`check_tape_fn`] perturbing at most `max_elems` elements of each input.
pub fn check_tape_fn_sampled(
    inputs: &[Tensor<f64>],
    max_elems: usize,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let floor = noise_floor(tape.scalar(loss));
    let grads = tape.backward(loss)?;
    let mut worst = Vec::with_capacity(inputs.len());
    for (slot, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            worst.push(0.0);
            continue;
        }
        let analytic = grads.get_or_zeros(vars[slot], input.numel());
        let mut probe = input.clone();
        let eval = |probe: &Tensor<f64>| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| t.leaf(if j == slot { probe.clone() } else { x.clone() }))
                .collect();
            let l = f(&mut t, &vs).expect("forward succeeded once");
            t.scalar(l)
        };
        let picks = sample_indices(input.numel(), max_elems);
        let mut a = Vec::with_capacity(picks.len());
        let mut num = Vec::with_capacity(picks.len());
        for &i in &picks {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + DEFAULT_STEP;
            let up = eval(&probe);
            probe.data_mut()[i] = orig - DEFAULT_STEP;
            let down = eval(&probe);
            probe.data_mut()[i] = orig;
            a.push(analytic[i]);
            num.push((up - down) / (2.0 * DEFAULT_STEP));
        }
        worst.push(max_relative_error(&a, &num, floor));
    }
    Ok(worst)
}
