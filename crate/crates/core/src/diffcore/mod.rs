//! Differentiation engine: a reverse-mode tape over the fitting objective,
//! forward-mode duals for UV Jacobian columns, and a central-difference
//! oracle used to verify both.

pub mod dual;
pub mod eig;
pub mod tape;

use ndarray::Array2;

pub use dual::{directional_jacobian, Dual, UvAxis};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Flat vector of every trainable value. The index of each parameter is
/// fixed once the owning atlas is constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock(pub Vec<f64>);

impl ParameterBlock {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    fn to_column(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.0.len(), 1), self.0.clone()).expect("column shape")
    }
}

/// Gradient laid out like the [`ParameterBlock`] it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub(crate) fn from_column(len: usize, g: Option<&Array2<f64>>) -> Self {
        match g {
            Some(g) => GradientVector(g.iter().copied().collect()),
            None => GradientVector(vec![0.0; len]),
        }
    }
}

/// Records `objective` on a fresh tape with `params` as the gradient-carrying
/// leaf and returns its value and exact gradient.
pub fn value_and_grad<F>(params: &ParameterBlock, objective: F) -> Result<(f64, GradientVector)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.param(params.to_column());
    let out = objective(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let value = tape.scalar(out);
    Ok((value, GradientVector::from_column(params.len(), grads.get(leaf))))
}

/// Value of `objective` without a reverse sweep.
pub fn evaluate<F>(params: &ParameterBlock, objective: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.param(params.to_column());
    let out = objective(&mut tape, leaf)?;
    tape.check_finite()?;
    let (r, c) = tape.shape(out);
    if (r, c) != (1, 1) {
        return Err(Error::NotScalar { rows: r, cols: c });
    }
    Ok(tape.scalar(out))
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` for every
/// coordinate of `params`.
pub fn finite_diff_grad<F>(params: &ParameterBlock, h: f64, mut objective: F) -> Result<GradientVector>
where
    F: FnMut(&ParameterBlock) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut x = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = x.0[i];
        x.0[i] = orig + h;
        let plus = objective(&x)?;
        x.0[i] = orig - h;
        let minus = objective(&x)?;
        x.0[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteDifference { index: i });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(GradientVector(out))
}

/// Largest `|a_i − b_i| / max(1, |b_i|)` over all coordinates.
pub fn max_relative_error(a: &GradientVector, b: &GradientVector) -> f64 {
    a.0.iter()
        .zip(&b.0)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares(t: &mut Tape, p: Var) -> Result<Var> {
        let sq = t.square(p);
        Ok(t.sum(sq))
    }

    #[test]
    fn quadratic_value_and_grad() {
        let p = ParameterBlock(vec![1.0, -2.0]);
        let (v, g) = value_and_grad(&p, sum_of_squares).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g.0, vec![2.0, -4.0]);
    }

    #[test]
    fn constant_objective_gradient_is_zero() {
        let p = ParameterBlock(vec![1.0, -2.0, 3.0]);
        let (v, g) = value_and_grad(&p, |t, _| Ok(t.scalar_constant(7.0))).unwrap();
        assert_eq!(v, 7.0);
        assert_eq!(g.0, vec![0.0; 3]);
    }

    #[test]
    fn finite_difference_of_square() {
        let p = ParameterBlock(vec![3.0]);
        let g = finite_diff_grad(&p, 1e-5, |x| Ok(x.0[0] * x.0[0])).unwrap();
        assert!((g.0[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn finite_difference_of_softplus() {
        let p = ParameterBlock(vec![0.0]);
        let g = finite_diff_grad(&p, 1e-5, |x| Ok(tape::softplus(x.0[0]))).unwrap();
        assert!((g.0[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn finite_difference_rejects_bad_step() {
        let p = ParameterBlock(vec![0.0]);
        assert!(finite_diff_grad(&p, 0.0, |_| Ok(0.0)).is_err());
        assert!(matches!(
            finite_diff_grad(&p, 1e-3, |x| Ok(1.0 / x.0[0].max(0.0))),
            Err(Error::NonFiniteDifference { index: 0 })
        ));
    }

    #[test]
    fn linearity_of_gradients() {
        let p = ParameterBlock(vec![0.3, -1.2, 0.7]);
        let (_, gf) = value_and_grad(&p, |t, v| {
            let s = t.softplus(v);
            Ok(t.sum(s))
        })
        .unwrap();
        let (_, gg) = value_and_grad(&p, sum_of_squares).unwrap();
        let (a, b) = (2.5, -0.75);
        let (_, combined) = value_and_grad(&p, |t, v| {
            let s = t.softplus(v);
            let fs = t.sum(s);
            let gs = sum_of_squares(t, v)?;
            let fa = t.scale(fs, a);
            let gb = t.scale(gs, b);
            t.add(fa, gb)
        })
        .unwrap();
        for i in 0..3 {
            assert_eq!(combined.0[i], a * gf.0[i] + b * gg.0[i]);
        }
    }
}
