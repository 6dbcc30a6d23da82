//! Central-difference gradient verification.
//!
//! The autodiff side runs in the requested precision; the finite-difference
//! oracle always runs in 64-bit.

use crate::error::{NumError, Result};
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A scalar-valued computation that can be evaluated in any precision.
pub trait Objective {
    fn eval<S: Real>(&self, tape: &mut Tape<S>, params: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub coordinates: usize,
    pub precision: Precision,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub param: usize,
    pub offset: usize,
    pub autodiff: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checks: Vec<CoordinateCheck>,
}

fn loss_f64<O: Objective>(f: &O, params: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::inference();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(NumError::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

fn autodiff<S: Real, O: Objective>(f: &O, params: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::<S>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.cast::<S>())).collect();
    let out = f.eval(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(NumError::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, p)| match grads.wrt(*v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; p.len()],
        })
        .collect())
}

/// Max over sampled coordinates of `|autodiff - central| / (|central| + 1e-8)`.
pub fn grad_check<O: Objective>(f: &O, params: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if opts.eps <= 0.0 {
        return Err(NumError::Contract("grad_check eps must be positive".into()));
    }
    let analytic = match opts.precision {
        Precision::F32 => autodiff::<f32, O>(f, params)?,
        Precision::F64 => autodiff::<f64, O>(f, params)?,
    };
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut rng = SeededRng::new(opts.seed);
    let picks = rng.sample_indices(total, opts.coordinates);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut checks = Vec::with_capacity(picks.len());
    for flat in picks {
        let mut rem = flat;
        let mut pi = 0;
        while rem >= params[pi].len() {
            rem -= params[pi].len();
            pi += 1;
        }
        let orig = work[pi].data()[rem];
        work[pi].data_mut()[rem] = orig + opts.eps;
        let up = loss_f64(f, &work)?;
        work[pi].data_mut()[rem] = orig - opts.eps;
        let down = loss_f64(f, &work)?;
        work[pi].data_mut()[rem] = orig;
        let numeric = (up - down) / (2.0 * opts.eps);
        let ad = analytic[pi][rem];
        let rel_error = (ad - numeric).abs() / (numeric.abs() + 1e-8);
        checks.push(CoordinateCheck {
            param: pi,
            offset: rem,
            autodiff: ad,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumSquares;
    impl Objective for SumSquares {
        fn eval<S: Real>(&self, tape: &mut Tape<S>, p: &[Var]) -> Result<Var> {
            let sq = tape.mul(p[0], p[0])?;
            tape.sum(sq)
        }
    }

    struct Constant;
    impl Objective for Constant {
        fn eval<S: Real>(&self, tape: &mut Tape<S>, _p: &[Var]) -> Result<Var> {
            Ok(tape.constant(Tensor::scalar(S::from_f64_lossy(3.0))))
        }
    }

    fn opts(precision: Precision) -> GradCheckOptions {
        GradCheckOptions {
            eps: 1e-3,
            coordinates: 5,
            precision,
            seed: 1,
        }
    }

    #[test]
    fn polynomial_is_exact_in_f64() {
        let x = Tensor::new([5], vec![0.3, -1.1, 2.0, 0.7, -0.2]).unwrap();
        let r = grad_check(&SumSquares, &[x], &opts(Precision::F64)).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let x = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(&Constant, &[x], &opts(Precision::F32)).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_positive_eps_rejected() {
        let x = Tensor::new([1], vec![1.0]).unwrap();
        let mut o = opts(Precision::F64);
        o.eps = 0.0;
        assert!(grad_check(&SumSquares, &[x], &o).is_err());
    }
}
