use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

fn check(d1: usize, d2: usize, rho: f64, lambda: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidRho(rho));
    }
    if d1 == 0 || d2 == 0 {
        return Err(Error::InvalidConfig("d1 and d2 must be >= 1".into()));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(())
}

/// Condition numbers `(c_am, c_robot)` of the alternating-minimization
/// sub-Hessian `P11` and the reduced Hessian `P11 - P12 (P22 + lambda I)^-1 P21`
/// for the equicorrelated Gram matrix `P = rho 11^T + (1 - rho) I` split into
/// blocks of size `d1` and `d2`.
///
/// With a single coordinate (`d1 = 1`) both Hessians are scalars and both
/// condition numbers are 1.
pub fn condition_numbers(d1: usize, d2: usize, rho: f64, lambda: f64) -> Result<(f64, f64)> {
    check(d1, d2, rho, lambda)?;
    if d1 == 1 {
        return Ok((1.0, 1.0));
    }
    let (d1f, d2f) = (d1 as f64, d2 as f64);
    let am = 1.0 + d1f * rho / (1.0 - rho);
    let robot = 1.0 + (1.0 - rho + lambda) / (d2f * rho - rho + lambda + 1.0) * d1f * rho / (1.0 - rho);
    Ok((am, robot))
}

/// The same two condition numbers from explicit matrices and a dense
/// symmetric eigensolve.
pub fn condition_numbers_numeric(d1: usize, d2: usize, rho: f64, lambda: f64) -> Result<(f64, f64)> {
    check(d1, d2, rho, lambda)?;
    let d = d1 + d2;
    let p = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho });
    let p11 = p.view((0, 0), (d1, d1)).into_owned();
    let p12 = p.view((0, d1), (d1, d2)).into_owned();
    let mut p22 = p.view((d1, d1), (d2, d2)).into_owned();
    for k in 0..d2 {
        p22[(k, k)] += lambda;
    }
    let solved = p22.lu().solve(&p12.transpose()).ok_or_else(|| Error::SingularSystem("P22 + lambda I".into()))?;
    let reduced = &p11 - &p12 * solved;
    let ratio = |m: DMatrix<f64>| {
        let sym = (&m + m.transpose()) * 0.5;
        let ev = SymmetricEigen::new(sym).eigenvalues;
        ev.max() / ev.min()
    };
    Ok((ratio(p11), ratio(reduced)))
}
