use nalgebra::{DMatrix, DVector};

use super::{CostMatrix, MarginalWeights, TransportPlan};
use crate::error::{dims, Error, Result};

const UNIFORM_TOL: f64 = 1e-12;

/// Probability-scale plan (marginals `1/n`) to correspondence scale
/// (marginals all ones): `S = n * Gamma`.
pub fn scale_plan(plan: &TransportPlan, n: usize) -> Result<TransportPlan> {
    let target = 1.0 / n as f64;
    let uniform = |w: &MarginalWeights| w.as_slice().iter().all(|x| (x - target).abs() <= UNIFORM_TOL);
    if plan.nrows() != n || !uniform(plan.row_marginal()) || !uniform(plan.col_marginal()) {
        return Err(Error::NonUniformMarginals);
    }
    let ones = |k| MarginalWeights::from_raw(DVector::from_element(k, 1.0));
    TransportPlan::new(plan.entries() * n as f64, ones(plan.nrows()), ones(plan.ncols()))
}

/// Inverse of [`scale_plan`].
pub fn unscale_plan(plan: &TransportPlan) -> Result<TransportPlan> {
    let n = plan.nrows();
    let ones = |w: &MarginalWeights| w.as_slice().iter().all(|x| (x - 1.0).abs() <= UNIFORM_TOL);
    if !ones(plan.row_marginal()) || !ones(plan.col_marginal()) {
        return Err(Error::NonUniformMarginals);
    }
    TransportPlan::new(
        plan.entries() / n as f64,
        MarginalWeights::uniform(plan.nrows()),
        MarginalWeights::uniform(plan.ncols()),
    )
}

/// `sum S_ij log S_ij` with `0 log 0 = 0`.
///
/// Some texts write the entropy as `sum S (log S - 1)`; on plans of fixed total
/// mass the two differ by that mass, so minimizers agree.
pub fn entropy(s: &DMatrix<f64>) -> f64 {
    s.iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).sum()
}

/// `<C, S> + epsilon * sum S_ij log S_ij`.
pub fn entropic_objective(cost: &CostMatrix, plan: &TransportPlan, epsilon: f64) -> Result<f64> {
    if cost.values().shape() != plan.entries().shape() {
        return Err(dims("cost and plan shapes differ"));
    }
    let transport = cost.values().dot(plan.entries());
    if epsilon == 0.0 {
        return Ok(transport);
    }
    Ok(transport + epsilon * entropy(plan.entries()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::Permutation;

    fn prob_plan(m: DMatrix<f64>) -> TransportPlan {
        let (n, k) = m.shape();
        TransportPlan::new(m, MarginalWeights::uniform(n), MarginalWeights::uniform(k)).unwrap()
    }

    #[test]
    fn scaling_examples() {
        let g = prob_plan(DMatrix::from_element(4, 4, 1.0 / 16.0));
        let s = scale_plan(&g, 4).unwrap();
        assert!(s.entries().iter().all(|x| (x - 0.25).abs() < 1e-16));
        assert!(s.row_marginal().as_slice().iter().all(|x| *x == 1.0));

        let p = Permutation::new(vec![1, 2, 0]).unwrap().to_matrix();
        let s = scale_plan(&prob_plan(&p / 3.0), 3).unwrap();
        assert!((s.entries() - &p).amax() < 1e-15);

        let back = unscale_plan(&s).unwrap();
        assert!((back.entries() - &p / 3.0).amax() <= 1e-15);
    }

    #[test]
    fn scaling_rejects_nonuniform() {
        let w = MarginalWeights::new(vec![0.25, 0.75]).unwrap();
        let g = TransportPlan::new(DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.25, 0.5]), w.clone(), w).unwrap();
        assert!(matches!(scale_plan(&g, 2), Err(Error::NonUniformMarginals)));
    }

    #[test]
    fn objective_examples() {
        let zero = CostMatrix::from_fn(2, 2, |_, _| 0.0).unwrap();
        let g = prob_plan(DMatrix::from_element(2, 2, 0.25));
        let v = entropic_objective(&zero, &g, 1.0).unwrap();
        assert!((v - 0.25f64.ln()).abs() < 1e-15);

        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(entropic_objective(&c, &g, 0.0).unwrap(), 2.5);

        let ones = MarginalWeights::from_raw(DVector::from_element(2, 1.0));
        let perm = TransportPlan::new(DMatrix::identity(2, 2), ones.clone(), ones).unwrap();
        assert_eq!(entropic_objective(&c, &perm, 0.3).unwrap(), 5.0);
    }
}
