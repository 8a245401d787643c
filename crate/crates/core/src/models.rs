//! Regression models over split feature sets and the squared-residual cost.
//!
//! Both model families are additive across the two feature blocks,
//! `f(x, z) = g(x) + h(z)`, so the cost `C_ij = (y_i - f(x_i, z_j))^2` and its
//! parameter gradient only need per-row and per-column quantities.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{dims, Error, Result};
use crate::ot::CostMatrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// `f(x, z) = [x, z] . w`
    #[default]
    Linear,
    /// `f(x, z) = sum_k sin([x, z]_k w_k)`
    Sine,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "sine" | "sin" => Ok(Self::Sine),
            other => Err(Error::Parse(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub w: DVector<f64>,
}

impl ModelParams {
    pub fn new(kind: ModelKind, w: DVector<f64>) -> Self {
        Self { kind, w }
    }

    pub fn zeros(kind: ModelKind, p: usize) -> Self {
        Self { kind, w: DVector::zeros(p) }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Two feature sets whose row correspondence is unknown. `D1` holds the
/// `x` features with labels `y`, `D2` holds the `z` features. `true_perm[i]`,
/// when known, is the `D2` row that belongs with `D1` row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShuffledDataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    z: DMatrix<f64>,
    true_perm: Option<Vec<usize>>,
}

impl ShuffledDataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, z: DMatrix<f64>, true_perm: Option<Vec<usize>>) -> Result<Self> {
        let (n, m) = (y.len(), z.nrows());
        if n == 0 || m == 0 {
            return Err(dims("datasets must have at least one row"));
        }
        if x.nrows() != n {
            return Err(dims(format!("x has {} rows but y has {n}", x.nrows())));
        }
        if x.iter().chain(y.iter()).chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset entries".into()));
        }
        if let Some(p) = &true_perm {
            if p.len() != n {
                return Err(dims(format!("true_perm has {} entries, expected {n}", p.len())));
            }
            let mut seen = vec![false; m];
            for &j in p {
                if j >= m || std::mem::replace(&mut seen[j], true) {
                    return Err(Error::InvalidConfig("true_perm must be injective into D2".into()));
                }
            }
        }
        Ok(Self { x, y, z, true_perm })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn m(&self) -> usize {
        self.z.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn e(&self) -> usize {
        self.z.ncols()
    }

    /// Number of model parameters, `d + e`.
    pub fn p(&self) -> usize {
        self.d() + self.e()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn true_perm(&self) -> Option<&[usize]> {
        self.true_perm.as_deref()
    }

    /// Sub-dataset with the given `D1` rows and `D2` rows. Ground truth is
    /// kept only when every selected `D1` row has its partner selected.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        let x = self.x.select_rows(rows);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        let z = self.z.select_rows(cols);
        let true_perm = self
            .true_perm
            .as_ref()
            .and_then(|p| rows.iter().map(|&i| cols.iter().position(|&j| j == p[i])).collect::<Option<Vec<_>>>());
        Self { x, y, z, true_perm }
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.len() != self.p() {
            return Err(dims(format!("model has {} parameters, data has d + e = {}", params.len(), self.p())));
        }
        Ok(())
    }
}

fn block_value(kind: ModelKind, feats: &[f64], w: &[f64]) -> f64 {
    match kind {
        ModelKind::Linear => feats.iter().zip(w).map(|(a, b)| a * b).sum(),
        ModelKind::Sine => feats.iter().zip(w).map(|(a, b)| (a * b).sin()).sum(),
    }
}

fn block_grad(kind: ModelKind, feats: &[f64], w: &[f64], out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(feats).zip(w) {
        *o = match kind {
            ModelKind::Linear => *a,
            ModelKind::Sine => a * (a * b).cos(),
        };
    }
}

fn row_vec(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Model prediction for one `(x, z)` pair.
pub fn predict(params: &ModelParams, x: &[f64], z: &[f64]) -> Result<f64> {
    if x.len() + z.len() != params.len() {
        return Err(dims(format!("{} + {} features for {} parameters", x.len(), z.len(), params.len())));
    }
    let (wx, wz) = params.w.as_slice().split_at(x.len());
    Ok(block_value(params.kind, x, wx) + block_value(params.kind, z, wz))
}

/// Gradient of `w -> sum_ij W_ij C_ij(w)` for a weight matrix `W`.
pub trait CostGradient {
    fn dim(&self) -> usize;

    /// `sum_ij weights_ij * grad_w C_ij`.
    fn contract(&self, weights: &DMatrix<f64>) -> DVector<f64>;
}

/// Squared-residual cost of an additive model on a dataset, in factored form:
/// `C_ij = (r_i - h_j)^2` with `r_i = y_i - g(x_i)`, `h_j = h(z_j)`.
#[derive(Debug, Clone)]
pub struct SquaredResidualCost {
    r: DVector<f64>,
    h: DVector<f64>,
    gx: DMatrix<f64>,
    hz: DMatrix<f64>,
}

impl SquaredResidualCost {
    pub fn new(params: &ModelParams, data: &ShuffledDataset) -> Result<Self> {
        data.check_params(params)?;
        let d = data.d();
        let (wx, wz) = params.w.as_slice().split_at(d);
        let kind = params.kind;
        let mut gx = DMatrix::zeros(data.n(), d);
        let mut buf = vec![0.0; d.max(data.e())];
        let r = DVector::from_fn(data.n(), |i, _| {
            let xi = row_vec(data.x(), i);
            block_grad(kind, &xi, wx, &mut buf[..d]);
            gx.set_row(i, &RowDVector::from_row_slice(&buf[..d]));
            data.y()[i] - block_value(kind, &xi, wx)
        });
        let e = data.e();
        let mut hz = DMatrix::zeros(data.m(), e);
        let h = DVector::from_fn(data.m(), |j, _| {
            let zj = row_vec(data.z(), j);
            block_grad(kind, &zj, wz, &mut buf[..e]);
            hz.set_row(j, &RowDVector::from_row_slice(&buf[..e]));
            block_value(kind, &zj, wz)
        });
        if r.iter().chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model predictions".into()));
        }
        Ok(Self { r, h, gx, hz })
    }

    pub fn cost_matrix(&self) -> Result<CostMatrix> {
        CostMatrix::from_fn(self.r.len(), self.h.len(), |i, j| (self.r[i] - self.h[j]).powi(2))
    }

    /// Labels minus the `x`-block prediction.
    pub fn row_targets(&self) -> &DVector<f64> {
        &self.r
    }

    /// `z`-block predictions.
    pub fn col_predictions(&self) -> &DVector<f64> {
        &self.h
    }

    /// Sum of squared residuals over the pairs `(i, pairs[i])` and its gradient.
    pub fn paired_loss_grad(&self, pairs: &[usize]) -> Result<(f64, DVector<f64>)> {
        if pairs.len() != self.r.len() || pairs.iter().any(|&j| j >= self.h.len()) {
            return Err(dims("pairing does not fit the data"));
        }
        let (d, e) = (self.gx.ncols(), self.hz.ncols());
        let mut grad = DVector::zeros(d + e);
        let mut loss = 0.0;
        for (i, &j) in pairs.iter().enumerate() {
            let res = self.r[i] - self.h[j];
            loss += res * res;
            for k in 0..d {
                grad[k] -= 2.0 * res * self.gx[(i, k)];
            }
            for k in 0..e {
                grad[d + k] -= 2.0 * res * self.hz[(j, k)];
            }
        }
        Ok((loss, grad))
    }
}

impl CostGradient for SquaredResidualCost {
    fn dim(&self) -> usize {
        self.gx.ncols() + self.hz.ncols()
    }

    fn contract(&self, weights: &DMatrix<f64>) -> DVector<f64> {
        // grad C_ij = -2 (r_i - h_j) [gx_i; hz_j]; only the row and column
        // sums of W_ij (r_i - h_j) are needed.
        let ones_m = DVector::from_element(self.h.len(), 1.0);
        let ones_n = DVector::from_element(self.r.len(), 1.0);
        let row = (weights * &ones_m).component_mul(&self.r) - weights * &self.h;
        let col = weights.tr_mul(&self.r) - weights.tr_mul(&ones_n).component_mul(&self.h);
        let mut g = DVector::zeros(self.dim());
        let d = self.gx.ncols();
        g.rows_mut(0, d).copy_from(&(self.gx.tr_mul(&row) * -2.0));
        g.rows_mut(d, self.hz.ncols()).copy_from(&(self.hz.tr_mul(&col) * -2.0));
        g
    }
}

/// `C_ij = (y_i - f(x_i, z_j))^2`.
pub fn cost_matrix(params: &ModelParams, data: &ShuffledDataset) -> Result<CostMatrix> {
    SquaredResidualCost::new(params, data)?.cost_matrix()
}

/// `sum (yhat - y)^2 / sum (y - mean y)^2` on a test set whose rows are
/// aligned (or aligned through `true_perm` when present).
pub fn relative_error(params: &ModelParams, test: &ShuffledDataset) -> Result<f64> {
    test.check_params(params)?;
    let pairs: Vec<usize> = match test.true_perm() {
        Some(p) => p.to_vec(),
        None if test.m() >= test.n() => (0..test.n()).collect(),
        None => return Err(Error::MissingGroundTruth),
    };
    let y = test.y();
    let mean = y.mean();
    let denom: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if denom == 0.0 {
        return Err(Error::DegenerateLabels);
    }
    let mut num = 0.0;
    for (i, &j) in pairs.iter().enumerate() {
        let yhat = predict(params, &row_vec(test.x(), i), &row_vec(test.z(), j))?;
        num += (yhat - y[i]).powi(2);
    }
    Ok(num / denom)
}

/// Optimal-matching cost of the model on a test set, relative to
/// `sum (y - mean y)^2`: `min_sigma sum_i (y_i - f(x_i, z_sigma(i)))^2` over
/// bijections between the `D1` rows and the `D2` rows that belong to them
/// (all `D2` rows when `true_perm` is absent and the sides have equal size).
/// The true pairing only selects which `z` rows take part.
pub fn matching_error(params: &ModelParams, test: &ShuffledDataset) -> Result<f64> {
    test.check_params(params)?;
    let cols: Vec<usize> = match test.true_perm() {
        Some(p) => p.to_vec(),
        None if test.m() == test.n() => (0..test.n()).collect(),
        None => return Err(Error::MissingGroundTruth),
    };
    let y = test.y();
    let mean = y.mean();
    let denom: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if denom == 0.0 {
        return Err(Error::DegenerateLabels);
    }
    let rows: Vec<usize> = (0..test.n()).collect();
    let model = SquaredResidualCost::new(params, &test.select(&rows, &cols))?;
    let r = model.row_targets();
    let h = model.col_predictions();
    let perm = crate::ot::assignment_sorted(r.as_slice(), h.as_slice())?;
    let num: f64 = perm.iter().enumerate().map(|(i, &j)| (r[i] - h[j]).powi(2)).sum();
    Ok(num / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dataset(x: &[f64], d: usize, y: &[f64], z: &[f64], e: usize) -> ShuffledDataset {
        let n = y.len();
        let m = z.len().checked_div(e).unwrap_or(0);
        ShuffledDataset::new(
            DMatrix::from_row_slice(n, d, x),
            DVector::from_row_slice(y),
            DMatrix::from_row_slice(m, e, z),
            None,
        )
        .unwrap()
    }

    #[test]
    fn prediction_examples() {
        let lin = ModelParams::new(ModelKind::Linear, DVector::from_vec(vec![1.0, 2.0]));
        assert_eq!(predict(&lin, &[], &[3.0, 4.0]).unwrap(), 11.0);
        let sine = ModelParams::new(ModelKind::Sine, DVector::from_vec(vec![std::f64::consts::FRAC_PI_2]));
        assert!((predict(&sine, &[1.0], &[]).unwrap() - 1.0).abs() < 1e-15);
        assert!(predict(&lin, &[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn cost_matrix_matches_definition() {
        let data = dataset(&[1.0, -1.0], 1, &[2.0, 0.5], &[0.3, -0.2, 1.5], 1);
        let params = ModelParams::new(ModelKind::Sine, DVector::from_vec(vec![0.7, -1.3]));
        let c = cost_matrix(&params, &data).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let f = predict(&params, &[data.x()[(i, 0)]], &[data.z()[(j, 0)]]).unwrap();
                assert!((c.get(i, j) - (data.y()[i] - f).powi(2)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matching_error_ignores_the_pairing() {
        let x = DMatrix::zeros(3, 0);
        let z = DMatrix::from_column_slice(3, 1, &[3.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let test = ShuffledDataset::new(x, y, z, Some(vec![1, 2, 0])).unwrap();
        let exact = ModelParams::new(ModelKind::Linear, DVector::from_vec(vec![1.0]));
        assert_eq!(matching_error(&exact, &test).unwrap(), 0.0);
        let scaled = ModelParams::new(ModelKind::Linear, DVector::from_vec(vec![2.0]));
        // Sorted matching pairs 1, 2, 3 with 2, 4, 6.
        assert!((matching_error(&scaled, &test).unwrap() - 14.0 / 2.0).abs() < 1e-15);
        assert!(matching_error(&scaled, &test).unwrap() <= relative_error(&scaled, &test).unwrap());
    }

    #[test]
    fn relative_error_examples() {
        let test = dataset(&[], 0, &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 1);
        let exact = ModelParams::new(ModelKind::Linear, DVector::from_vec(vec![1.0]));
        assert_eq!(relative_error(&exact, &test).unwrap(), 0.0);
        // Predicting zero everywhere: sum y^2 / sum (y - 2)^2 = 14 / 2.
        let zero = ModelParams::zeros(ModelKind::Linear, 1);
        assert!((relative_error(&zero, &test).unwrap() - 7.0).abs() < 1e-15);
        let flat = dataset(&[], 0, &[1.0, 1.0], &[1.0, 2.0], 1);
        assert!(matches!(relative_error(&zero, &flat), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn dataset_validation() {
        let bad = ShuffledDataset::new(
            DMatrix::zeros(2, 0),
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::zeros(2, 1),
            Some(vec![1, 1]),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn select_remaps_ground_truth() {
        let data = ShuffledDataset::new(
            DMatrix::zeros(3, 0),
            DVector::from_vec(vec![1.0, 2.0, 3.0]),
            DMatrix::from_row_slice(3, 1, &[10.0, 20.0, 30.0]),
            Some(vec![2, 0, 1]),
        )
        .unwrap();
        let sub = data.select(&[0, 2], &[1, 2]);
        assert_eq!(sub.true_perm(), Some(&[1, 0][..]));
        assert_eq!(data.select(&[1], &[1, 2]).true_perm(), None);
    }

    proptest! {
        // The factored contraction against an entry-by-entry evaluation of
        // grad C_ij = -2 (y_i - f_ij) grad f_ij.
        #[test]
        fn contraction_matches_entrywise_sum(seed in any::<u64>(), sine in any::<bool>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (n, m, d, e) = (4, 3, 2, 2);
            let mut r = |k| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let data = dataset(&r(n * d), d, &r(n), &r(m * e), e);
            let kind = if sine { ModelKind::Sine } else { ModelKind::Linear };
            let params = ModelParams::new(kind, DVector::from_vec(r(d + e)));
            let weights = DMatrix::from_vec(n, m, r(n * m));
            let got = SquaredResidualCost::new(&params, &data).unwrap().contract(&weights);

            let mut want = DVector::zeros(d + e);
            for i in 0..n {
                for j in 0..m {
                    let feats: Vec<f64> = data.x().row(i).iter().chain(data.z().row(j).iter()).copied().collect();
                    let f = predict(&params, &feats[..d], &feats[d..]).unwrap();
                    for k in 0..d + e {
                        let df = match kind {
                            ModelKind::Linear => feats[k],
                            ModelKind::Sine => feats[k] * (feats[k] * params.w[k]).cos(),
                        };
                        want[k] += weights[(i, j)] * -2.0 * (data.y()[i] - f) * df;
                    }
                }
            }
            prop_assert!((got - want).amax() < 1e-12);
        }
    }
}
